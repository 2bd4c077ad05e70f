use std::collections::{HashMap, HashSet};

use fgga::datagen::{
    generate_world, load_embeddings, load_features, random_partition, save_embeddings, save_features, split,
    split_gzsl, Protocol, WorldSpec,
};
use proptest::prelude::*;

fn spec(samples: usize) -> WorldSpec {
    WorldSpec {
        n_seen: 6,
        n_unseen: 4,
        n_objects: 5,
        d_x: 32,
        d_c: 16,
        samples_per_class: samples,
        ..WorldSpec::default()
    }
}

fn counts<'a>(labels: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for l in labels {
        *m.entry(l).or_default() += 1;
    }
    m
}

#[test]
fn files_round_trip_at_f32_precision() {
    let world = generate_world(&spec(12)).unwrap();
    let s = split_gzsl(&world, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.fgft");
    save_features(&p, 32, &s.train).unwrap();
    let (d, back) = load_features(&p).unwrap();
    assert_eq!(d, 32);
    assert_eq!(back.len(), s.train.len());
    for (a, b) in s.train.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        let rounded: Vec<f64> = a.feature.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(rounded, b.feature);
    }
    let e = dir.path().join("e.fgem");
    save_embeddings(&e, 16, &world.objects).unwrap();
    let (dc, objs) = load_embeddings(&e).unwrap();
    assert_eq!(dc, 16);
    assert_eq!(objs.iter().map(|o| &o.name).collect::<Vec<_>>(), world.objects.iter().map(|o| &o.name).collect::<Vec<_>>());
}

#[test]
fn fraction_half_gives_distinct_partitions() {
    let world = generate_world(&spec(10)).unwrap();
    let parts: HashSet<Vec<String>> = (0..10).map(|s| random_partition(&world, 0.5, s).unwrap().seen).collect();
    assert!(parts.len() >= 9, "only {} distinct partitions", parts.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zsl_train_never_contains_unseen_classes(seed in 0u64..1000, frac in 0.1f64..0.9) {
        let world = generate_world(&spec(8)).unwrap();
        let p = random_partition(&world, frac, seed).unwrap();
        let s = split(&world, &p, Protocol::Zsl, seed).unwrap();
        let unseen: HashSet<&str> = s.unseen_labels.iter().map(String::as_str).collect();
        prop_assert!(s.train.iter().all(|x| !unseen.contains(x.label.as_str())));
        prop_assert!(s.test.iter().all(|x| unseen.contains(x.label.as_str())));
        prop_assert_eq!(s.train.len() + s.test.len(), 10 * 8);
        prop_assert!(!s.seen_labels.is_empty() && !s.unseen_labels.is_empty());
    }

    #[test]
    fn gzsl_holds_out_a_fifth_of_each_seen_class(seed in 0u64..1000, n in 5usize..60) {
        let world = generate_world(&spec(n)).unwrap();
        let s = split_gzsl(&world, seed).unwrap();
        let test = counts(s.test.iter().map(|x| x.label.as_str()));
        let train = counts(s.train.iter().map(|x| x.label.as_str()));
        for c in &s.seen_labels {
            prop_assert_eq!(test[c.as_str()], n / 5);
            prop_assert_eq!(train[c.as_str()], n - n / 5);
        }
        for c in &s.unseen_labels {
            prop_assert_eq!(test[c.as_str()], n);
            prop_assert!(!train.contains_key(c.as_str()));
        }
    }
}
