mod common;

use common::{act, check_gradients, mlp_oracle, random_mlp, rng, uniform};
use fgga::array::{cosine, Array};
use fgga::autodiff::ExprGraph;
use fgga::config::PipelineConfig;
use fgga::datagen::{self, Sample};
use fgga::eval::Mode;
use fgga::genfeat::{
    critic_loss, cycle_loss, gaussian_noise, generator_loss, interpolate, synthesize_features, train_gan, Embeddings,
    GanConfig,
};
use fgga::nn::{Activation, Mlp};
use fgga::pipeline;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SLOPE: f64 = 0.2;

fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        SLOPE
    }
}

fn concat_cols(a: &Array, b: &Array) -> Array {
    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| [a.row_slice(i), b.row_slice(i)].concat()).collect();
    Array::from_rows(&rows, a.cols() + b.cols()).unwrap()
}

/// `∂D/∂x` per row of a two-layer critic evaluated at `[x, c]`.
fn critic_input_grad(critic: &Mlp, v: &[f64], d_x: usize) -> Vec<f64> {
    let (l1, l2) = (&critic.layers[0], &critic.layers[1]);
    let mut grad = vec![0.0; d_x];
    for h in 0..l1.weight.rows() {
        let z = l1.bias.data()[h] + (0..v.len()).map(|i| l1.weight.get(h, i) * v[i]).sum::<f64>();
        let back = l2.weight.get(0, h) * leaky_grad(z);
        for (j, gj) in grad.iter_mut().enumerate() {
            *gj += back * l1.weight.get(h, j);
        }
    }
    grad
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Fixture {
    critic: Mlp,
    generator: Mlp,
    decoder: Mlp,
    x: Array,
    x_fake: Array,
    x_hat: Array,
    z: Array,
    c: Array,
}

const DX: usize = 3;
const DC: usize = 2;
const DZ: usize = 2;

fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let a = Activation::LeakyRelu(SLOPE);
    let critic = random_mlp(&[DX + DC, 6, 1], a, Activation::None, &mut r);
    let generator = random_mlp(&[DZ + DC, 5, DX], a, Activation::None, &mut r);
    let decoder = random_mlp(&[DX, 4, DC], a, Activation::None, &mut r);
    let x = uniform(4, DX, -1.0, 1.0, &mut r);
    let x_fake = uniform(4, DX, -1.0, 1.0, &mut r);
    let x_hat = interpolate(&x, &x_fake, &mut r).unwrap();
    let z = uniform(4, DZ, -1.0, 1.0, &mut r);
    let c = uniform(4, DC, -1.0, 1.0, &mut r);
    Fixture {
        critic,
        generator,
        decoder,
        x,
        x_fake,
        x_hat,
        z,
        c,
    }
}

fn critic_oracle(f: &Fixture, lambda: f64) -> f64 {
    let d = |x: &Array| mlp_oracle(&f.critic, &concat_cols(x, &f.c)).data().to_vec();
    let w = mean(&d(&f.x)) - mean(&d(&f.x_fake));
    let hat = concat_cols(&f.x_hat, &f.c);
    let pens: Vec<f64> = (0..hat.rows())
        .map(|i| {
            let g = critic_input_grad(&f.critic, hat.row_slice(i), DX);
            let n = (g.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            (n - 1.0).powi(2)
        })
        .collect();
    w - lambda * mean(&pens)
}

fn cycle_oracle(decoder: &Mlp, x_tilde: &Array, c: &Array) -> f64 {
    let c_hat = mlp_oracle(decoder, x_tilde);
    let norms: Vec<f64> = (0..c.rows())
        .map(|i| {
            let s: f64 = c_hat.row_slice(i).iter().zip(c.row_slice(i)).map(|(a, b)| (a - b).powi(2)).sum();
            (s + 1e-12).sqrt()
        })
        .collect();
    mean(&norms)
}

fn critic_value(f: &Fixture, critic: &Mlp, lambda: f64) -> f64 {
    let mut g = ExprGraph::new();
    let cb = critic.bind(&mut g).unwrap();
    let x = g.constant(f.x.clone()).unwrap();
    let xf = g.constant(f.x_fake.clone()).unwrap();
    let xh = g.constant(f.x_hat.clone()).unwrap();
    let c = g.constant(f.c.clone()).unwrap();
    let t = critic_loss(&mut g, &cb, x, xf, xh, c, lambda).unwrap();
    g.eval_scalar(t.loss).unwrap()
}

#[test]
fn critic_loss_matches_term_by_term_oracle() {
    for seed in 0..10 {
        let f = fixture(seed);
        let got = critic_value(&f, &f.critic, 10.0);
        assert!((got - critic_oracle(&f, 10.0)).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn cycle_loss_matches_row_wise_oracle() {
    for seed in 0..10 {
        let f = fixture(seed);
        let mut g = ExprGraph::new();
        let dec = f.decoder.bind(&mut g).unwrap();
        let xt = g.constant(f.x_fake.clone()).unwrap();
        let c = g.constant(f.c.clone()).unwrap();
        let l = cycle_loss(&mut g, &dec, xt, c).unwrap();
        let got = g.eval_scalar(l).unwrap();
        assert!((got - cycle_oracle(&f.decoder, &f.x_fake, &f.c)).abs() < 1e-10);
    }
}

#[test]
fn generator_loss_matches_term_by_term_oracle() {
    for seed in 0..10 {
        let f = fixture(seed);
        let beta = 0.37;
        let mut g = ExprGraph::new();
        let gen = f.generator.bind(&mut g).unwrap();
        let cri = f.critic.bind(&mut g).unwrap();
        let dec = f.decoder.bind(&mut g).unwrap();
        let z = g.constant(f.z.clone()).unwrap();
        let c = g.constant(f.c.clone()).unwrap();
        let t = generator_loss(&mut g, &gen, &cri, &dec, z, c, beta).unwrap();
        let got = g.eval_scalar(t.loss).unwrap();

        let x_tilde = mlp_oracle(&f.generator, &concat_cols(&f.z, &f.c));
        let d = mlp_oracle(&f.critic, &concat_cols(&x_tilde, &f.c));
        let expect = -mean(d.data()) + beta * cycle_oracle(&f.decoder, &x_tilde, &f.c);
        assert!((got - expect).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn critic_loss_is_invariant_to_an_output_offset() {
    for seed in 0..5 {
        let f = fixture(seed);
        let mut shifted = f.critic.clone();
        shifted.layers[1].bias.data_mut()[0] += 17.5;
        assert!((critic_value(&f, &f.critic, 10.0) - critic_value(&f, &shifted, 10.0)).abs() < 1e-10);
    }
}

#[test]
fn zero_weights_reduce_to_the_wasserstein_surrogate() {
    let f = fixture(3);
    let mut g = ExprGraph::new();
    let cb = f.critic.bind(&mut g).unwrap();
    let x = g.constant(f.x.clone()).unwrap();
    let xf = g.constant(f.x_fake.clone()).unwrap();
    let xh = g.constant(f.x_hat.clone()).unwrap();
    let c = g.constant(f.c.clone()).unwrap();
    let t = critic_loss(&mut g, &cb, x, xf, xh, c, 0.0).unwrap();
    assert_eq!(g.eval_scalar(t.loss).unwrap(), g.eval_scalar(t.wasserstein).unwrap());

    let gen = f.generator.bind(&mut g).unwrap();
    let dec = f.decoder.bind(&mut g).unwrap();
    let z = g.constant(f.z.clone()).unwrap();
    let gt = generator_loss(&mut g, &gen, &cb, &dec, z, c, 0.0).unwrap();
    assert_eq!(g.eval_scalar(gt.loss).unwrap(), g.eval_scalar(gt.adversarial).unwrap());
}

#[test]
fn critic_gradients_pass_through_the_penalty() {
    for seed in 0..5 {
        let f = fixture(seed);
        let mut g = ExprGraph::new();
        let cb = f.critic.bind(&mut g).unwrap();
        let x = g.constant(f.x.clone()).unwrap();
        let xf = g.constant(f.x_fake.clone()).unwrap();
        let xh = g.constant(f.x_hat.clone()).unwrap();
        let c = g.constant(f.c.clone()).unwrap();
        let t = critic_loss(&mut g, &cb, x, xf, xh, c, 10.0).unwrap();
        let params = cb.param_ids();
        assert!(check_gradients(&mut g, t.penalty, &params) < 1e-3);
        assert!(check_gradients(&mut g, t.loss, &params) < 1e-3);
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    for seed in 0..5 {
        let f = fixture(seed);
        let mut g = ExprGraph::new();
        let gen = f.generator.bind(&mut g).unwrap();
        let cri = f.critic.bind(&mut g).unwrap();
        let dec = f.decoder.bind(&mut g).unwrap();
        let z = g.constant(f.z.clone()).unwrap();
        let c = g.constant(f.c.clone()).unwrap();
        let t = generator_loss(&mut g, &gen, &cri, &dec, z, c, 0.5).unwrap();
        let mut params = gen.param_ids();
        params.extend(dec.param_ids());
        assert!(check_gradients(&mut g, t.loss, &params) < 1e-4);
    }
}

/// Two well-separated Gaussian classes in 8 dimensions.
fn toy_world(seed: u64) -> (Vec<Sample>, Embeddings) {
    let mut r = rng(seed);
    let mut train = vec![];
    let mut emb = Embeddings::new();
    for label in ["a", "b"] {
        let e: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let feature = mu
                .iter()
                .map(|m| m + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                .collect();
            train.push(Sample {
                feature,
                label: label.into(),
            });
        }
        emb.insert(label.into(), e);
    }
    (train, emb)
}

fn toy_config() -> GanConfig {
    GanConfig {
        epochs: 40,
        ..GanConfig::default()
    }
}

#[test]
fn toy_training_shrinks_wasserstein_and_settles_the_penalty() {
    let (train, emb) = toy_world(0);
    let (_, hist) = train_gan(&toy_config(), &train, &emb, 8, 4, 42).unwrap();
    let w: Vec<f64> = hist.epochs.iter().map(|e| e.wasserstein).collect();
    let peak = w.iter().cloned().fold(f64::MIN, f64::max);
    let last = hist.epochs.last().unwrap();
    assert!(last.wasserstein <= 0.5 * peak, "wasserstein per epoch {w:?}");
    assert!(last.penalty_mean < 0.5, "penalty {}", last.penalty_mean);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (train, emb) = toy_world(1);
    let cfg = GanConfig {
        epochs: 2,
        hidden_ratio: 2,
        ..GanConfig::default()
    };
    let (n1, h1) = train_gan(&cfg, &train, &emb, 8, 4, 9).unwrap();
    let (n2, h2) = train_gan(&cfg, &train, &emb, 8, 4, 9).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(n1, n2);
    let (_, h3) = train_gan(&cfg, &train, &emb, 8, 4, 10).unwrap();
    assert_ne!(h1, h3);
}

#[test]
fn synthesis_draws_are_labelled_and_seeded() {
    let (train, emb) = toy_world(2);
    let cfg = GanConfig {
        epochs: 0,
        ..GanConfig::default()
    };
    let (nets, _) = train_gan(&cfg, &train, &emb, 8, 4, 0).unwrap();
    let e = &emb["a"];
    let s1 = synthesize_features(&nets.generator, nets.d_z, "a", e, 7, &mut rng(5)).unwrap();
    let s2 = synthesize_features(&nets.generator, nets.d_z, "a", e, 7, &mut rng(5)).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.len(), 7);
    assert!(s1.iter().all(|s| s.label == "a" && s.feature.len() == 8));
    let noise = gaussian_noise(3, 2, &mut rng(1));
    assert_eq!(noise.shape(), &[3, 2]);
}

/// Similarity is ranked among the unseen prototypes, the candidate set a
/// zero-shot prediction chooses from.
#[test]
fn default_world_synthesis_lands_near_the_right_prototypes() {
    let config = PipelineConfig::default();
    let world = datagen::generate_world(&config.world).unwrap();
    for seed in 0..2 {
        let data = pipeline::generate_dataset(&config, seed).unwrap();
        let (nets, _) = pipeline::stage_gan(&config, &data, Mode::Full).unwrap().unwrap();
        let synth = pipeline::stage_synth(&data, &nets, 100).unwrap();
        let unseen = &data.split.unseen_labels;
        let protos: Vec<Vec<f64>> = unseen.iter().map(|c| world.prototype(c).unwrap()).collect();
        let mut good = 0;
        for (own, u) in unseen.iter().enumerate() {
            let rows: Vec<&Sample> = synth.iter().filter(|s| &s.label == u).collect();
            let sims: Vec<f64> = protos
                .iter()
                .map(|p| rows.iter().map(|s| cosine(&s.feature, p)).sum::<f64>() / rows.len() as f64)
                .collect();
            if (0..sims.len()).all(|j| j == own || sims[own] > sims[j]) {
                good += 1;
            }
        }
        assert!(good >= 4, "seed {seed}: {good} of 5 unseen classes closest to their own prototype");
    }
}

#[test]
fn hidden_activation_oracle_agrees_with_library() {
    for v in [-2.0, -0.1, 0.0, 0.3] {
        assert_eq!(act(Activation::LeakyRelu(SLOPE), v), Activation::LeakyRelu(SLOPE).apply_scalar(v));
    }
}
