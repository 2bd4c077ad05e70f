//! Synthetic feature world and seen/unseen splits.
//!
//! A world has class and object concepts with unit-norm embeddings. Each
//! class has a prototype feature `tanh(M c + b)` under a fixed random affine
//! map, and samples are isotropic Gaussians around the prototype. Because
//! prototypes are a smooth function of embeddings, a generator trained on
//! seen classes can extrapolate to unseen ones.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{cosine, Array};
use crate::io::{self, FormatError, Record, EMBEDDING_MAGIC, FEATURE_MAGIC};
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate world spec: {0}")]
    Degenerate(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("split fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("need at least 2 classes to split, world has {0}")]
    TooFewClasses(usize),
    #[error("class {class:?} has {count} samples, at least {min} required")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },
    #[error("the gzsl protocol needs at least one unseen class")]
    NoUnseen,
    #[error("could not separate prototypes after {0} attempts")]
    Separation(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Zsl,
    Gzsl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_objects: usize,
    pub d_x: usize,
    pub d_c: usize,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
    /// Standard deviation of the entries of the prototype map.
    pub map_gain: f64,
    /// Objects linked to each class in the knowledge graph.
    pub class_object_edges: usize,
    /// Other classes linked to each class.
    pub class_class_edges: usize,
    /// Other objects linked to each object.
    pub object_object_edges: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_seen: 10,
            n_unseen: 5,
            n_objects: 20,
            d_x: 64,
            d_c: 16,
            noise_sigma: 0.3,
            samples_per_class: 200,
            map_gain: 1.0,
            class_object_edges: 4,
            class_class_edges: 2,
            object_object_edges: 2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub role: Role,
    /// `1×d_c`, unit norm.
    pub embedding: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedEmbedding {
    pub name: String,
    pub embedding: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub label: String,
}

/// A weighted undirected knowledge-graph edge between named nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub classes: Vec<ClassSpec>,
    pub objects: Vec<NamedEmbedding>,
    /// `d_x×d_c`.
    pub map_weight: Array,
    /// `1×d_x`.
    pub map_bias: Array,
    pub noise_sigma: f64,
}

const SEPARATION_RETRIES: usize = 32;

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return Array::row(v.into_iter().map(|x| x / n).collect());
        }
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld, DataError> {
    if spec.n_seen + spec.n_unseen == 0 {
        return Err(DataError::Degenerate("no classes".into()));
    }
    if spec.n_objects == 0 {
        return Err(DataError::Degenerate("no objects".into()));
    }
    if spec.d_x < 2 || spec.d_c < 2 {
        return Err(DataError::Degenerate(format!(
            "d_x={} d_c={} (both must be >= 2)",
            spec.d_x, spec.d_c
        )));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(DataError::Degenerate(format!("noise_sigma={}", spec.noise_sigma)));
    }
    for attempt in 0..SEPARATION_RETRIES {
        let world = generate_attempt(spec, attempt);
        if world.min_prototype_distance() > 4.0 * spec.noise_sigma {
            return Ok(world);
        }
        log::debug!("world attempt {attempt} rejected: prototypes too close");
    }
    Err(DataError::Separation(SEPARATION_RETRIES))
}

fn generate_attempt(spec: &WorldSpec, attempt: usize) -> SyntheticWorld {
    let mut rng = rng::stream(spec.seed, &format!("world/{attempt}"));
    let n_classes = spec.n_seen + spec.n_unseen;
    let classes = (0..n_classes)
        .map(|i| ClassSpec {
            name: format!("class_{i:03}"),
            role: if i < spec.n_seen { Role::Seen } else { Role::Unseen },
            embedding: unit_vector(spec.d_c, &mut rng),
        })
        .collect();
    let objects = (0..spec.n_objects)
        .map(|i| NamedEmbedding {
            name: format!("object_{i:03}"),
            embedding: unit_vector(spec.d_c, &mut rng),
        })
        .collect();
    let map_weight = Array::matrix(
        spec.d_x,
        spec.d_c,
        (0..spec.d_x * spec.d_c)
            .map(|_| spec.map_gain * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("sized");
    let map_bias = Array::row(
        (0..spec.d_x)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    SyntheticWorld {
        spec: spec.clone(),
        classes,
        objects,
        map_weight,
        map_bias,
        noise_sigma: spec.noise_sigma,
    }
}

impl SyntheticWorld {
    pub fn d_x(&self) -> usize {
        self.spec.d_x
    }

    pub fn d_c(&self) -> usize {
        self.spec.d_c
    }

    pub fn class(&self, name: &str) -> Result<&ClassSpec, DataError> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownClass(name.to_owned()))
    }

    pub fn class_index(&self, name: &str) -> Result<usize, DataError> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownClass(name.to_owned()))
    }

    /// Embedding of a class or object.
    pub fn embedding(&self, name: &str) -> Result<&Array, DataError> {
        if let Ok(c) = self.class(name) {
            return Ok(&c.embedding);
        }
        self.objects
            .iter()
            .find(|o| o.name == name)
            .map(|o| &o.embedding)
            .ok_or_else(|| DataError::UnknownClass(name.to_owned()))
    }

    /// Image of an embedding under the prototype map.
    pub fn map_embedding(&self, embedding: &[f64]) -> Vec<f64> {
        let d_c = self.d_c();
        (0..self.d_x())
            .map(|i| {
                let row = &self.map_weight.data()[i * d_c..(i + 1) * d_c];
                let z: f64 = row.iter().zip(embedding).map(|(w, c)| w * c).sum::<f64>()
                    + self.map_bias.data()[i];
                z.tanh()
            })
            .collect()
    }

    pub fn prototype(&self, class: &str) -> Result<Vec<f64>, DataError> {
        Ok(self.map_embedding(self.class(class)?.embedding.data()))
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let protos: Vec<Vec<f64>> = self
            .classes
            .iter()
            .map(|c| self.map_embedding(c.embedding.data()))
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let d = protos[i]
                    .iter()
                    .zip(&protos[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// The partition declared by each class's role.
    pub fn role_partition(&self) -> ClassPartition {
        let pick = |r: Role| {
            self.classes
                .iter()
                .filter(|c| c.role == r)
                .map(|c| c.name.clone())
                .collect()
        };
        ClassPartition {
            seen: pick(Role::Seen),
            unseen: pick(Role::Unseen),
        }
    }

    /// Knowledge-graph edges: each class links to its most similar objects and
    /// classes, each object to its most similar objects. Weights are cosine
    /// similarities mapped to `[0, 1]`.
    pub fn edge_list(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        let top = |emb: &Array, pool: &[(&str, &Array)], k: usize, skip: &str| -> Vec<(String, f64)> {
            let mut scored: Vec<(usize, f64)> = pool
                .iter()
                .enumerate()
                .filter(|(_, (n, _))| *n != skip)
                .map(|(i, (_, e))| (i, cosine(emb.data(), e.data())))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored
                .into_iter()
                .take(k)
                .map(|(i, c)| (pool[i].0.to_owned(), 0.5 * (1.0 + c)))
                .collect()
        };
        let class_pool: Vec<(&str, &Array)> =
            self.classes.iter().map(|c| (c.name.as_str(), &c.embedding)).collect();
        let object_pool: Vec<(&str, &Array)> =
            self.objects.iter().map(|o| (o.name.as_str(), &o.embedding)).collect();
        for c in &self.classes {
            for (o, w) in top(&c.embedding, &object_pool, self.spec.class_object_edges, "") {
                edges.push(Edge {
                    a: c.name.clone(),
                    b: o,
                    weight: w,
                });
            }
            for (o, w) in top(&c.embedding, &class_pool, self.spec.class_class_edges, &c.name) {
                edges.push(Edge {
                    a: c.name.clone(),
                    b: o,
                    weight: w,
                });
            }
        }
        for o in &self.objects {
            for (p, w) in top(&o.embedding, &object_pool, self.spec.object_object_edges, &o.name) {
                edges.push(Edge {
                    a: o.name.clone(),
                    b: p,
                    weight: w,
                });
            }
        }
        edges
    }
}

/// Draws `n` samples around a class prototype with spread `noise_sigma`.
pub fn sample_features<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    class: &str,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>, DataError> {
    let proto = world.prototype(class)?;
    let sigma = world.noise_sigma;
    Ok((0..n)
        .map(|_| Sample {
            feature: proto
                .iter()
                .map(|&p| {
                    if sigma == 0.0 {
                        p
                    } else {
                        p + sigma * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect(),
            label: class.to_owned(),
        })
        .collect())
}

/// Seen and unseen class names, each in world order. Graph node order and
/// classifier row order follow `seen ++ unseen`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl ClassPartition {
    pub fn class_names(&self) -> Vec<String> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.seen
            .iter()
            .chain(&self.unseen)
            .position(|c| c == label)
    }
}

/// Randomly assigns `ceil(fraction · n)` classes to the seen side, clamped so
/// both sides are non-empty.
pub fn random_partition(world: &SyntheticWorld, fraction: f64, seed: u64) -> Result<ClassPartition, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let n = world.classes.len();
    if n < 2 {
        return Err(DataError::TooFewClasses(n));
    }
    let n_seen = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "partition"));
    let seen_set: HashSet<usize> = idx[..n_seen].iter().copied().collect();
    let (mut seen, mut unseen) = (vec![], vec![]);
    for (i, c) in world.classes.iter().enumerate() {
        if seen_set.contains(&i) {
            seen.push(c.name.clone());
        } else {
            unseen.push(c.name.clone());
        }
    }
    Ok(ClassPartition { seen, unseen })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seen_labels: Vec<String>,
    pub unseen_labels: Vec<String>,
    pub protocol: Protocol,
}

impl DataSplit {
    pub fn partition(&self) -> ClassPartition {
        ClassPartition {
            seen: self.seen_labels.clone(),
            unseen: self.unseen_labels.clone(),
        }
    }
}

/// Every class's sample pool for a seed, ordered `seen ++ unseen`. Each class
/// draws from its own stream, so pools do not depend on the partition.
pub fn draw_pool(
    world: &SyntheticWorld,
    partition: &ClassPartition,
    seed: u64,
) -> Result<Vec<Vec<Sample>>, DataError> {
    partition
        .class_names()
        .iter()
        .map(|c| {
            let mut r = rng::stream(seed, &format!("samples/{c}"));
            sample_features(world, c, world.spec.samples_per_class, &mut r)
        })
        .collect()
}

/// Train on every sample of the seen classes, test on every unseen sample.
pub fn split_zsl_with(
    world: &SyntheticWorld,
    partition: &ClassPartition,
    seed: u64,
) -> Result<DataSplit, DataError> {
    let pool = draw_pool(world, partition, seed)?;
    let n_seen = partition.seen.len();
    let mut train = vec![];
    let mut test = vec![];
    for (i, samples) in pool.into_iter().enumerate() {
        if i < n_seen {
            train.extend(samples);
        } else {
            test.extend(samples);
        }
    }
    Ok(DataSplit {
        train,
        test,
        seen_labels: partition.seen.clone(),
        unseen_labels: partition.unseen.clone(),
        protocol: Protocol::Zsl,
    })
}

pub const GZSL_MIN_SAMPLES: usize = 5;

/// Holds out a fifth of each seen class for testing; all unseen samples are
/// test samples.
pub fn split_gzsl_with(
    world: &SyntheticWorld,
    partition: &ClassPartition,
    seed: u64,
) -> Result<DataSplit, DataError> {
    if partition.unseen.is_empty() {
        return Err(DataError::NoUnseen);
    }
    let pool = draw_pool(world, partition, seed)?;
    let n_seen = partition.seen.len();
    let mut train = vec![];
    let mut test = vec![];
    for (i, mut samples) in pool.into_iter().enumerate() {
        if i < n_seen {
            let class = &partition.seen[i];
            if samples.len() < GZSL_MIN_SAMPLES {
                return Err(DataError::ClassTooSmall {
                    class: class.clone(),
                    count: samples.len(),
                    min: GZSL_MIN_SAMPLES,
                });
            }
            samples.shuffle(&mut rng::stream(seed, &format!("holdout/{class}")));
            let held = gzsl_holdout_count(samples.len());
            let rest = samples.split_off(held);
            test.extend(samples);
            train.extend(rest);
        } else {
            test.extend(samples);
        }
    }
    Ok(DataSplit {
        train,
        test,
        seen_labels: partition.seen.clone(),
        unseen_labels: partition.unseen.clone(),
        protocol: Protocol::Gzsl,
    })
}

/// Seen-class samples held out under gzsl: 20%, rounded down.
pub fn gzsl_holdout_count(n: usize) -> usize {
    n / 5
}

pub fn split_zsl(world: &SyntheticWorld, fraction: f64, seed: u64) -> Result<DataSplit, DataError> {
    let p = random_partition(world, fraction, seed)?;
    split_zsl_with(world, &p, seed)
}

/// Uses the world's declared roles.
pub fn split_gzsl(world: &SyntheticWorld, seed: u64) -> Result<DataSplit, DataError> {
    split_gzsl_with(world, &world.role_partition(), seed)
}

pub fn split(
    world: &SyntheticWorld,
    partition: &ClassPartition,
    protocol: Protocol,
    seed: u64,
) -> Result<DataSplit, DataError> {
    match protocol {
        Protocol::Zsl => split_zsl_with(world, partition, seed),
        Protocol::Gzsl => split_gzsl_with(world, partition, seed),
    }
}

/// Stacks sample features into an `n×d` array.
pub fn features_matrix(samples: &[&Sample], d: usize) -> Array {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.feature.as_slice()).collect();
    Array::from_rows(&rows, d).expect("uniform sample width")
}

fn to_records<'a>(items: impl Iterator<Item = (&'a str, &'a [f64])>) -> Vec<Record> {
    items
        .map(|(label, v)| Record {
            label: label.to_owned(),
            values: v.iter().map(|&x| x as f32).collect(),
        })
        .collect()
}

pub fn encode_features(d_x: usize, samples: &[Sample]) -> Result<Vec<u8>, DataError> {
    let recs = to_records(samples.iter().map(|s| (s.label.as_str(), s.feature.as_slice())));
    Ok(io::encode_records(FEATURE_MAGIC, d_x, &recs)?)
}

pub fn save_features(path: &Path, d_x: usize, samples: &[Sample]) -> Result<(), DataError> {
    Ok(io::write_atomic(path, &encode_features(d_x, samples)?)?)
}

/// Returns `(d_x, samples)`; features are widened from 32-bit.
pub fn load_features(path: &Path) -> Result<(usize, Vec<Sample>), DataError> {
    let bytes = io::read_file(path)?;
    let (dim, recs) = io::decode_records(FEATURE_MAGIC, &bytes)?;
    Ok((
        dim,
        recs.into_iter()
            .map(|r| Sample {
                feature: r.values.into_iter().map(f64::from).collect(),
                label: r.label,
            })
            .collect(),
    ))
}

pub fn save_embeddings(path: &Path, d_c: usize, items: &[NamedEmbedding]) -> Result<(), DataError> {
    let recs = to_records(items.iter().map(|e| (e.name.as_str(), e.embedding.data())));
    Ok(io::write_atomic(
        path,
        &io::encode_records(EMBEDDING_MAGIC, d_c, &recs)?,
    )?)
}

pub fn load_embeddings(path: &Path) -> Result<(usize, Vec<NamedEmbedding>), DataError> {
    let bytes = io::read_file(path)?;
    let (dim, recs) = io::decode_records(EMBEDDING_MAGIC, &bytes)?;
    Ok((
        dim,
        recs.into_iter()
            .map(|r| NamedEmbedding {
                name: r.label,
                embedding: Array::row(r.values.into_iter().map(f64::from).collect()),
            })
            .collect(),
    ))
}
