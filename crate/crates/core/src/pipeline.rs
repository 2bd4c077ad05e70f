//! Two-stage orchestration: data, feature generator, synthesis, classifier
//! generation, scoring.
//!
//! Every stage hands its successor exactly what the on-disk formats can hold
//! (32-bit floats), so running the stages one command at a time through
//! files reproduces the in-memory pipeline bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::Array;
use crate::checkpoint::{self, Checkpoint};
use crate::config::PipelineConfig;
use crate::datagen::{
    self, ClassPartition, DataError, DataSplit, Edge, NamedEmbedding, Protocol, Sample,
};
use crate::eval::{Classifier, EvalError, Mode, SplitMetrics};
use crate::gcnattn::{self, GcnError, GcnHistory, GcnParams};
use crate::genfeat::{self, Embeddings, GanError, GanHistory, GanNets};
use crate::io::{self, FormatError};
use crate::kgraph::{self, GraphError, GraphNode, KnowledgeGraph};
use crate::rng;

pub const FEATURES_TRAIN: &str = "features_train.fgft";
pub const FEATURES_TEST: &str = "features_test.fgft";
pub const EMBEDDINGS: &str = "embeddings.fgem";
pub const VOCAB: &str = "vocab.txt";
pub const EDGES: &str = "edges.tsv";
pub const SPLIT: &str = "split.json";
pub const GAN_CHECKPOINT: &str = "gan.fgck";
pub const GAN_HISTORY: &str = "gan_history.csv";
pub const SYNTH: &str = "synth.fgft";
pub const GCN_CHECKPOINT: &str = "gcn.fgck";
pub const GCN_HISTORY: &str = "gcn_history.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("file: {0}")]
    Format(#[from] FormatError),
    #[error("train-gan: {0}")]
    Gan(#[from] GanError),
    #[error("train-gcn: {0}")]
    Gcn(#[from] GcnError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// 2 for configuration errors, 3 for data and file errors, 4 for
    /// numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Gan(GanError::Divergence { .. }) | PipelineError::Gcn(GcnError::Divergence { .. }) => 4,
            PipelineError::Eval(EvalError::Gcn(GcnError::Divergence { .. })) => 4,
            _ => 3,
        }
    }
}

pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_samples(samples: &mut [Sample]) {
    for s in samples {
        s.feature.iter_mut().for_each(|v| *v = quantize(*v));
    }
}

/// Everything the classifier stages need, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub split: DataSplit,
    /// Graph order: seen classes, unseen classes, then objects.
    pub nodes: Vec<NamedEmbedding>,
    pub edges: Vec<Edge>,
    pub d_x: usize,
    pub d_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    seed: u64,
    protocol: Protocol,
    seen: Vec<String>,
    unseen: Vec<String>,
    d_x: usize,
    d_c: usize,
}

impl Dataset {
    pub fn partition(&self) -> ClassPartition {
        self.split.partition()
    }

    pub fn n_classes(&self) -> usize {
        self.split.seen_labels.len() + self.split.unseen_labels.len()
    }

    pub fn graph(&self) -> Result<KnowledgeGraph, GraphError> {
        let nodes: Vec<GraphNode> = self
            .nodes
            .iter()
            .map(|n| GraphNode {
                name: &n.name,
                embedding: n.embedding.data(),
            })
            .collect();
        kgraph::build_graph(
            &nodes,
            self.split.seen_labels.len(),
            self.split.unseen_labels.len(),
            &self.edges,
        )
    }

    /// Word vectors of the class nodes.
    pub fn class_embeddings(&self) -> Embeddings {
        self.nodes[..self.n_classes()]
            .iter()
            .map(|n| (n.name.clone(), n.embedding.data().to_vec()))
            .collect()
    }

    pub fn embedding(&self, name: &str) -> Option<&[f64]> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.embedding.data())
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        datagen::save_features(&dir.join(FEATURES_TRAIN), self.d_x, &self.split.train)?;
        datagen::save_features(&dir.join(FEATURES_TEST), self.d_x, &self.split.test)?;
        datagen::save_embeddings(&dir.join(EMBEDDINGS), self.d_c, &self.nodes)?;
        let names: Vec<String> = self.nodes.iter().map(|n| n.name.clone()).collect();
        kgraph::save_vocab(&dir.join(VOCAB), &names)?;
        kgraph::save_edge_list(&dir.join(EDGES), &self.edges)?;
        let split = SplitFile {
            seed: self.seed,
            protocol: self.split.protocol,
            seen: self.split.seen_labels.clone(),
            unseen: self.split.unseen_labels.clone(),
            d_x: self.d_x,
            d_c: self.d_c,
        };
        let mut json = serde_json::to_string_pretty(&split).expect("plain data");
        json.push('\n');
        io::write_atomic(&dir.join(SPLIT), json.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let bad = |what: &str, detail: String| {
            PipelineError::Format(FormatError::Malformed {
                what: what.into(),
                detail,
            })
        };
        let text = String::from_utf8(io::read_file(&dir.join(SPLIT))?)
            .map_err(|_| bad(SPLIT, "not utf-8".into()))?;
        let split: SplitFile = serde_json::from_str(&text).map_err(|e| bad(SPLIT, e.to_string()))?;
        let (dx_train, train) = datagen::load_features(&dir.join(FEATURES_TRAIN))?;
        let (dx_test, test) = datagen::load_features(&dir.join(FEATURES_TEST))?;
        let (d_c, nodes) = datagen::load_embeddings(&dir.join(EMBEDDINGS))?;
        let vocab = kgraph::load_vocab(&dir.join(VOCAB))?;
        let edges = kgraph::load_edge_list(&dir.join(EDGES))?;
        for (what, d) in [(FEATURES_TRAIN, dx_train), (FEATURES_TEST, dx_test)] {
            if d != split.d_x && !(d == 0 && what == FEATURES_TEST) {
                return Err(bad(what, format!("width {d}, split says {}", split.d_x)));
            }
        }
        if d_c != split.d_c {
            return Err(bad(EMBEDDINGS, format!("width {d_c}, split says {}", split.d_c)));
        }
        let names: Vec<&str> = nodes.iter().map(|n| n.name.as_str()).collect();
        if names != vocab.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad(VOCAB, "node order differs from the embedding file".into()));
        }
        let classes: Vec<&str> = split.seen.iter().chain(&split.unseen).map(String::as_str).collect();
        if names.len() < classes.len() || names[..classes.len()] != classes[..] {
            return Err(bad(VOCAB, "class nodes must come first, seen then unseen".into()));
        }
        Ok(Self {
            seed: split.seed,
            split: DataSplit {
                train,
                test,
                seen_labels: split.seen,
                unseen_labels: split.unseen,
                protocol: split.protocol,
            },
            nodes,
            edges,
            d_x: split.d_x,
            d_c: split.d_c,
        })
    }
}

/// Builds the world, partitions it and draws the split for `seed`.
pub fn generate_dataset(config: &PipelineConfig, seed: u64) -> Result<Dataset, PipelineError> {
    config.validate()?;
    let world = datagen::generate_world(&config.world)?;
    let partition = match config.eval.seen_fraction {
        None => world.role_partition(),
        Some(f) => datagen::random_partition(&world, f, seed)?,
    };
    let mut split = datagen::split(&world, &partition, config.eval.protocol, seed)?;
    quantize_samples(&mut split.train);
    quantize_samples(&mut split.test);
    let q = |a: &Array| a.map(quantize);
    let mut nodes = vec![];
    for name in partition.class_names() {
        nodes.push(NamedEmbedding {
            embedding: q(world.embedding(&name)?),
            name,
        });
    }
    for o in &world.objects {
        nodes.push(NamedEmbedding {
            name: o.name.clone(),
            embedding: q(&o.embedding),
        });
    }
    Ok(Dataset {
        seed,
        split,
        nodes,
        edges: world.edge_list(),
        d_x: world.d_x(),
        d_c: world.d_c(),
    })
}

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    rng::derive_seed(seed, stage)
}

/// Trains the feature generator; `None` in `no-fg`. `wgan-only` drops the
/// cycle term. Weights come back rounded to checkpoint precision.
pub fn stage_gan(
    config: &PipelineConfig,
    data: &Dataset,
    mode: Mode,
) -> Result<Option<(GanNets, GanHistory)>, PipelineError> {
    if mode == Mode::NoFg {
        return Ok(None);
    }
    let mut gan = config.gan.clone();
    if mode == Mode::WganOnly {
        gan.beta_cyc = 0.0;
    }
    let (nets, history) = genfeat::train_gan(
        &gan,
        &data.split.train,
        &data.class_embeddings(),
        data.d_x,
        data.d_c,
        stage_seed(data.seed, "gan"),
    )?;
    let ck = checkpoint::gan_checkpoint(&nets, gan.leaky_slope);
    let nets = checkpoint::gan_from_checkpoint(&Checkpoint::decode(&ck.encode()?)?)?;
    Ok(Some((nets, history)))
}

/// Mean per-class count of the seen training samples, rounded.
pub fn default_synth_per_class(data: &Dataset) -> usize {
    let n_seen = data.split.seen_labels.len().max(1);
    (data.split.train.len() as f64 / n_seen as f64).round() as usize
}

/// Synthesized features for each unseen class, `n_per_class` each.
pub fn stage_synth(data: &Dataset, nets: &GanNets, n_per_class: usize) -> Result<Vec<Sample>, PipelineError> {
    let mut out = vec![];
    for label in &data.split.unseen_labels {
        let emb = data
            .embedding(label)
            .ok_or_else(|| GanError::MissingEmbedding(label.clone()))?;
        let mut r = rng::stream(stage_seed(data.seed, "synth"), label);
        out.extend(genfeat::synthesize_features(&nets.generator, nets.d_z, label, emb, n_per_class, &mut r)?);
    }
    quantize_samples(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierStage {
    pub classifier: Classifier,
    /// The checkpoint the classifier was read back from.
    pub checkpoint: Checkpoint,
    /// Present for modes that train the graph network.
    pub gcn: Option<(GcnParams, GcnHistory, KnowledgeGraph)>,
}

fn class_means(samples: &[Sample], labels: &[String], d_x: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
    labels
        .iter()
        .map(|l| {
            let rows: Vec<&Sample> = samples.iter().filter(|s| &s.label == l).collect();
            if rows.is_empty() {
                return Err(PipelineError::Config(format!(
                    "class {l:?} has no samples to average (is synth_per_class 0?)"
                )));
            }
            let mut m = vec![0.0; d_x];
            for s in &rows {
                m.iter_mut().zip(&s.feature).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|v| *v /= rows.len() as f64);
            Ok(m)
        })
        .collect()
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<Classifier, FormatError> {
    match ck.stage() {
        Some("proto") => Ok(Classifier::NearestPrototype(ck.require("proto.means")?.clone())),
        _ => Ok(Classifier::Linear(ck.require("gcn.classifiers")?.clone())),
    }
}

/// Trains the graph network (or, in `wgan-only`, averages prototypes) on the
/// real seen and synthesized unseen samples.
pub fn stage_classifier(
    config: &PipelineConfig,
    data: &Dataset,
    synth: &[Sample],
    mode: Mode,
) -> Result<ClassifierStage, PipelineError> {
    let (ck, gcn) = if mode == Mode::WganOnly {
        let mut means = class_means(&data.split.train, &data.split.seen_labels, data.d_x)?;
        means.extend(class_means(synth, &data.split.unseen_labels, data.d_x)?);
        let mut ck = Checkpoint::default();
        ck.push("proto.means", Array::from_rows(&means, data.d_x).expect("uniform rows"));
        (ck, None)
    } else {
        let mut gcn_cfg = config.gcn.clone();
        if mode == Mode::NoAt {
            gcn_cfg.refresh_every = 0;
        }
        let synth = if mode == Mode::NoFg { &[][..] } else { synth };
        let mut graph = data.graph()?;
        let seed = stage_seed(data.seed, "gcn");
        let params = gcn_cfg.init_params(data.d_c, data.d_x, seed);
        let (params, history) = gcnattn::train_gcn(&mut graph, params, &data.split.train, synth, &gcn_cfg, seed)?;
        let w = gcnattn::gcn_forward(&graph, &params)?;
        let ck = checkpoint::gcn_checkpoint(&params, &graph.adjacency, &w);
        (ck, Some((params, history, graph)))
    };
    let ck = Checkpoint::decode(&ck.encode()?)?;
    let gcn = match gcn {
        Some((_, history, mut graph)) => {
            let (params, adjacency, _) = checkpoint::gcn_from_checkpoint(&ck)?;
            graph.adjacency = adjacency;
            Some((params, history, graph))
        }
        None => None,
    };
    Ok(ClassifierStage {
        classifier: classifier_from_checkpoint(&ck)?,
        checkpoint: ck,
        gcn,
    })
}

#[derive(Debug, Clone)]
pub struct SplitRun {
    pub data: Dataset,
    pub gan: Option<(GanNets, GanHistory)>,
    pub synth: Vec<Sample>,
    pub classifier: ClassifierStage,
    pub metrics: SplitMetrics,
}

impl SplitRun {
    pub fn gan_checkpoint(&self, config: &PipelineConfig) -> Option<Checkpoint> {
        self.gan
            .as_ref()
            .map(|(nets, _)| checkpoint::gan_checkpoint(nets, config.gan.leaky_slope))
    }

    /// Writes every stage file into `dir`.
    pub fn save(&self, config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        self.data.save(dir)?;
        if let (Some(ck), Some((_, history))) = (self.gan_checkpoint(config), &self.gan) {
            ck.save(&dir.join(GAN_CHECKPOINT))?;
            io::write_atomic(&dir.join(GAN_HISTORY), history.to_csv().as_bytes())?;
        }
        datagen::save_features(&dir.join(SYNTH), self.data.d_x, &self.synth)?;
        self.classifier.checkpoint.save(&dir.join(GCN_CHECKPOINT))?;
        if let Some((_, history, _)) = &self.classifier.gcn {
            io::write_atomic(&dir.join(GCN_HISTORY), history.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// One complete run of `config.eval.mode` on the split drawn from `seed`.
pub fn run_split(config: &PipelineConfig, seed: u64) -> Result<SplitRun, PipelineError> {
    let data = generate_dataset(config, seed)?;
    let gan = stage_gan(config, &data, config.eval.mode)?;
    finish_split(config, data, gan)
}

/// The stages after generator training, for `config.eval.mode`.
pub fn finish_split(
    config: &PipelineConfig,
    data: Dataset,
    gan: Option<(GanNets, GanHistory)>,
) -> Result<SplitRun, PipelineError> {
    let mode = config.eval.mode;
    let seed = data.seed;
    let n_per_class = config.eval.synth_per_class.unwrap_or_else(|| default_synth_per_class(&data));
    let synth = match &gan {
        Some((nets, _)) => stage_synth(&data, nets, n_per_class)?,
        None => vec![],
    };
    let classifier = stage_classifier(config, &data, &synth, mode)?;
    let metrics = SplitMetrics::evaluate(&classifier.classifier, &data.split, seed)?;
    Ok(SplitRun {
        data,
        gan,
        synth,
        classifier,
        metrics,
    })
}
