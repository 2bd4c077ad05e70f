//! Graph-convolutional classifier generator.
//!
//! `H⁰` is the node embedding matrix and each layer computes
//! `Hˡ = act(P Hˡ⁻¹ Φˡ⁻¹)` with `P = D^{-1/2}(A + I)D^{-1/2}`. The last layer
//! is linear and `W = Hᴸ` holds one classifier row per node. Only class
//! rows are scored; object rows shape the others through propagation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{dot, Array};
use crate::autodiff::{AutodiffError, ExprGraph, NodeId};
use crate::datagen::Sample;
use crate::kgraph::{self, GraphError, KnowledgeGraph};
use crate::nn::{init_xavier, shuffled_batches, AdamConfig, AdamState, NnError};
use crate::rng;

#[derive(Debug, Error)]
pub enum GcnError {
    #[error("layer {layer} expects {expected} input channels, got {actual}")]
    DimensionChain { layer: usize, expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no real seen samples to train on")]
    NoTrainingData,
    #[error("label {label} is not a class index (< {n_classes})")]
    BadLabel { label: usize, n_classes: usize },
    #[error("label {0:?} is not a class node")]
    UnknownLabel(String),
    #[error("empty candidate set")]
    NoCandidates,
    #[error("feature width {actual} does not match classifier width {expected}")]
    Width { expected: usize, actual: usize },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `Φˡ` has shape `k_l × k_{l+1}`.
    pub phi: Vec<Array>,
    pub leaky_slope: f64,
}

impl GcnParams {
    /// `dims` is the channel chain `k_0, …, k_L`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], leaky_slope: f64, rng: &mut R) -> Self {
        let phi = dims
            .windows(2)
            .map(|w| init_xavier(&[w[0], w[1]], rng).expect("rank 2"))
            .collect();
        Self { phi, leaky_slope }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.phi.iter().map(|p| p.rows()).collect();
        if let Some(last) = self.phi.last() {
            d.push(last.cols());
        }
        d
    }

    pub fn check_chain(&self, k_0: usize) -> Result<(), GcnError> {
        let mut k = k_0;
        for (layer, p) in self.phi.iter().enumerate() {
            if p.rows() != k {
                return Err(GcnError::DimensionChain {
                    layer,
                    expected: k,
                    actual: p.rows(),
                });
            }
            k = p.cols();
        }
        Ok(())
    }
}

/// `W` expression from bound propagation, embeddings and layer weights.
pub fn gcn_forward_expr(
    g: &mut ExprGraph,
    propagation: NodeId,
    embeddings: NodeId,
    phi: &[NodeId],
    leaky_slope: f64,
) -> Result<NodeId, GcnError> {
    let mut h = embeddings;
    for (l, &p) in phi.iter().enumerate() {
        let ph = g.matmul(propagation, h)?;
        h = g.matmul(ph, p)?;
        if l + 1 < phi.len() {
            h = g.leaky_relu(h, leaky_slope)?;
        }
    }
    Ok(h)
}

/// Classifier rows for every node, shape `N × k_L`.
pub fn gcn_forward(graph: &KnowledgeGraph, params: &GcnParams) -> Result<Array, GcnError> {
    params.check_chain(graph.node_embeddings.cols())?;
    let p = graph.propagation_matrix()?;
    let mut h = graph.node_embeddings.clone();
    for (l, phi) in params.phi.iter().enumerate() {
        h = p.matmul(&h).and_then(|ph| ph.matmul(phi)).expect("chain checked");
        if l + 1 < params.phi.len() {
            let s = params.leaky_slope;
            h = h.map(|v| if v > 0.0 { v } else { s * v });
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub features: Array,
    pub labels: Vec<usize>,
}

/// Mean negative log-likelihood of the labels under a softmax over the first
/// `n_classes` rows of `w` scored against each feature.
pub fn cross_entropy(
    g: &mut ExprGraph,
    w: NodeId,
    n_classes: usize,
    batch: &TrainBatch,
) -> Result<NodeId, GcnError> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(GcnError::EmptyBatch);
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= n_classes) {
        return Err(GcnError::BadLabel { label, n_classes });
    }
    let mut one_hot = Array::zeros(&[n, n_classes]);
    for (i, &l) in batch.labels.iter().enumerate() {
        one_hot.set(i, l, 1.0);
    }
    let classes = g.slice(w, 0, 0, n_classes)?;
    let wt = g.transpose(classes)?;
    let x = g.constant(batch.features.clone())?;
    let scores = g.matmul(x, wt)?;
    let lse = g.row_logsumexp(scores)?;
    let y = g.constant(one_hot)?;
    let picked = g.mul(scores, y)?;
    let target = g.sum_axis(picked, 1)?;
    let nll = g.sub(lse, target)?;
    Ok(g.mean(nll)?)
}

/// `weight · Σ_i ‖w_i‖²` over every row.
pub fn l2_penalty(g: &mut ExprGraph, w: NodeId, weight: f64) -> Result<NodeId, GcnError> {
    let sq = g.square(w)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, weight)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    /// Interior channel widths; defaults to `[2·d_x, d_x]`. The input width
    /// is `d_c` and the output width is always `d_x`.
    pub hidden: Option<Vec<usize>>,
    pub k: usize,
    /// Refresh the attention adjacency after every this many epochs; 0 never.
    pub refresh_every: usize,
    pub l2_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub leaky_slope: f64,
    pub adam: AdamConfig,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            k: 8,
            refresh_every: 1,
            l2_weight: 5e-4,
            epochs: 40,
            batch_size: 128,
            leaky_slope: crate::nn::DEFAULT_LEAKY_SLOPE,
            adam: AdamConfig::gcn(),
        }
    }
}

impl GcnConfig {
    pub fn dims(&self, d_c: usize, d_x: usize) -> Vec<usize> {
        let hidden = self.hidden.clone().unwrap_or_else(|| vec![2 * d_x, d_x]);
        std::iter::once(d_c).chain(hidden).chain(std::iter::once(d_x)).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("gcn.k must be >= 1".into());
        }
        if !(self.l2_weight >= 0.0) {
            return Err(format!("gcn.l2_weight must be >= 0, got {}", self.l2_weight));
        }
        if self.batch_size == 0 {
            return Err("gcn.batch_size must be >= 1".into());
        }
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err("gcn.hidden widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn init_params(&self, d_c: usize, d_x: usize, seed: u64) -> GcnParams {
        GcnParams::init(&self.dims(d_c, d_x), self.leaky_slope, &mut rng::stream(seed, "gcn/init"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub l2: f64,
    pub total: f64,
    pub adjacency_delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GcnHistory {
    pub epochs: Vec<GcnEpoch>,
}

impl GcnHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,ce,l2,total,adjacency_delta\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.ce, e.l2, e.total, e.adjacency_delta));
        }
        s
    }
}

fn labelled(graph: &KnowledgeGraph, samples: &[Sample]) -> Result<Vec<(usize, usize)>, GcnError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| match graph.index_of(&s.label) {
            Some(c) if c < graph.n_classes() => Ok((i, c)),
            _ => Err(GcnError::UnknownLabel(s.label.clone())),
        })
        .collect()
}

/// Trains `Φ` by Adam on minibatches of the real seen and synthesized unseen
/// samples pooled together. The attention adjacency is rebuilt from the
/// current classifiers at the end of every `refresh_every`-th epoch.
pub fn train_gcn(
    graph: &mut KnowledgeGraph,
    mut params: GcnParams,
    real_seen: &[Sample],
    synth_unseen: &[Sample],
    config: &GcnConfig,
    seed: u64,
) -> Result<(GcnParams, GcnHistory), GcnError> {
    if real_seen.is_empty() {
        return Err(GcnError::NoTrainingData);
    }
    params.check_chain(graph.node_embeddings.cols())?;
    let d_x = params.dims().last().copied().unwrap_or(0);
    let pool: Vec<&Sample> = real_seen.iter().chain(synth_unseen).collect();
    if let Some(s) = pool.iter().find(|s| s.feature.len() != d_x) {
        return Err(GcnError::Width {
            expected: d_x,
            actual: s.feature.len(),
        });
    }
    let labels: Vec<usize> = labelled(graph, real_seen)?
        .into_iter()
        .chain(labelled(graph, synth_unseen)?)
        .map(|(_, c)| c)
        .collect();
    let mut adam = AdamState::new(config.adam, &params.phi.iter().collect::<Vec<_>>());
    let mut r = rng::stream(seed, "gcn/train");
    let mut history = GcnHistory::default();
    let n_classes = graph.n_classes();

    for epoch in 1..=config.epochs {
        let propagation = graph.propagation_matrix()?;
        let (mut ce_sum, mut l2_sum, mut steps) = (0.0, 0.0, 0usize);
        for idx in shuffled_batches(pool.len(), config.batch_size, &mut r) {
            let batch_samples: Vec<&Sample> = idx.iter().map(|&i| pool[i]).collect();
            let batch = TrainBatch {
                features: crate::datagen::features_matrix(&batch_samples, d_x),
                labels: idx.iter().map(|&i| labels[i]).collect(),
            };
            let mut g = ExprGraph::new();
            let p = g.constant(propagation.clone())?;
            let h0 = g.constant(graph.node_embeddings.clone())?;
            let phi = params
                .phi
                .iter()
                .map(|a| g.constant(a.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let w = gcn_forward_expr(&mut g, p, h0, &phi, params.leaky_slope)?;
            let ce = cross_entropy(&mut g, w, n_classes, &batch)?;
            let l2 = l2_penalty(&mut g, w, config.l2_weight)?;
            let total = g.add(ce, l2)?;
            let grads = g.gradient_values(total, &phi).map_err(|e| divergence(epoch, e.into()))?;
            ce_sum += g.eval_scalar(ce)?;
            l2_sum += g.eval_scalar(l2)?;
            steps += 1;
            adam.step(&mut params.phi.iter_mut().collect::<Vec<_>>(), &grads)
                .map_err(|e| divergence(epoch, e.into()))?;
        }
        let ce = ce_sum / steps as f64;
        let l2 = l2_sum / steps as f64;
        if !(ce + l2).is_finite() {
            return Err(GcnError::Divergence {
                epoch,
                detail: format!("loss = {}", ce + l2),
            });
        }
        let mut adjacency_delta = 0.0;
        if config.refresh_every > 0 && epoch % config.refresh_every == 0 {
            let w = gcn_forward(graph, &params)?;
            if !w.is_finite() {
                return Err(GcnError::Divergence {
                    epoch,
                    detail: "non-finite classifier rows".into(),
                });
            }
            adjacency_delta = kgraph::refresh_adjacency(graph, &w, config.k)?;
        }
        log::debug!("gcn epoch {epoch}: ce {ce:.4} l2 {l2:.4} delta {adjacency_delta:.4}");
        history.epochs.push(GcnEpoch {
            epoch,
            ce,
            l2,
            total: ce + l2,
            adjacency_delta,
        });
    }
    Ok((params, history))
}

fn divergence(epoch: usize, e: GcnError) -> GcnError {
    match e {
        GcnError::Autodiff(AutodiffError::NonFinite { node, op }) => GcnError::Divergence {
            epoch,
            detail: format!("non-finite {op} at node {node}"),
        },
        GcnError::Nn(NnError::NonFiniteGradient(i)) => GcnError::Divergence {
            epoch,
            detail: format!("non-finite gradient for parameter {i}"),
        },
        other => other,
    }
}

/// Candidate with the largest `w_c · feature`; ties go to the earlier index.
pub fn predict(w: &Array, feature: &[f64], candidates: &[usize]) -> Result<usize, GcnError> {
    if w.cols() != feature.len() {
        return Err(GcnError::Width {
            expected: w.cols(),
            actual: feature.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        if c >= w.rows() {
            return Err(GcnError::BadLabel {
                label: c,
                n_classes: w.rows(),
            });
        }
        let s = dot(w.row_slice(c), feature);
        match best {
            Some((bc, bs)) if s < bs || (s == bs && bc < c) => {}
            _ => best = Some((c, s)),
        }
    }
    best.map(|(c, _)| c).ok_or(GcnError::NoCandidates)
}
