//! Conditional WGAN-GP feature generator with a cycle-consistency decoder.
//!
//! The generator maps `[z, c(y)]` to a feature, the critic scores
//! `[x, c(y)]` with an unbounded real, and the decoder maps a feature back to
//! its word vector. The critic maximizes
//!
//! ```text
//! E[D(x,c)] − E[D(x̃,c)] − λ E[(‖∇_x̂ D(x̂,c)‖₂ − 1)²]
//! ```
//!
//! and the generator and decoder together minimize
//! `−E[D(x̃,c)] + β E‖ĉ − c‖₂`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::Array;
use crate::autodiff::{AutodiffError, ExprGraph, NodeId};
use crate::datagen::Sample;
use crate::nn::{shuffled_batches, Activation, AdamConfig, AdamState, BoundMlp, Mlp, NnError};
use crate::rng;

pub type Embeddings = HashMap<String, Vec<f64>>;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("no embedding for label {0:?}")]
    MissingEmbedding(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Noise width; defaults to the embedding width.
    pub d_z: Option<usize>,
    pub lambda_gp: f64,
    pub beta_cyc: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hidden widths; each defaults to `hidden_ratio · d_x`.
    pub hidden_g: Option<usize>,
    pub hidden_d: Option<usize>,
    pub hidden_dec: Option<usize>,
    pub hidden_ratio: usize,
    pub leaky_slope: f64,
    pub adam: AdamConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            d_z: None,
            lambda_gp: 10.0,
            beta_cyc: 0.01,
            n_critic: 5,
            batch_size: 64,
            epochs: 10,
            hidden_g: None,
            hidden_d: None,
            hidden_dec: None,
            hidden_ratio: 8,
            leaky_slope: crate::nn::DEFAULT_LEAKY_SLOPE,
            adam: AdamConfig::gan(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_gp >= 0.0) {
            return Err(format!("lambda_gp must be >= 0, got {}", self.lambda_gp));
        }
        if !(self.beta_cyc >= 0.0) {
            return Err(format!("beta_cyc must be >= 0, got {}", self.beta_cyc));
        }
        if self.n_critic == 0 {
            return Err("n_critic must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanNets {
    pub generator: Mlp,
    pub critic: Mlp,
    pub decoder: Mlp,
    pub d_z: usize,
    pub d_c: usize,
    pub d_x: usize,
}

impl GanNets {
    pub fn init(config: &GanConfig, d_x: usize, d_c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "gan/init");
        let d_z = config.d_z.unwrap_or(d_c);
        let h = |o: Option<usize>| o.unwrap_or(config.hidden_ratio * d_x).max(1);
        let act = Activation::LeakyRelu(config.leaky_slope);
        let generator = Mlp::new(&[d_z + d_c, h(config.hidden_g), d_x], act, Activation::None, &mut r);
        let critic = Mlp::new(&[d_x + d_c, h(config.hidden_d), 1], act, Activation::None, &mut r);
        let decoder = Mlp::new(&[d_x, h(config.hidden_dec), d_c], act, Activation::None, &mut r);
        Self {
            generator,
            critic,
            decoder,
            d_z,
            d_c,
            d_x,
        }
    }
}

/// `D([x, c])`, shape `batch×1`.
pub fn critic_score(g: &mut ExprGraph, critic: &BoundMlp, x: NodeId, c: NodeId) -> Result<NodeId, GanError> {
    let xc = g.concat(&[x, c], 1)?;
    Ok(critic.forward(g, xc)?)
}

/// `G([z, c])`, shape `batch×d_x`.
pub fn generate(g: &mut ExprGraph, generator: &BoundMlp, z: NodeId, c: NodeId) -> Result<NodeId, GanError> {
    let zc = g.concat(&[z, c], 1)?;
    Ok(generator.forward(g, zc)?)
}

/// Per-row `x̂ = α x + (1 − α) x̃` with the given `α` per row.
pub fn interpolate_with(x: &Array, x_tilde: &Array, alphas: &[f64]) -> Result<Array, GanError> {
    if x.shape() != x_tilde.shape() || alphas.len() != x.rows() {
        return Err(GanError::Shape(format!(
            "interpolate {:?} / {:?} with {} alphas",
            x.shape(),
            x_tilde.shape(),
            alphas.len()
        )));
    }
    let mut out = x.clone();
    for (i, &a) in alphas.iter().enumerate() {
        let t = x_tilde.row_slice(i).to_vec();
        for (o, tv) in out.row_slice_mut(i).iter_mut().zip(t) {
            *o = a * *o + (1.0 - a) * tv;
        }
    }
    Ok(out)
}

/// Interpolates with one uniform `α ∈ [0, 1]` per sample.
pub fn interpolate<R: Rng + ?Sized>(x: &Array, x_tilde: &Array, rng: &mut R) -> Result<Array, GanError> {
    let alphas: Vec<f64> = (0..x.rows()).map(|_| rng.random_range(0.0..=1.0)).collect();
    interpolate_with(x, x_tilde, &alphas)
}

#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    /// The objective the critic maximizes.
    pub loss: NodeId,
    /// `E[D(x,c)] − E[D(x̃,c)]`.
    pub wasserstein: NodeId,
    /// `E[(‖∇_x̂ D‖ − 1)²]`, before the λ weight.
    pub penalty: NodeId,
}

/// Builds the critic objective. `x_hat` must be an input node so the penalty
/// can differentiate with respect to it.
pub fn critic_loss(
    g: &mut ExprGraph,
    critic: &BoundMlp,
    x_real: NodeId,
    x_fake: NodeId,
    x_hat: NodeId,
    c: NodeId,
    lambda_gp: f64,
) -> Result<CriticTerms, GanError> {
    let d_real = critic_score(g, critic, x_real, c)?;
    let d_fake = critic_score(g, critic, x_fake, c)?;
    let m_real = g.mean(d_real)?;
    let m_fake = g.mean(d_fake)?;
    let wasserstein = g.sub(m_real, m_fake)?;

    let d_hat = critic_score(g, critic, x_hat, c)?;
    // Rows are independent, so the gradient of the sum gives every
    // per-sample input gradient at once.
    let total = g.sum(d_hat)?;
    let grad = g.gradient(total, &[x_hat])?[0];
    let norms = g.row_norms(grad)?;
    let dev = g.add_scalar(norms, -1.0)?;
    let sq = g.square(dev)?;
    let penalty = g.mean(sq)?;

    let weighted = g.scale(penalty, lambda_gp)?;
    let loss = g.sub(wasserstein, weighted)?;
    Ok(CriticTerms {
        loss,
        wasserstein,
        penalty,
    })
}

/// Mean over the batch of `‖decoder(x̃) − c‖₂`.
pub fn cycle_loss(g: &mut ExprGraph, decoder: &BoundMlp, x_tilde: NodeId, c: NodeId) -> Result<NodeId, GanError> {
    let c_hat = decoder.forward(g, x_tilde)?;
    if g.shape(c_hat) != g.shape(c) {
        return Err(GanError::Shape(format!(
            "decoder output {:?} vs embeddings {:?}",
            g.shape(c_hat),
            g.shape(c)
        )));
    }
    let diff = g.sub(c_hat, c)?;
    let norms = g.row_norms(diff)?;
    Ok(g.mean(norms)?)
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub loss: NodeId,
    /// `−E[D(x̃,c)]`.
    pub adversarial: NodeId,
    pub cycle: NodeId,
    pub x_tilde: NodeId,
}

pub fn generator_loss(
    g: &mut ExprGraph,
    generator: &BoundMlp,
    critic: &BoundMlp,
    decoder: &BoundMlp,
    z: NodeId,
    c: NodeId,
    beta_cyc: f64,
) -> Result<GeneratorTerms, GanError> {
    let x_tilde = generate(g, generator, z, c)?;
    let d_fake = critic_score(g, critic, x_tilde, c)?;
    let m = g.mean(d_fake)?;
    let adversarial = g.neg(m)?;
    let cycle = cycle_loss(g, decoder, x_tilde, c)?;
    let weighted = g.scale(cycle, beta_cyc)?;
    let loss = g.add(adversarial, weighted)?;
    Ok(GeneratorTerms {
        loss,
        adversarial,
        cycle,
        x_tilde,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub critic_loss: f64,
    pub wasserstein: f64,
    pub gen_loss: f64,
    pub cyc_loss: f64,
    pub penalty_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanHistory {
    pub epochs: Vec<GanEpoch>,
}

impl GanHistory {
    /// Columns: `epoch,critic_loss,gen_loss,cyc_loss,penalty_mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,critic_loss,gen_loss,cyc_loss,penalty_mean\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.critic_loss, e.gen_loss, e.cyc_loss, e.penalty_mean
            ));
        }
        s
    }
}

pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Array::matrix(rows, cols, data).expect("sized")
}

fn embedding_batch(batch: &[&Sample], embeddings: &Embeddings, d_c: usize) -> Result<Array, GanError> {
    let rows = batch
        .iter()
        .map(|s| {
            embeddings
                .get(&s.label)
                .map(Vec::as_slice)
                .ok_or_else(|| GanError::MissingEmbedding(s.label.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Array::from_rows(&rows, d_c).map_err(|e| GanError::Shape(e.to_string()))
}

fn diverged(epoch: usize, what: &str, v: f64) -> GanError {
    GanError::Divergence {
        epoch,
        detail: format!("{what} = {v}"),
    }
}

fn as_divergence(epoch: usize, e: GanError) -> GanError {
    match e {
        GanError::Autodiff(AutodiffError::NonFinite { node, op })
        | GanError::Nn(NnError::Autodiff(AutodiffError::NonFinite { node, op })) => GanError::Divergence {
            epoch,
            detail: format!("non-finite {op} at node {node}"),
        },
        GanError::Nn(NnError::NonFiniteGradient(i)) => GanError::Divergence {
            epoch,
            detail: format!("non-finite gradient for parameter {i}"),
        },
        other => other,
    }
}

struct StepStats {
    critic: f64,
    wasserstein: f64,
    penalty: f64,
}

fn critic_step<R: Rng + ?Sized>(
    nets: &mut GanNets,
    adam: &mut AdamState,
    x_real: &Array,
    c: &Array,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<StepStats, GanError> {
    let n = x_real.rows();
    let z = gaussian_noise(n, nets.d_z, rng);
    let zc = concat_cols(&z, c);
    let x_fake = nets.generator.mlp_forward(&zc)?;
    let x_hat = interpolate(x_real, &x_fake, rng)?;

    let mut g = ExprGraph::new();
    let critic = nets.critic.bind(&mut g)?;
    let xr = g.constant(x_real.clone())?;
    let xf = g.constant(x_fake)?;
    let xh = g.constant(x_hat)?;
    let cc = g.constant(c.clone())?;
    let terms = critic_loss(&mut g, &critic, xr, xf, xh, cc, lambda_gp)?;
    let objective = g.neg(terms.loss)?;
    let grads = g.gradient_values(objective, &critic.param_ids())?;
    let stats = StepStats {
        critic: g.eval_scalar(terms.loss)?,
        wasserstein: g.eval_scalar(terms.wasserstein)?,
        penalty: g.eval_scalar(terms.penalty)?,
    };
    adam.step(&mut nets.critic.params_mut(), &grads)?;
    Ok(stats)
}

fn generator_step<R: Rng + ?Sized>(
    nets: &mut GanNets,
    adam_g: &mut AdamState,
    adam_dec: &mut AdamState,
    c: &Array,
    beta_cyc: f64,
    rng: &mut R,
) -> Result<(f64, f64), GanError> {
    let n = c.rows();
    let mut g = ExprGraph::new();
    let generator = nets.generator.bind(&mut g)?;
    let critic = nets.critic.bind(&mut g)?;
    let decoder = nets.decoder.bind(&mut g)?;
    let z = g.constant(gaussian_noise(n, nets.d_z, rng))?;
    let cc = g.constant(c.clone())?;
    let terms = generator_loss(&mut g, &generator, &critic, &decoder, z, cc, beta_cyc)?;
    let g_ids = generator.param_ids();
    let d_ids = decoder.param_ids();
    let all: Vec<NodeId> = g_ids.iter().chain(&d_ids).copied().collect();
    let mut grads = g.gradient_values(terms.loss, &all)?;
    let dec_grads = grads.split_off(g_ids.len());
    let loss = g.eval_scalar(terms.loss)?;
    let cyc = g.eval_scalar(terms.cycle)?;
    adam_g.step(&mut nets.generator.params_mut(), &grads)?;
    adam_dec.step(&mut nets.decoder.params_mut(), &dec_grads)?;
    Ok((loss, cyc))
}

fn concat_cols(a: &Array, b: &Array) -> Array {
    let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(a.row_slice(i));
        data.extend_from_slice(b.row_slice(i));
    }
    Array::matrix(n, ca + cb, data).expect("sized")
}

/// Alternates `n_critic` critic updates with one generator+decoder update
/// per minibatch. The decoder only learns in the generator phase.
pub fn train_gan(
    config: &GanConfig,
    train: &[Sample],
    embeddings: &Embeddings,
    d_x: usize,
    d_c: usize,
    seed: u64,
) -> Result<(GanNets, GanHistory), GanError> {
    config.validate().map_err(GanError::Shape)?;
    if train.is_empty() {
        return Err(GanError::EmptyTrainingSet);
    }
    if let Some(s) = train.iter().find(|s| s.feature.len() != d_x) {
        return Err(GanError::Shape(format!(
            "sample {:?} has width {}, expected {d_x}",
            s.label,
            s.feature.len()
        )));
    }
    let mut nets = GanNets::init(config, d_x, d_c, seed);
    let mut adam_d = AdamState::new(config.adam, &nets.critic.params());
    let mut adam_g = AdamState::new(config.adam, &nets.generator.params());
    let mut adam_dec = AdamState::new(config.adam, &nets.decoder.params());
    let mut r = rng::stream(seed, "gan/train");
    let mut history = GanHistory::default();

    for epoch in 1..=config.epochs {
        let (mut crit, mut wass, mut pen, mut gl, mut cyc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut n_crit, mut n_gen) = (0usize, 0usize);
        for batch in shuffled_batches(train.len(), config.batch_size, &mut r) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let x = crate::datagen::features_matrix(&samples, d_x);
            let c = embedding_batch(&samples, embeddings, d_c)?;
            for _ in 0..config.n_critic {
                let s = critic_step(&mut nets, &mut adam_d, &x, &c, config.lambda_gp, &mut r)
                    .map_err(|e| as_divergence(epoch, e))?;
                crit += s.critic;
                wass += s.wasserstein;
                pen += s.penalty;
                n_crit += 1;
            }
            let (l, cy) = generator_step(&mut nets, &mut adam_g, &mut adam_dec, &c, config.beta_cyc, &mut r)
                .map_err(|e| as_divergence(epoch, e))?;
            gl += l;
            cyc += cy;
            n_gen += 1;
        }
        let row = GanEpoch {
            epoch,
            critic_loss: crit / n_crit as f64,
            wasserstein: wass / n_crit as f64,
            gen_loss: gl / n_gen as f64,
            cyc_loss: cyc / n_gen as f64,
            penalty_mean: pen / n_crit as f64,
        };
        for (what, v) in [("critic loss", row.critic_loss), ("generator loss", row.gen_loss)] {
            if !v.is_finite() {
                return Err(diverged(epoch, what, v));
            }
        }
        log::debug!(
            "gan epoch {epoch}: critic {:.4} wasserstein {:.4} gen {:.4} cyc {:.4} gp {:.4}",
            row.critic_loss,
            row.wasserstein,
            row.gen_loss,
            row.cyc_loss,
            row.penalty_mean
        );
        history.epochs.push(row);
    }
    Ok((nets, history))
}

/// `n` features `G(z_i, c(u))` with `z_i ~ N(0, I)`, all labelled `label`.
pub fn synthesize_features<R: Rng + ?Sized>(
    generator: &Mlp,
    d_z: usize,
    label: &str,
    embedding: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>, GanError> {
    if d_z + embedding.len() != generator.k_in() {
        return Err(GanError::Shape(format!(
            "generator takes {} inputs, noise {d_z} + embedding {}",
            generator.k_in(),
            embedding.len()
        )));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    let z = gaussian_noise(n, d_z, rng);
    let c = Array::from_rows(&vec![embedding; n], embedding.len()).expect("uniform");
    let x = generator.mlp_forward(&concat_cols(&z, &c))?;
    Ok((0..n)
        .map(|i| Sample {
            feature: x.row_slice(i).to_vec(),
            label: label.to_owned(),
        })
        .collect())
}
