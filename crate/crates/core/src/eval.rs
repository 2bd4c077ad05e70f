//! Scoring, aggregation over splits, ablations and sweeps.
//!
//! ZSL accuracy is per sample over unseen test samples with unseen
//! candidates only. GZSL accuracies are per-class means with every class as a
//! candidate, so test-count imbalance between classes does not move them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{dot, Array};
use crate::config::PipelineConfig;
use crate::datagen::{DataSplit, Protocol};
use crate::gcnattn::{self, GcnError};
use crate::pipeline::{self, PipelineError};
use crate::rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no {0} test samples")]
    EmptySubset(&'static str),
    #[error("accuracy {0} is negative")]
    Negative(f64),
    #[error("split protocol is {actual:?}, expected {expected:?}")]
    Protocol { expected: Protocol, actual: Protocol },
    #[error("test label {0:?} is not in the split")]
    UnknownLabel(String),
    #[error("n_splits must be >= 1")]
    NoSplits,
    #[error(transparent)]
    Gcn(#[from] GcnError),
}

/// `2su / (s + u)`, and 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64, EvalError> {
    for v in [s, u] {
        if v < 0.0 {
            return Err(EvalError::Negative(v));
        }
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

/// Rows follow the split's `seen ++ unseen` class order.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    /// Scores `w_c · x`; extra rows past the classes are ignored.
    Linear(Array),
    /// Nearest class mean in Euclidean distance.
    NearestPrototype(Array),
}

impl Classifier {
    pub fn predict(&self, feature: &[f64], candidates: &[usize]) -> Result<usize, GcnError> {
        match self {
            Classifier::Linear(w) => gcnattn::predict(w, feature, candidates),
            Classifier::NearestPrototype(m) => {
                if m.cols() != feature.len() {
                    return Err(GcnError::Width {
                        expected: m.cols(),
                        actual: feature.len(),
                    });
                }
                let mut best: Option<(usize, f64)> = None;
                for &c in candidates {
                    if c >= m.rows() {
                        return Err(GcnError::BadLabel {
                            label: c,
                            n_classes: m.rows(),
                        });
                    }
                    let row = m.row_slice(c);
                    // ‖x − m‖² ordered the same as ‖m‖² − 2 m·x.
                    let d = dot(row, row) - 2.0 * dot(row, feature);
                    match best {
                        Some((bc, bd)) if d > bd || (d == bd && bc < c) => {}
                        _ => best = Some((c, d)),
                    }
                }
                best.map(|(c, _)| c).ok_or(GcnError::NoCandidates)
            }
        }
    }
}

fn check_protocol(split: &DataSplit, expected: Protocol) -> Result<(), EvalError> {
    if split.protocol != expected {
        return Err(EvalError::Protocol {
            expected,
            actual: split.protocol,
        });
    }
    Ok(())
}

/// Top-1 accuracy over the test set restricted to unseen candidates.
pub fn zsl_evaluate(classifier: &Classifier, split: &DataSplit) -> Result<f64, EvalError> {
    check_protocol(split, Protocol::Zsl)?;
    if split.test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let partition = split.partition();
    let n_seen = partition.seen.len();
    let candidates: Vec<usize> = (n_seen..n_seen + partition.unseen.len()).collect();
    let mut correct = 0usize;
    for s in &split.test {
        let truth = partition
            .index_of(&s.label)
            .ok_or_else(|| EvalError::UnknownLabel(s.label.clone()))?;
        if classifier.predict(&s.feature, &candidates)? == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslScores {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

pub fn gzsl_evaluate(classifier: &Classifier, split: &DataSplit) -> Result<GzslScores, EvalError> {
    check_protocol(split, Protocol::Gzsl)?;
    let partition = split.partition();
    let n_seen = partition.seen.len();
    let n_classes = n_seen + partition.unseen.len();
    let candidates: Vec<usize> = (0..n_classes).collect();
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for s in &split.test {
        let truth = partition
            .index_of(&s.label)
            .ok_or_else(|| EvalError::UnknownLabel(s.label.clone()))?;
        totals[truth] += 1;
        if classifier.predict(&s.feature, &candidates)? == truth {
            hits[truth] += 1;
        }
    }
    let per_class_mean = |range: std::ops::Range<usize>, what| {
        let accs: Vec<f64> = range
            .filter(|&c| totals[c] > 0)
            .map(|c| hits[c] as f64 / totals[c] as f64)
            .collect();
        if accs.is_empty() {
            return Err(EvalError::EmptySubset(what));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    };
    let seen = per_class_mean(0..n_seen, "seen")?;
    let unseen = per_class_mean(n_seen..n_classes, "unseen")?;
    Ok(GzslScores {
        seen,
        unseen,
        harmonic: harmonic_mean(seen, unseen)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    /// No synthesized unseen features for the GCN.
    NoFg,
    /// Attention refresh disabled; the knowledge-graph adjacency stays fixed.
    NoAt,
    /// No cycle loss and a nearest-prototype classifier instead of the GCN.
    WganOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoFg, Mode::NoAt, Mode::WganOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoFg => "no-fg",
            Mode::NoAt => "no-at",
            Mode::WganOnly => "wgan-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected full, no-fg, no-at or wgan-only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_acc: Option<f64>,
    pub unseen_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic: Option<f64>,
}

impl SplitMetrics {
    pub fn evaluate(classifier: &Classifier, split: &DataSplit, seed: u64) -> Result<Self, EvalError> {
        Ok(match split.protocol {
            Protocol::Zsl => SplitMetrics {
                seed,
                seen_acc: None,
                unseen_acc: zsl_evaluate(classifier, split)?,
                harmonic: None,
            },
            Protocol::Gzsl => {
                let s = gzsl_evaluate(classifier, split)?;
                SplitMetrics {
                    seed,
                    seen_acc: Some(s.seen),
                    unseen_acc: s.unseen,
                    harmonic: Some(s.harmonic),
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_acc: Option<f64>,
    pub unseen_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub protocol: Protocol,
    pub mode: Mode,
    pub per_split: Vec<SplitMetrics>,
    pub mean: Summary,
    pub std: Summary,
    pub config_digest: String,
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1) as f64).sqrt())
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

impl MetricsRecord {
    pub fn from_splits(protocol: Protocol, mode: Mode, per_split: Vec<SplitMetrics>, config_digest: String) -> Self {
        let col = |f: &dyn Fn(&SplitMetrics) -> Option<f64>| -> Option<(f64, f64)> {
            let v: Option<Vec<f64>> = per_split.iter().map(f).collect();
            v.map(|v| mean_std(&v))
        };
        let seen = col(&|s| s.seen_acc);
        let unseen = col(&|s| Some(s.unseen_acc)).expect("always present");
        let harmonic = col(&|s| s.harmonic);
        Self {
            protocol,
            mode,
            mean: Summary {
                seen_acc: seen.map(|p| p.0),
                unseen_acc: unseen.0,
                harmonic: harmonic.map(|p| p.0),
            },
            std: Summary {
                seen_acc: seen.map(|p| p.1),
                unseen_acc: unseen.1,
                harmonic: harmonic.map(|p| p.1),
            },
            per_split,
            config_digest,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per split: `seed,seen_acc,unseen_acc,harmonic`, with empty
    /// cells for absent columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,seen_acc,unseen_acc,harmonic\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.per_split {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.seed,
                opt(r.seen_acc),
                r.unseen_acc,
                opt(r.harmonic)
            ));
        }
        s
    }

    /// `unseen 41.2 ± 3.1` style summary, rounded for display only.
    pub fn report(&self) -> String {
        let pct = |m: f64, s: f64| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
        let mut out = format!(
            "{} {} over {} split(s): unseen {}",
            self.mode,
            match self.protocol {
                Protocol::Zsl => "zsl",
                Protocol::Gzsl => "gzsl",
            },
            self.per_split.len(),
            pct(self.mean.unseen_acc, self.std.unseen_acc)
        );
        if let (Some(m), Some(s)) = (self.mean.seen_acc, self.std.seen_acc) {
            out.push_str(&format!(", seen {}", pct(m, s)));
        }
        if let (Some(m), Some(s)) = (self.mean.harmonic, self.std.harmonic) {
            out.push_str(&format!(", harmonic {}", pct(m, s)));
        }
        out
    }
}

/// Seed of the `i`-th split under a base seed. Split 0 uses the base seed
/// itself, so a single-split run matches the plain pipeline.
pub fn split_seed(base_seed: u64, i: usize) -> u64 {
    if i == 0 {
        base_seed
    } else {
        rng::derive_seed(base_seed, &format!("split/{i}"))
    }
}

/// Runs the two-stage pipeline once per split seed and aggregates.
pub fn repeated_splits(config: &PipelineConfig, n_splits: usize, base_seed: u64) -> Result<MetricsRecord, PipelineError> {
    if n_splits == 0 {
        return Err(EvalError::NoSplits.into());
    }
    let mut per_split = Vec::with_capacity(n_splits);
    for i in 0..n_splits {
        let seed = split_seed(base_seed, i);
        let run = pipeline::run_split(config, seed)?;
        log::info!("split {i} (seed {seed}): unseen {:.4}", run.metrics.unseen_acc);
        per_split.push(run.metrics);
    }
    Ok(MetricsRecord::from_splits(
        config.eval.protocol,
        config.eval.mode,
        per_split,
        config.digest(),
    ))
}

/// The configured pipeline under `mode`, over `config.eval.n_splits` splits.
pub fn ablation_run(config: &PipelineConfig, mode: Mode, seed: u64) -> Result<MetricsRecord, PipelineError> {
    let mut c = config.clone();
    c.eval.mode = mode;
    c.eval.seed = seed;
    repeated_splits(&c, c.eval.n_splits, seed)
}

/// Several modes over the same split seeds. Modes that train identical
/// generators (same cycle weight) share one training run per split; the
/// records equal those of separate [`ablation_run`] calls.
pub fn compare_modes(
    config: &PipelineConfig,
    modes: &[Mode],
    n_splits: usize,
    base_seed: u64,
) -> Result<BTreeMap<Mode, MetricsRecord>, PipelineError> {
    if n_splits == 0 {
        return Err(EvalError::NoSplits.into());
    }
    let configs: Vec<PipelineConfig> = modes
        .iter()
        .map(|&m| {
            let mut c = config.clone();
            c.eval.mode = m;
            c.eval.seed = base_seed;
            c
        })
        .collect();
    let mut per_mode: Vec<Vec<SplitMetrics>> = vec![vec![]; modes.len()];
    for i in 0..n_splits {
        let seed = split_seed(base_seed, i);
        let data = pipeline::generate_dataset(config, seed)?;
        let mut cache: Vec<(u64, Option<_>)> = vec![];
        for (k, c) in configs.iter().enumerate() {
            let mode = c.eval.mode;
            let key = match mode {
                Mode::NoFg => u64::MAX,
                Mode::WganOnly => 0f64.to_bits(),
                _ => c.gan.beta_cyc.to_bits(),
            };
            let gan = match cache.iter().find(|(k, _)| *k == key) {
                Some((_, g)) => g.clone(),
                None => {
                    let g = pipeline::stage_gan(c, &data, mode)?;
                    cache.push((key, g.clone()));
                    g
                }
            };
            let run = pipeline::finish_split(c, data.clone(), gan)?;
            log::info!("split {i} (seed {seed}) {mode}: unseen {:.4}", run.metrics.unseen_acc);
            per_mode[k].push(run.metrics);
        }
    }
    Ok(configs
        .iter()
        .zip(per_mode)
        .map(|(c, splits)| {
            (
                c.eval.mode,
                MetricsRecord::from_splits(c.eval.protocol, c.eval.mode, splits, c.digest()),
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Number of graph-convolution layers.
    LayerDepth,
    /// Feature width of the synthetic world.
    FeatureDim,
}

impl FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layer-depth" => Ok(SweepKind::LayerDepth),
            "feature-dim" => Ok(SweepKind::FeatureDim),
            _ => Err(format!("unknown sweep {s:?} (expected layer-depth or feature-dim)")),
        }
    }
}

/// Config variant for one sweep point. Layer depth `L` uses `L − 1` hidden
/// layers of width `d_x`.
pub fn sweep_config(base: &PipelineConfig, kind: SweepKind, value: usize) -> Result<PipelineConfig, PipelineError> {
    let mut c = base.clone();
    match kind {
        SweepKind::LayerDepth => {
            if value == 0 {
                return Err(PipelineError::Config("layer depth must be >= 1".into()));
            }
            c.gcn.hidden = Some(vec![c.world.d_x; value - 1]);
        }
        SweepKind::FeatureDim => {
            c.world.d_x = value;
            // Explicit hidden widths would no longer track d_x.
            c.gcn.hidden = None;
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn sweep(
    base: &PipelineConfig,
    kind: SweepKind,
    values: &[usize],
) -> Result<BTreeMap<usize, MetricsRecord>, PipelineError> {
    let mut out = BTreeMap::new();
    for &v in values {
        let c = sweep_config(base, kind, v)?;
        out.insert(v, repeated_splits(&c, c.eval.n_splits, c.eval.seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(40.0, 40.0).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(harmonic_mean(-1.0, 2.0), Err(EvalError::Negative(_))));
        assert!((harmonic_mean(52.6, 23.7).unwrap() - 32.7).abs() < 0.05);
        assert!((harmonic_mean(75.9, 24.8).unwrap() - 37.3).abs() < 0.1);
    }

    #[test]
    fn mean_std_matches_textbook() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn prototype_ties_go_to_lower_index() {
        let m = Array::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let c = Classifier::NearestPrototype(m);
        assert_eq!(c.predict(&[0.0], &[1, 0]).unwrap(), 0);
        assert_eq!(c.predict(&[-0.5], &[0, 1]).unwrap(), 1);
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("nofg".parse::<Mode>().is_err());
    }

    #[test]
    fn record_columns_follow_protocol() {
        let zsl = MetricsRecord::from_splits(
            Protocol::Zsl,
            Mode::Full,
            vec![SplitMetrics {
                seed: 1,
                seen_acc: None,
                unseen_acc: 0.5,
                harmonic: None,
            }],
            "d".into(),
        );
        assert!(zsl.mean.harmonic.is_none() && zsl.std.unseen_acc == 0.0);
        assert!(!zsl.to_json().contains("harmonic"));
        assert_eq!(zsl.to_csv(), "seed,seen_acc,unseen_acc,harmonic\n1,,0.5,\n");
        assert_eq!(MetricsRecord::from_json(&zsl.to_json()).unwrap(), zsl);
    }
}
