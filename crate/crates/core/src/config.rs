//! Pipeline configuration document.
//!
//! JSON with the sections `world`, `gan`, `gcn` and `eval`. Every section and
//! field is optional and falls back to its default; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Protocol, WorldSpec};
use crate::eval::Mode;
use crate::gcnattn::GcnConfig;
use crate::genfeat::GanConfig;
use crate::pipeline::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub mode: Mode,
    pub protocol: Protocol,
    pub n_splits: usize,
    /// Synthesized samples per unseen class; defaults to the mean per-class
    /// count of the seen training samples.
    pub synth_per_class: Option<usize>,
    /// Fraction of classes drawn as seen for each split. Unset keeps the
    /// world's own seen/unseen roles.
    pub seen_fraction: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Full,
            protocol: Protocol::Zsl,
            n_splits: 1,
            synth_per_class: None,
            seen_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub world: WorldSpec,
    pub gan: GanConfig,
    pub gcn: GcnConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        let w = &self.world;
        if w.n_seen + w.n_unseen < 2 {
            return err(format!("world needs at least 2 classes, has {}", w.n_seen + w.n_unseen));
        }
        if self.eval.seen_fraction.is_none() && (w.n_seen == 0 || w.n_unseen == 0) {
            return err("world roles need both seen and unseen classes (or set eval.seen_fraction)".into());
        }
        if let Some(f) = self.eval.seen_fraction {
            if !(f > 0.0 && f < 1.0) {
                return err(format!("eval.seen_fraction must be in (0, 1), got {f}"));
            }
        }
        if w.d_x < 2 || w.d_c < 2 {
            return err(format!("world.d_x and world.d_c must be >= 2, got {} and {}", w.d_x, w.d_c));
        }
        if w.samples_per_class == 0 {
            return err("world.samples_per_class must be >= 1".into());
        }
        if self.eval.protocol == Protocol::Gzsl && crate::datagen::gzsl_holdout_count(w.samples_per_class) == 0 {
            return err(format!(
                "gzsl holds out 20% of each seen class; samples_per_class = {} leaves none",
                w.samples_per_class
            ));
        }
        if self.eval.n_splits == 0 {
            return err("eval.n_splits must be >= 1".into());
        }
        self.gan.validate().map_err(PipelineError::Config)?;
        self.gcn.validate().map_err(PipelineError::Config)?;
        if let Some(d_z) = self.gan.d_z {
            if d_z == 0 {
                return err("gan.d_z must be >= 1".into());
            }
        }
        Ok(())
    }
}
