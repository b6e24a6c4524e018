//! Run configuration: a TOML file with one table per module.
//!
//! ```toml
//! precision = "f64"
//! out = "runs/synth"
//!
//! [data]
//! source = "synth"        # synth | kitti-raw | kitti-odom
//!
//! [synth]                 # scene for the synth source
//! motions = [[0.2, 0.0, 0.1, 0.0, 0.0, 0.0]]
//!
//! [stack]
//! layers = 1
//! window = 3
//!
//! [train]
//! iterations = 200
//! seed = 7
//!
//! [loss]
//! alpha = 1e-4
//!
//! [eval]
//! median_scale = true
//! ```
//!
//! Every table and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sganvo::data::synth::SynthSceneSpec;
use sganvo::inference::EvalOptions;
use sganvo::losses::LossWeights;
use sganvo::model::StackConfig;
use sganvo::trainer::TrainConfig;
use sganvo::{Error, Result};

/// Environment variable consulted when `data.root` is not set.
pub const DATA_ROOT_ENV: &str = "SGANVO_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synth,
    KittiRaw,
    KittiOdom,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root; falls back to `$SGANVO_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Raw drives (`<date>/<drive>`) used for training.
    pub drives: Vec<String>,
    /// Eigen-style test split for raw depth evaluation.
    pub split: Option<PathBuf>,
    /// Odometry sequences used for training.
    pub sequences: Vec<String>,
    /// Odometry sequences used for evaluation.
    pub eval_sequences: Vec<String>,
    /// TOML file holding the synthetic scene; overrides `[synth]`.
    pub synth_spec: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cap: f64,
    pub median_scale: bool,
    /// Defaults to on for KITTI sources and off for synthetic scenes.
    pub eigen_crop: Option<bool>,
    pub align_scale: bool,
    pub snippets: Vec<usize>,
    pub drift_step: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = EvalOptions::default();
        EvalConfig {
            cap: d.cap,
            median_scale: d.median_scale,
            eigen_crop: None,
            align_scale: d.align_scale,
            snippets: d.snippets,
            drift_step: d.drift_step,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            cap: self.cap,
            median_scale: self.median_scale,
            eigen_crop: self.eigen_crop.unwrap_or(true),
            align_scale: self.align_scale,
            snippets: self.snippets.clone(),
            drift_step: self.drift_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SynthSceneSpec,
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("configuration error: "))))
    }

    /// Fills every defaulted value so the written file reproduces the run
    /// on its own.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.stack = c.stack.resolved();
        if c.eval.eigen_crop.is_none() {
            c.eval.eigen_crop = Some(c.data.source != DataSource::Synth);
        }
        if c.data.source != DataSource::Synth && c.data.root.is_none() {
            c.data.root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        }
        if let Some(path) = c.data.synth_spec.take() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read synth spec {}: {e}", path.display())))?;
            c.synth = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim())))?;
        }
        Ok(c)
    }

    /// Every violated constraint, joined into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut take = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string().trim_start_matches("configuration error: ").to_string());
            }
        };
        take(self.stack.validate());
        take(self.train.validate());
        take(self.loss.validate());
        if self.data.source == DataSource::Synth {
            take(self.synth.validate());
        }
        let e = &self.eval;
        if !(e.cap > 0.0) {
            errs.push(format!("eval.cap = {} must be positive", e.cap));
        }
        if e.snippets.iter().any(|&n| n < 2) {
            errs.push("eval.snippets must all be at least 2 frames".into());
        }
        if e.drift_step == 0 {
            errs.push("eval.drift_step must be positive".into());
        }
        match self.data.source {
            DataSource::Synth => {}
            DataSource::KittiRaw | DataSource::KittiOdom if self.data.root.is_none() => {
                errs.push(format!("data.root is required for KITTI sources (or set {DATA_ROOT_ENV})"));
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nlearning_rate = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn every_invalid_field_is_reported() {
        let c = RunConfig::parse("[train]\nbatch_size = 0\n[loss]\nbeta = -1.0\n[stack]\nwindow = 0\n").unwrap();
        let err = c.validate().unwrap_err().to_string();
        for key in ["train.batch_size", "loss.beta", "stack.window"] {
            assert!(err.contains(key), "{key} missing from: {err}");
        }
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::default().resolved().unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved().unwrap(), c);
    }
}
