//! Experiment configuration file: strict JSON, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::PerturbConfig;
use crate::augment::{study_policies, AugmentPolicy};
use crate::data::{ProtocolConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SignConvention};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Load a saved dataset instead of generating one.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
}

/// Perturbation settings; `epsilon` is on the 0–255 pixel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_l1")]
    pub lambda1: f64,
    #[serde(default = "d_l2")]
    pub lambda2: f64,
    #[serde(default = "d_l3")]
    pub lambda3: f64,
    #[serde(default)]
    pub signs: SignConvention,
}

fn d_eps() -> f64 {
    2.0
}
fn d_steps() -> usize {
    2
}
fn d_l1() -> f64 {
    LossWeights::default().lambda1
}
fn d_l2() -> f64 {
    LossWeights::default().lambda2
}
fn d_l3() -> f64 {
    LossWeights::default().lambda3
}

impl Default for PerturbSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl PerturbSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn to_config(&self) -> Result<PerturbConfig> {
        if !(0.0..=255.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("perturb.epsilon {} outside [0, 255]", self.epsilon)));
        }
        let cfg = PerturbConfig {
            signs: self.signs,
            ..PerturbConfig::from_255(self.epsilon, self.steps, self.weights())
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Calibration grid; when absent every distinct operating point of the
    /// validation scores is tried.
    #[serde(default)]
    pub mu_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda1,
    Lambda2,
    Lambda3,
    Epsilon,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown sweep axis {s:?} (lambda1|lambda2|lambda3|epsilon)")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda1 => "lambda1",
            SweepAxis::Lambda2 => "lambda2",
            SweepAxis::Lambda3 => "lambda3",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    /// Grid spanning the published range of the axis.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::Lambda1 => vec![0.01, 0.1, 1.0],
            SweepAxis::Lambda2 => vec![0.1, 1.0, 10.0],
            SweepAxis::Lambda3 => vec![1e-5, 1e-4, 1e-3],
            SweepAxis::Epsilon => vec![1.0, 2.0, 4.0, 8.0],
        }
    }

    pub fn set(self, section: &mut PerturbSection, value: f64) {
        match self {
            SweepAxis::Lambda1 => section.lambda1 = value,
            SweepAxis::Lambda2 => section.lambda2 = value,
            SweepAxis::Lambda3 => section.lambda3 = value,
            SweepAxis::Epsilon => section.epsilon = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_axis")]
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

fn d_axis() -> SweepAxis {
    SweepAxis::Lambda2
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: d_axis(),
            values: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    Attention,
    Perturbation,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualizeSection {
    #[serde(default = "d_what")]
    pub what: VisualKind,
    /// Number of test images exported.
    #[serde(default = "d_samples")]
    pub samples: usize,
    /// Pixel magnification of exported images.
    #[serde(default = "d_zoom")]
    pub zoom: usize,
}

fn d_what() -> VisualKind {
    VisualKind::Attention
}
fn d_samples() -> usize {
    4
}
fn d_zoom() -> usize {
    8
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self {
            what: d_what(),
            samples: d_samples(),
            zoom: d_zoom(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub perturb: PerturbSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Policies of the augmentation study; defaults to the full study list.
    #[serde(default)]
    pub augment: Option<Vec<AugmentPolicy>>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub visualize: VisualizeSection,
    /// Weights file for `eval` and `visualize`; defaults to `<output_dir>/seed_<s>/train/model.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
}

fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.synth.validate()?;
        self.model.validate()?;
        if self.model.attributes != self.dataset.synth.attributes && self.dataset.path.is_none() {
            return Err(Error::Config(format!(
                "model.attributes = {} but dataset.synth.attributes = {}",
                self.model.attributes, self.dataset.synth.attributes
            )));
        }
        self.perturb.to_config()?;
        self.resolve_train(0)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(g) = &self.eval.mu_grid {
            if g.is_empty() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("eval.mu_grid must be a nonempty list of finite numbers".into()));
            }
        }
        for p in self.augment_policies() {
            p.validate()?;
        }
        Ok(())
    }

    /// Training configuration for one seed, perturbation section included.
    pub fn resolve_train(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            seed,
            perturb: self.perturb.to_config()?,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_for(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            ..self.dataset.synth.clone()
        }
    }

    pub fn augment_policies(&self) -> Vec<AugmentPolicy> {
        self.augment.clone().unwrap_or_else(study_policies)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization, output location excluded.
    pub fn sha256(&self) -> String {
        let key = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.beta1, 0.5);
        assert_eq!(c.augment_policies().len(), 11);
        let t = c.resolve_train(3).unwrap();
        assert_eq!(t.seed, 3);
        assert!((t.perturb.epsilon - 2.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        for text in [
            r#"{"perturb": {"lamda1": 0.5}}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"extra": 1}"#,
            r#"{"dataset": {"synth": {"classes": 3}}}"#,
        ] {
            match ExperimentConfig::from_json(text) {
                Err(Error::Config(m)) => assert!(m.contains("unknown field"), "{m}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"perturb": {"epsilon": 300}}"#,
            r#"{"perturb": {"steps": 0}}"#,
            r#"{"train": {"lr": -1}}"#,
            r#"{"seeds": []}"#,
            r#"{"eval": {"mu_grid": []}}"#,
            r#"{"model": {"attributes": 5}}"#,
            r#"{"augment": [{"kind": "cutout", "strength": 3}]}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn roundtrip_and_hash_are_stable() {
        let c = ExperimentConfig::from_json(r#"{"seeds": [1, 2], "sweep": {"axis": "epsilon"}}"#).unwrap();
        let again = ExperimentConfig::from_json(&c.to_pretty_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.sha256(), again.sha256());
        assert_ne!(c.sha256(), ExperimentConfig::default().sha256());
    }

    #[test]
    fn sweep_axis_names() {
        for axis in [SweepAxis::Lambda1, SweepAxis::Lambda2, SweepAxis::Lambda3, SweepAxis::Epsilon] {
            assert_eq!(SweepAxis::parse(axis.name()).unwrap(), axis);
        }
        assert!(SweepAxis::parse("lambda4").is_err());
    }
}
