//! Experiment configuration files, presets and dotted-path overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flow::CouplingFlowConfig;
use crate::mmd::{KernelFamily, KernelSpec, MIN_REPLICATES};
use crate::nn::Activation;
use crate::rng::derive_seed;
use crate::scan::{GridAxis, ScanConfig};
use crate::simulators::{
    CancerStromalConfig, DdmConfig, Gaussian2dConfig, ModelSpec, Niw5dConfig, CS_FEATURES,
};
use crate::summary::SummaryConfig;
use crate::train::TrainConfig;

fn default_layers() -> usize {
    6
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_perm_seed() -> u64 {
    0x5eed
}
fn default_clamp() -> f64 {
    1.9
}

/// Flow settings; the dimensions come from the model and the summary network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowOptions {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub subnet_hidden: Vec<usize>,
    #[serde(default = "default_perm_seed")]
    pub permutation_seed: u64,
    #[serde(default = "default_clamp")]
    pub scale_clamp: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for FlowOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl FlowOptions {
    pub fn build(&self, theta_dim: usize, cond_dim: usize) -> CouplingFlowConfig {
        CouplingFlowConfig {
            theta_dim,
            cond_dim,
            n_layers: self.n_layers,
            subnet_hidden: self.subnet_hidden.clone(),
            permutation_seed: self.permutation_seed,
            scale_clamp: self.scale_clamp,
            activation: self.activation,
        }
    }
}

fn alpha() -> f64 {
    0.05
}
fn thousand() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdConfig {
    /// Test kernel; the default ladder for the summary width when absent.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default = "alpha")]
    pub alpha: f64,
    /// Null replicates `B`.
    #[serde(default = "thousand")]
    pub replicates: usize,
    /// Training-model simulations `M` the tests compare against.
    #[serde(default = "thousand")]
    pub reference_size: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl MmdConfig {
    pub fn kernel_for(&self, summary_dim: usize) -> KernelSpec {
        self.kernel
            .clone()
            .unwrap_or_else(|| KernelSpec::default_for_dim(KernelFamily::GaussianSum, summary_dim))
    }
}

fn n_sbc() -> usize {
    500
}
fn sbc_draws() -> usize {
    250
}
fn rmse_sets() -> usize {
    200
}
fn rmse_draws() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    #[serde(default = "n_sbc")]
    pub n_sbc: usize,
    #[serde(default = "sbc_draws")]
    pub draws: usize,
    /// Datasets for the posterior-mean error against the closed form.
    #[serde(default = "rmse_sets")]
    pub rmse_datasets: usize,
    #[serde(default = "rmse_draws")]
    pub rmse_draws: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn out_dir() -> PathBuf {
    PathBuf::from("msbi-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub summary: SummaryConfig,
    #[serde(default)]
    pub flow: FlowOptions,
    /// `train.seed` is derived from `seed` by [`ExperimentConfig::resolve`].
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mmd: MmdConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub scan_grid: Vec<GridAxis>,
    #[serde(default)]
    pub calibrate: CalibrateConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "out_dir")]
    pub out_dir: PathBuf,
}

/// Sub-streams of the experiment seed, one per stage.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const REFERENCE: u64 = 3;
    pub const SIMULATE: u64 = 4;
    pub const DIAGNOSE: u64 = 5;
    pub const SCAN: u64 = 6;
    pub const CALIBRATE: u64 = 7;
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        for (path, raw) in overrides {
            apply_override(&mut v, path, raw)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills derived fields.
    pub fn resolve(&mut self) {
        self.train.seed = derive_seed(self.seed, streams::TRAIN);
    }

    /// Checks every nested configuration and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let model = self.model.build().map_err(cfg_err)?;
        self.summary.validate().map_err(cfg_err)?;
        let shape = model.data_shape();
        if self.summary.input_dim() != shape.feature_dim()
            || self.summary.is_set_encoder()
                != matches!(shape, crate::simulators::DataShape::Set { .. })
        {
            return Err(Error::Config(format!(
                "summary network {:?} does not fit {} data {shape:?}",
                self.summary,
                model.name()
            )));
        }
        self.flow_config().validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        self.scan.validate().map_err(cfg_err)?;
        if let Some(k) = &self.mmd.kernel {
            k.validate().map_err(cfg_err)?;
        }
        if !(self.mmd.alpha > 0.0 && self.mmd.alpha < 1.0) {
            return Err(Error::Config(format!(
                "mmd.alpha must lie in (0, 1), got {}",
                self.mmd.alpha
            )));
        }
        if self.mmd.replicates < MIN_REPLICATES {
            return Err(Error::Config(format!(
                "mmd.replicates must be at least {MIN_REPLICATES}"
            )));
        }
        if self.mmd.reference_size < self.scan.n_observed.max(1) {
            return Err(Error::Config(
                "mmd.reference_size must be at least scan.n_observed".into(),
            ));
        }
        if self.calibrate.draws < crate::diagnose::MIN_SBC_DRAWS {
            return Err(Error::Config("calibrate.draws must be at least 10".into()));
        }
        for axis in &self.scan_grid {
            for &v in &axis.values {
                self.model.with_knob(&axis.knob, v).map_err(cfg_err)?;
            }
        }
        Ok(())
    }

    pub fn flow_config(&self) -> CouplingFlowConfig {
        let d = self.model.build().map(|m| m.theta_dim()).unwrap_or(0);
        self.flow.build(d, self.summary.output_dim())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Named starting points for the bundled models.
    pub fn preset(name: &str) -> Result<Self> {
        let (model, summary, steps) = match name {
            "gaussian2d" => (
                ModelSpec::Gaussian2d(Gaussian2dConfig::default()),
                SummaryConfig::deep_set(2, 2),
                20_000,
            ),
            "gaussian2d-overcomplete" => (
                ModelSpec::Gaussian2d(Gaussian2dConfig::default()),
                SummaryConfig::deep_set(2, 4),
                20_000,
            ),
            "niw5d" => (
                ModelSpec::Niw5d(Niw5dConfig::default()),
                SummaryConfig::deep_set(5, 40),
                50_000,
            ),
            "cancer_stromal" => (
                ModelSpec::CancerStromal(CancerStromalConfig::default()),
                SummaryConfig::mlp(CS_FEATURES.len(), 4),
                10_000,
            ),
            "ddm" => (
                ModelSpec::Ddm(DdmConfig::default()),
                SummaryConfig::deep_set(4, 10),
                5_000,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        let mut cfg = ExperimentConfig {
            model,
            summary,
            flow: FlowOptions::default(),
            train: TrainConfig {
                steps,
                ..TrainConfig::default()
            },
            mmd: MmdConfig::default(),
            scan: ScanConfig::default(),
            scan_grid: Vec::new(),
            calibrate: CalibrateConfig::default(),
            seed: 0,
            out_dir: out_dir(),
        };
        cfg.resolve();
        Ok(cfg)
    }
}

pub const PRESETS: [&str; 5] = [
    "gaussian2d",
    "gaussian2d-overcomplete",
    "niw5d",
    "cancer_stromal",
    "ddm",
];

/// Sets `path` (dot-separated keys) in `v`. The raw value is parsed as JSON
/// and taken as a string when that fails. Missing intermediate objects are
/// created; unknown keys are caught when the result is deserialized.
pub fn apply_override(v: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path {path:?}")));
    }
    let mut cur = v;
    for (i, key) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {path:?}: {} is not an object",
                keys[..i].join(".")
            ))
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PRESETS {
            let cfg = ExperimentConfig::preset(p).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json().unwrap(), &[]).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn dotted_overrides() {
        let text = ExperimentConfig::preset("gaussian2d")
            .unwrap()
            .to_json()
            .unwrap();
        let ov = vec![
            ("train.steps".to_string(), "7".to_string()),
            ("model.mu0".to_string(), "[1, 2]".to_string()),
            ("out_dir".to_string(), "somewhere".to_string()),
        ];
        let cfg = ExperimentConfig::from_json(&text, &ov).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
        match cfg.model {
            ModelSpec::Gaussian2d(c) => assert_eq!(c.mu0, vec![1.0, 2.0]),
            _ => unreachable!(),
        }
        let bad = vec![("train.stepz".to_string(), "7".to_string())];
        assert!(ExperimentConfig::from_json(&text, &bad).is_err());
        let bad = vec![("seed.x".to_string(), "7".to_string())];
        assert!(ExperimentConfig::from_json(&text, &bad).is_err());
    }

    #[test]
    fn inconsistent_summary_rejected() {
        let text = ExperimentConfig::preset("gaussian2d")
            .unwrap()
            .to_json()
            .unwrap();
        let ov = vec![(
            "summary".to_string(),
            r#"{"kind":"mlp","input_dim":2,"output_dim":2}"#.to_string(),
        )];
        assert!(ExperimentConfig::from_json(&text, &ov).is_err());
        let ov = vec![("mmd.alpha".to_string(), "1.5".to_string())];
        assert!(ExperimentConfig::from_json(&text, &ov).is_err());
    }
}
