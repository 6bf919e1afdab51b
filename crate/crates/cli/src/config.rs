use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dtl_core::harness::{Algorithm, TargetRef, DEFAULT_SIGMAS};
use dtl_core::nn::TrainConfig;
use dtl_core::transfer::McdConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Reads a JSON config, or the default when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            if value.get("version").is_none() {
                bail!("config {} has no \"version\" field", p.display());
            }
            serde_json::from_value(value).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

pub fn check_version(version: u32) -> anyhow::Result<()> {
    if version != CONFIG_VERSION {
        bail!("unsupported config version {version} (expected {CONFIG_VERSION})");
    }
    Ok(())
}

pub fn write_snapshot<T: Serialize>(cfg: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Target model, perturbed source models and sampled datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub version: u32,
    pub target: TargetRef,
    pub sigmas: Vec<f64>,
    /// Seeds match replicate 0 of a sweep with the same base seed.
    pub base_seed: u64,
    pub source_rows: usize,
    pub target_rows: usize,
    pub test_rows: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            version: CONFIG_VERSION,
            target: TargetRef::default(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            base_seed: 0,
            source_rows: 10_000,
            target_rows: 10_000,
            test_rows: 10_000,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        check_version(self.version)?;
        if self.sigmas.is_empty() {
            bail!("at least one sigma is required");
        }
        if let Some(s) = self.sigmas.iter().find(|s| !s.is_finite() || **s < 0.0) {
            bail!("invalid sigma {s}: must be finite and >= 0");
        }
        if self.source_rows == 0 || self.target_rows == 0 || self.test_rows == 0 {
            bail!("row counts must be >= 1");
        }
        Ok(())
    }
}

/// A single training run on CSV datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub version: u32,
    pub algorithm: Algorithm,
    /// Labeled source rows.
    pub source: Option<PathBuf>,
    /// Target training rows; labels are required by target, dann_target and
    /// fine-tuning.
    pub target: Option<PathBuf>,
    /// Model file fixing feature arities and class count; inferred from the
    /// data when absent.
    pub model: Option<PathBuf>,
    /// Source-target divergence for lambda schedules; 0 when unknown.
    pub kl: f64,
    pub network: String,
    pub label_relu: bool,
    pub domain_width: usize,
    pub mcd: McdConfig,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            version: CONFIG_VERSION,
            algorithm: Algorithm::Source,
            source: None,
            target: None,
            model: None,
            kl: 0.0,
            network: "baseline".into(),
            label_relu: true,
            domain_width: 1024,
            mcd: McdConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        check_version(self.version)?;
        let needs_source = self.algorithm != Algorithm::Target;
        let needs_target = self.algorithm != Algorithm::Source;
        if needs_source && self.source.is_none() {
            bail!("{} needs a source dataset", self.algorithm);
        }
        if needs_target && self.target.is_none() {
            bail!("{} needs a target dataset", self.algorithm);
        }
        if !self.kl.is_finite() || self.kl < 0.0 {
            bail!("kl must be finite and >= 0");
        }
        self.train.validate()?;
        Ok(())
    }
}
