//! Experiment configuration: a TOML tree with explicit validation. Defaults
//! follow the reference training setup; the desk profile scales everything
//! down for CPU runs.

use crate::data::SplitPlan;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::probe::ProbeHyper;
use crate::schedule::{SamplerKind, ScheduleKind, WeightingPolicy};
use crate::train::{FidParams, TrainParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Balanced,
    LongTail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub image_size: usize,
    pub classes: usize,
    pub per_class: usize,
    pub noise_level: f64,
    pub jitter: f64,
    pub regime: Regime,
    /// Balanced-mode training quota per class; 0 balances to the largest
    /// class.
    pub quota: usize,
    /// Long-tail augmentation multiplier.
    pub multiplier: usize,
    pub min_class_count: usize,
    pub augment: bool,
    pub ratios: [f64; 3],
    pub stratified: bool,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DataSource::Synthetic,
            path: None,
            label_map: None,
            image_size: 128,
            classes: 8,
            per_class: 200,
            noise_level: 0.03,
            jitter: 1.0,
            regime: Regime::Balanced,
            quota: 0,
            multiplier: 2,
            min_class_count: 5,
            augment: true,
            ratios: [0.8, 0.1, 0.1],
            stratified: true,
            seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            train: self.ratios[0],
            val: self.ratios[1],
            test: self.ratios[2],
            stratified: self.stratified,
            seed: self.seed,
            min_class_count: match self.regime {
                Regime::Balanced => None,
                Regime::LongTail => Some(self.min_class_count),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t: usize,
    pub offset_s: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Cosine,
            t: 1000,
            offset_s: 0.008,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::SquaredCosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub timesteps: Vec<usize>,
    /// Flat readout indices; empty means all.
    pub readouts: Vec<usize>,
    pub full_test: bool,
    pub seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            timesteps: vec![1, 10, 25, 50, 75, 100, 200, 400, 600],
            readouts: Vec::new(),
            full_test: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub enabled: bool,
    /// 0 means "one cluster per class".
    pub k: usize,
    pub runs: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Images used for the PCA token overlays (0 disables them).
    pub overlay_images: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            enabled: true,
            k: 0,
            runs: 5,
            restarts: 5,
            max_iter: 300,
            tol: 1e-4,
            seed: 0,
            overlay_images: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub weighting: WeightingPolicy,
    pub sampler: SamplerSection,
    pub model: DenoiserConfig,
    pub train: TrainParams,
    pub fid: FidParams,
    pub probe: ProbeHyper,
    pub sweep: SweepSection,
    pub cluster: ClusterSection,
    pub output: OutputSection,
}

impl Default for WeightingPolicy {
    fn default() -> Self {
        WeightingPolicy::MinSnr { gamma: 5.0 }
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::paper()
    }
}

impl ExperimentConfig {
    /// CPU-friendly profile: 32x32 synthetic data, the desk denoiser, a
    /// compact sweep.
    pub fn desk() -> Self {
        ExperimentConfig {
            dataset: DatasetSection {
                image_size: 32,
                ..Default::default()
            },
            model: DenoiserConfig::desk(),
            train: TrainParams {
                epochs: 10,
                batch: 32,
                lr: 1e-3,
                ema_decay: 0.99,
                save_interval: 5,
                ..Default::default()
            },
            sweep: SweepSection {
                timesteps: vec![1, 10, 25, 50, 100, 200],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::contract(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weighting.validate()?;
        if self.dataset.image_size != self.model.image_size {
            return Err(Error::config(format!(
                "dataset image size {} must match model image size {}",
                self.dataset.image_size, self.model.image_size
            )));
        }
        if self.dataset.source == DataSource::Directory && self.dataset.path.is_none() {
            return Err(Error::config("directory source requires dataset.path"));
        }
        if self.dataset.source == DataSource::Synthetic && self.dataset.classes == 0 {
            return Err(Error::config("synthetic source requires dataset.classes > 0"));
        }
        let ratio_sum: f64 = self.dataset.ratios.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "dataset ratios sum to {ratio_sum}, not 1"
            )));
        }
        if self.schedule.t < 2 {
            return Err(Error::config("schedule.t must be >= 2"));
        }
        if self.schedule.offset_s < 0.0 {
            return Err(Error::config("schedule.offset_s must be >= 0"));
        }
        if self.sweep.timesteps.is_empty() {
            return Err(Error::config("sweep.timesteps must be nonempty"));
        }
        for &t in &self.sweep.timesteps {
            if t == 0 || t > self.schedule.t {
                return Err(Error::config(format!(
                    "sweep timestep {t} outside 1..={}",
                    self.schedule.t
                )));
            }
        }
        let max_ell = self.model.n_stages() * self.model.decoder_blocks_per_stage;
        for &ell in &self.sweep.readouts {
            if ell == 0 || ell > max_ell {
                return Err(Error::config(format!(
                    "sweep readout {ell} outside 1..={max_ell}"
                )));
            }
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(Error::config("train.epochs and train.batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.ema_decay) {
            return Err(Error::config("train.ema_decay must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_frac) {
            return Err(Error::config("train.warmup_frac must be in [0, 1]"));
        }
        Ok(())
    }
}
