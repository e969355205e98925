//! JSON run configuration. Every section and field is optional and falls
//! back to the defaults below; unknown keys are rejected.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use snn_core::compress::CountMode;
use snn_core::network::{parse_arch, Ablation, ModelSpec};
use snn_core::neuron::NeuronParams;
use snn_core::train::TrainOptions;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Nmnist,
    Csv,
    Synthetic,
}

/// Window kept from every event stream, in sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Stream length in microseconds.
    pub duration: u64,
    /// Events per active pixel per microsecond.
    pub rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            duration: 10_000,
            rate: 2e-4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Dataset root; relative paths are taken from the config file's folder.
    pub path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub crop: Option<Crop>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            width: 16,
            height: 16,
            limit_train: Some(200),
            limit_test: Some(100),
            crop: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Frame size after cropping.
    pub fn frame_size(&self) -> (u32, u32) {
        match self.crop {
            Some(c) => (c.width, c.height),
            None => (self.width, self.height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: String,
    #[serde(rename = "T")]
    pub time_steps: usize,
    #[serde(rename = "N_r")]
    pub resolution: usize,
    pub binary_mode: bool,
    pub use_synaptic_block: bool,
    pub use_learnable_wm: bool,
    pub desired_count: u32,
    /// Frame multiplier; defaults to `1 / (2^N_r − 1)`.
    pub input_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "8SC3-AP2-16FC-2Voting".into(),
            time_steps: 2,
            resolution: 8,
            binary_mode: false,
            use_synaptic_block: true,
            use_learnable_wm: true,
            desired_count: 1,
            input_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: u64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    #[serde(rename = "V_th")]
    pub v_th: f64,
    #[serde(rename = "S_max")]
    pub s_max: u32,
    #[serde(rename = "alpha_H")]
    pub alpha_h: f64,
    #[serde(rename = "alpha_W")]
    pub alpha_w: f64,
    pub dropout_rate: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let n = NeuronParams::default();
        Self {
            v_th: n.v_th,
            s_max: n.s_max,
            alpha_h: n.alpha_h,
            alpha_w: n.alpha_w,
            dropout_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub hyper: HyperConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves a relative dataset path against the
    /// file's folder.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn count_mode(&self) -> CountMode {
        if self.model.binary_mode {
            CountMode::Binary
        } else {
            CountMode::Count
        }
    }

    pub fn neuron(&self) -> NeuronParams {
        NeuronParams {
            v_th: self.hyper.v_th,
            s_max: self.hyper.s_max,
            alpha_h: self.hyper.alpha_h,
            alpha_w: self.hyper.alpha_w,
        }
    }

    pub fn input_scale(&self) -> f64 {
        self.model.input_scale.unwrap_or_else(|| {
            let levels = 2f64.powi(self.model.resolution.min(1023) as i32) - 1.0;
            1.0 / levels.max(1.0)
        })
    }

    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        let ablation = Ablation {
            use_synaptic_block: self.model.use_synaptic_block,
            use_learnable_wm: self.model.use_learnable_wm,
        };
        let config = parse_arch(&self.model.arch, self.model.time_steps, ablation)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let (w, h) = self.dataset.frame_size();
        let spec = ModelSpec {
            neuron: self.neuron(),
            dropout_rate: self.hyper.dropout_rate,
            input_scale: self.input_scale(),
            ..ModelSpec::new(config, h as usize, w as usize)
        };
        spec.layer_shapes().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.optim.lr,
            batch_size: self.optim.batch,
            epochs: self.optim.epochs,
            seed: self.optim.seed,
            desired_count: self.model.desired_count,
        }
    }

    /// Checks every invariant that does not need the data.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.dataset;
        if d.width == 0 || d.height == 0 {
            return bad(format!("sensor size {}x{} must be positive", d.width, d.height));
        }
        if let Some(c) = d.crop {
            if c.width == 0 || c.height == 0 || c.x + c.width > d.width || c.y + c.height > d.height {
                return bad(format!("crop {c:?} does not fit a {}x{} sensor", d.width, d.height));
            }
        }
        if d.kind != DatasetKind::Synthetic && d.path.is_none() {
            return bad(format!("dataset kind {:?} needs a path", d.kind));
        }
        if d.kind == DatasetKind::Synthetic {
            let s = &d.synthetic;
            if s.duration == 0 || !(s.rate.is_finite() && s.rate > 0.0) {
                return bad("synthetic duration and rate must be positive".into());
            }
        }
        if self.model.resolution == 0 || self.model.resolution > 32 {
            return bad(format!("N_r must be in 1..=32, got {}", self.model.resolution));
        }
        if let Some(s) = self.model.input_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("input_scale must be positive, got {s}"));
            }
        }
        self.neuron()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let spec = self.model_spec()?;
        self.train_options()
            .validate(spec.neuron.s_max)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}
