//! Run configuration: one JSON document covering data source, both model
//! stages, training, sampling, ablations, and evaluation. Unknown keys are
//! rejected and every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar::{ArConfig, SamplingParams};
use crate::error::{Error, Result};
use crate::vq::{Ablation, VqConfig};

/// Resolved per-stage optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
}

pub const STAGE1_DEFAULTS: StageConfig =
    StageConfig { lr: 1e-4, epochs: 100, batch_size: 128, adam_betas: (0.9, 0.999) };
pub const STAGE2_DEFAULTS: StageConfig =
    StageConfig { lr: 1e-4, epochs: 200, batch_size: 64, adam_betas: (0.9, 0.95) };

impl StageConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("{stage}: learning rate must be positive")));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("{stage}: epochs must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: batch_size must be at least 1")));
        }
        for (i, b) in [self.adam_betas.0, self.adam_betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{stage}: adam beta{} must lie in [0, 1)", i + 1)));
            }
        }
        Ok(())
    }
}

/// Sparse per-stage override; unset fields fall back to that stage's
/// documented defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StagePatch {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub adam_betas: Option<(f64, f64)>,
}

impl StagePatch {
    pub fn resolve(&self, base: StageConfig) -> StageConfig {
        StageConfig {
            lr: self.lr.unwrap_or(base.lr),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            adam_betas: self.adam_betas.unwrap_or(base.adam_betas),
        }
    }
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub stage1: StagePatch,
    pub stage2: StagePatch,
    pub seed: u64,
    /// Global-norm clip applied during Stage II only; null disables it.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage1: StagePatch::default(),
            stage2: StagePatch::default(),
            seed: 0,
            grad_clip: default_grad_clip(),
        }
    }
}

impl TrainingConfig {
    pub fn stage1(&self) -> StageConfig {
        self.stage1.resolve(STAGE1_DEFAULTS)
    }

    pub fn stage2(&self) -> StageConfig {
        self.stage2.resolve(STAGE2_DEFAULTS)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1().validate("stage1")?;
        self.stage2().validate("stage2")?;
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive when set".into()));
            }
        }
        Ok(())
    }
}

/// Synthetic low-rank generator settings; window length and count come from
/// the surrounding data section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub channels: usize,
    pub rank: usize,
    pub n_windows: usize,
    pub n_prototypes: usize,
    pub noise_std: f64,
    pub n_classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            channels: 8,
            rank: 3,
            n_windows: 2000,
            n_prototypes: 16,
            noise_std: 0.0,
            n_classes: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV source; mutually exclusive with `synth`.
    pub csv_path: Option<String>,
    pub has_header: bool,
    pub drop_first_col: bool,
    /// Synthetic source; mutually exclusive with `csv_path`.
    pub synth: Option<SynthSpec>,
    pub window_len: usize,
    pub stride: usize,
    pub train_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv_path: None,
            has_header: true,
            drop_first_col: false,
            synth: None,
            window_len: 48,
            stride: 1,
            train_frac: 0.95,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.csv_path, &self.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("choose one data source: csv_path or synth".into()))
            }
            (None, None) => {
                return Err(Error::Config("a data source is required: csv_path or synth".into()))
            }
            _ => {}
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return Err(Error::Config("train_frac must lie in (0, 1]".into()));
        }
        if let Some(s) = &self.synth {
            if s.rank == 0 || s.channels == 0 || s.n_windows == 0 || s.n_prototypes == 0 {
                return Err(Error::Config("synth sizes must be positive".into()));
            }
            if s.rank > s.channels {
                return Err(Error::Config(format!(
                    "synth rank {} exceeds channel count {}",
                    s.rank, s.channels
                )));
            }
        }
        Ok(())
    }
}

/// Evaluation knobs for cmd_evaluate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub embedding_dim: usize,
    /// Step cap for each auxiliary network training run.
    pub aux_max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { repeats: 5, embedding_dim: 32, aux_max_steps: 5000 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("eval repeats must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.aux_max_steps == 0 {
            return Err(Error::Config("aux_max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vq: VqConfig,
    pub ar: ArConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingParams,
    pub ablation: Ablation,
    pub eval: EvalConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            vq: VqConfig::default(),
            ar: ArConfig::default(),
            training: TrainingConfig::default(),
            sampling: SamplingParams::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        // Channel count may still be unresolved (0) before data is seen.
        if self.vq.num_channels != 0 {
            self.vq.validate()?;
        }
        self.ar.validate()?;
        self.training.validate()?;
        self.sampling.validate()?;
        self.eval.validate()?;
        if self.ar.codebook_size != self.vq.codebook_size {
            return Err(Error::Config(format!(
                "codebook_size disagrees between stages: vq {} vs ar {}",
                self.vq.codebook_size, self.ar.codebook_size
            )));
        }
        if self.ar.num_classes != self.vq.num_classes {
            return Err(Error::Config(format!(
                "num_classes disagrees between stages: vq {} vs ar {}",
                self.vq.num_classes, self.ar.num_classes
            )));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// A copy with the VQ channel count resolved from the dataset.
    pub fn with_channels(&self, d: usize) -> Result<Self> {
        let mut out = self.clone();
        if out.vq.num_channels == 0 {
            out.vq.num_channels = d;
        } else if out.vq.num_channels != d {
            return Err(Error::Config(format!(
                "config expects {} channels but the data has {d}",
                out.vq.num_channels
            )));
        }
        out.vq.validate()?;
        Ok(out)
    }
}
