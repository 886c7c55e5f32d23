//! Full configuration tree. Every field has a default; unknown keys are
//! rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::denoiser::UNetConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::instruct::{ExternalVlmConfig, FacetMask, TextEncoderConfig};
use crate::ipfm::IpfmConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriberKind {
    /// Image statistics only.
    #[default]
    Heuristic,
    /// External VLM endpoint, falling back to the heuristic on failure.
    External,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstructConfig {
    /// Describer used from the second enhancement pass on, and by the
    /// instruction endpoint.
    pub describer: DescriberKind,
    /// Facets kept by the template provider, in training and evaluation.
    pub facet_mask: FacetMask,
    pub external: Option<ExternalVlmConfig>,
    pub text_encoder: TextEncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Train only the fusion stack, control branch and image encoder.
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Validation ε-MSE every this many steps; 0 disables.
    pub val_every: u64,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            freeze_backbone: false,
            seed: 0,
            val_every: 500,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Reconstruction pretraining of the learned codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Spaced sampler steps.
    pub steps: usize,
    /// Enhancement passes.
    pub k: usize,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            k: 2,
            batch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square training resolution.
    pub size: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 64,
            train_pairs: 512,
            val_pairs: 64,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    /// Jobs waiting behind the running one before requests get 409.
    pub queue_depth: usize,
    /// Larger inputs are center-cropped to this side.
    pub max_side: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            queue_depth: 4,
            max_side: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub ipfm: IpfmConfig,
    pub codec: CodecConfig,
    /// Width of the first stage of the low-light image encoder.
    pub image_encoder_width: usize,
    pub instruct: InstructConfig,
    pub train: TrainConfig,
    pub codec_train: CodecTrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub serve: ServeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            ipfm: IpfmConfig::default(),
            codec: CodecConfig::default(),
            image_encoder_width: 16,
            instruct: InstructConfig::default(),
            train: TrainConfig::default(),
            codec_train: CodecTrainConfig::default(),
            sample: SampleConfig::default(),
            data: DataConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.ipfm.validate()?;
        self.codec.validate()?;
        if self.train.batch == 0 || self.sample.batch == 0 || self.codec_train.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.sample.steps == 0 || self.sample.k == 0 {
            return Err(Error::Config("sample.steps and sample.k must be at least 1".into()));
        }
        if self.sample.steps > self.schedule.num_timesteps {
            return Err(Error::Config(format!(
                "sample.steps {} exceeds {} training timesteps",
                self.sample.steps, self.schedule.num_timesteps
            )));
        }
        if self.image_encoder_width == 0 {
            return Err(Error::Config("image_encoder_width must be positive".into()));
        }
        self.codec.latent_shape(self.data.size, self.data.size)?;
        let div = self.codec.f << (self.unet.levels() - 1);
        if self.data.size % div != 0 {
            return Err(Error::Config(format!(
                "data.size {} must be divisible by {div} (codec factor times U-Net downsampling)",
                self.data.size
            )));
        }
        if self.instruct.describer == DescriberKind::External && self.instruct.external.is_none() {
            return Err(Error::Config("describer 'external' needs instruct.external".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form. Field order is fixed by the type,
    /// so equal configs hash equally.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Desk-scale setup used by the acceptance suite: within 5M parameters
    /// and about ten minutes of training on one core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.unet.base_channels = 32;
        cfg.ipfm.dim = 128;
        cfg.codec.hidden = 8;
        cfg.codec_train.steps = 600;
        cfg
    }
}
