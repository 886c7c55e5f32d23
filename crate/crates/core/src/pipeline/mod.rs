//! Model bundle, training, sampling, checkpoints and evaluation.

mod checkpoint;
mod eval;
mod sample;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use eval::{eval_run, initial_instruction, EvalOptions};
pub use sample::{
    enhance, enhance_batch, iterative_enhance, AttentionExport, AttentionMap, EnhancementJob, IterationRecord,
    SampleOutput,
};
pub use train::{
    train_codec, train_loop, train_step, validation_mse, LogRecord, LoopOptions, StepStats, TrainData, TrainSummary,
};

use crate::codec::{Codec, ImageEncoder};
use crate::config::{Config, DataConfig, DescriberKind, InstructConfig};
use crate::datagen::{generate_dataset, PairedSample};
use crate::denoiser::{AttentionRecord, Denoiser};
use crate::diffusion::{ClampRange, NoiseSchedule};
use crate::error::{Error, Result};
use crate::instruct::{Describer, ExternalDescriber, FallbackDescriber, HeuristicDescriber, TextEncoder, TokenBatch};
use crate::ipfm::{IpfmOutput, IpfmStack};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::rng::{child_rng, tag};

pub const CODEC: &str = "codec";
pub const IMAGE_ENCODER: &str = "image_encoder";
pub const UNET: &str = "unet";
pub const CONTROL: &str = "control";
pub const IPFM: &str = "ipfm";
pub const TEXT: &str = "text";

/// Parameter groups updated when the backbone is frozen.
pub const FROZEN_BACKBONE_TRAINABLE: [&str; 3] = [IPFM, CONTROL, IMAGE_ENCODER];

/// Scalar statistics of the codec latents over the training set. Latents are
/// standardized with `mean`/`std` before diffusion; `min`/`max` bound the
/// sampler's clamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl LatentStats {
    pub fn measure(latents: &[f32]) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::InvalidArgument("no latents to measure".into()));
        }
        let n = latents.len() as f64;
        let mean = latents.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = latents.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = latents
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        Ok(Self {
            mean,
            std: var.sqrt().max(1e-6),
            min,
            max,
        })
    }

    pub fn normalize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean as f32, self.std as f32);
        z.map(|v| (v - m) / s)
    }

    pub fn denormalize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean as f32, self.std as f32);
        z.map(|v| v * s + m)
    }

    /// Clamp range in standardized units.
    pub fn clamp(&self) -> ClampRange {
        ClampRange {
            min: (self.min - self.mean) / self.std,
            max: (self.max - self.mean) / self.std,
        }
    }
}

/// Every network of the method over one parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: Config,
    pub store: ParamStore<f32>,
    pub codec: Codec,
    pub image_encoder: ImageEncoder,
    pub text: TextEncoder,
    pub ipfm: IpfmStack,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    /// Set once the codec has been fitted (or the data measured).
    pub latent_stats: Option<LatentStats>,
    /// Diffusion training steps taken.
    pub step: u64,
}

impl ModelBundle {
    /// Fresh bundle; each component draws its initialization from its own
    /// stream of `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, &mut child_rng(seed, tag::INIT, 0), CODEC, &config.codec)?;
        let image_encoder = ImageEncoder::new(
            &mut store,
            &mut child_rng(seed, tag::INIT, 1),
            IMAGE_ENCODER,
            &config.codec,
            config.image_encoder_width,
        )?;
        let text = TextEncoder::new(
            &mut store,
            &mut child_rng(seed, tag::INIT, 2),
            TEXT,
            config.ipfm.dim,
            &config.instruct.text_encoder,
        )?;
        let ipfm = IpfmStack::new(&mut store, &mut child_rng(seed, tag::INIT, 3), IPFM, &config.ipfm)?;
        let denoiser = Denoiser::new(
            &mut store,
            &mut child_rng(seed, tag::INIT, 4),
            &config.unet,
            config.codec.c,
            config.ipfm.dim,
        )?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        let mut bundle = Self {
            config,
            store,
            codec,
            image_encoder,
            text,
            ipfm,
            denoiser,
            schedule,
            latent_stats: None,
            step: 0,
        };
        bundle.apply_freezing();
        Ok(bundle)
    }

    /// Trainable flags for diffusion training. The codec is always frozen
    /// (it is fitted beforehand); with `freeze_backbone` only the fusion
    /// stack, the control branch and the image encoder stay trainable.
    pub fn apply_freezing(&mut self) {
        if self.config.train.freeze_backbone {
            self.store.set_all_trainable(false);
            for p in FROZEN_BACKBONE_TRAINABLE {
                self.store.set_trainable_prefix(&format!("{p}."), true);
            }
        } else {
            self.store.set_all_trainable(true);
            self.store.set_trainable_prefix(&format!("{CODEC}."), false);
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Parameters outside the codec, which stands in for the pretrained
    /// autoencoder.
    pub fn model_parameters(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with(&format!("{CODEC}.")))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn latent_stats(&self) -> Result<LatentStats> {
        self.latent_stats
            .ok_or_else(|| Error::InvalidArgument("latent statistics missing; fit the codec first".into()))
    }

    /// `p_s` for a batch of encoded instructions.
    pub(crate) fn prior<'s>(
        &self,
        g: &mut Graph<'s, f32>,
        e_t: Var,
        keep: &Tensor<f32>,
        ts: &[usize],
    ) -> Result<IpfmOutput<f32>> {
        self.ipfm.forward(g, e_t, keep, ts)
    }

    /// `ε_θ(z_t, t, z_l, p_s)` with text encoding, fusion and the denoiser
    /// in one graph.
    pub(crate) fn eps_full<'s>(
        &self,
        g: &mut Graph<'s, f32>,
        z_t: Var,
        ts: &[usize],
        z_l: Var,
        tokens: &TokenBatch,
        record: &mut Vec<AttentionRecord<f32>>,
    ) -> Result<(Var, IpfmOutput<f32>)> {
        let e_t = self.text.forward(g, tokens)?;
        let keep = tokens.keep::<f32>();
        let prior = self.prior(g, e_t, &keep, ts)?;
        let eps = self.denoiser.eps_theta(g, z_t, ts, z_l, prior.prior, record)?;
        Ok((eps, prior))
    }
}

/// Offset between the training and validation scene seeds.
const VALIDATION_SEED_OFFSET: u64 = 0x5eed_0000_0000;

/// Synthetic training and validation pairs for `data`. The two splits come
/// from unrelated seeds and never share a scene.
pub fn synthetic_splits(data: &DataConfig) -> (Vec<PairedSample>, Vec<PairedSample>) {
    (
        generate_dataset(data.train_pairs, data.size, data.seed),
        generate_dataset(data.val_pairs, data.size, data.seed.wrapping_add(VALIDATION_SEED_OFFSET)),
    )
}

/// The configured describer. The external one falls back to the heuristic
/// when the service fails.
pub fn build_describer(cfg: &InstructConfig) -> Result<Box<dyn Describer>> {
    match (cfg.describer, &cfg.external) {
        (DescriberKind::External, Some(ext)) => {
            let primary = ExternalDescriber::new(ext.clone()).map_err(|e| Error::Config(e.to_string()))?;
            Ok(Box::new(FallbackDescriber {
                primary,
                fallback: HeuristicDescriber,
            }))
        }
        (DescriberKind::External, None) => Err(Error::Config("describer 'external' needs instruct.external".into())),
        (DescriberKind::Heuristic, _) => Ok(Box::new(HeuristicDescriber)),
    }
}
