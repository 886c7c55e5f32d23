use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::{LatentStats, ModelBundle, CODEC};
use crate::codec::{images_to_batch, ImageTensor};
use crate::datagen::PairedSample;
use crate::diffusion::q_sample_batch;
use crate::error::{Error, Result};
use crate::instruct::{synthesize_instruction, Describer, HeuristicDescriber, Instruction, TokenBatch, Tokenizer};
use crate::numcore::{Graph, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{child_rng, tag};

/// Training pairs with everything the frozen parts produce precomputed:
/// standardized `z_0`, the low-light image and the instruction tokens.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub z0: Vec<Tensor<f32>>,
    pub y: Vec<Tensor<f32>>,
    pub instructions: Vec<Instruction>,
    pub tokens: Vec<Vec<u32>>,
}

impl TrainData {
    /// Encode `x_0` with the codec and build the instruction for each pair.
    /// Pairs with scene metadata use the template provider under the
    /// configured facet mask; others are described from `x_0`. Measures the
    /// latent statistics if the bundle has none yet.
    pub fn prepare(bundle: &mut ModelBundle, samples: &[PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training pairs".into()));
        }
        let mut raw = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let x: Vec<ImageTensor> = chunk.iter().map(|s| s.x0.clone()).collect();
            let z = bundle.codec.encode(&bundle.store, &x)?;
            for i in 0..chunk.len() {
                raw.push(z.narrow0(i, 1)?);
            }
        }
        if bundle.latent_stats.is_none() {
            let all: Vec<f32> = raw.iter().flat_map(|t| t.data().iter().copied()).collect();
            bundle.latent_stats = Some(LatentStats::measure(&all)?);
        }
        let stats = bundle.latent_stats()?;
        let mask = bundle.config.instruct.facet_mask;
        let heuristic = HeuristicDescriber;
        let tok = Tokenizer::shared();
        let mut instructions = Vec::with_capacity(samples.len());
        for s in samples {
            let ins = match &s.scene {
                Some(scene) => synthesize_instruction(scene, mask),
                None => heuristic
                    .describe(&s.x0, &Instruction::manual(""))
                    .map_err(|e| Error::Dataset(e.to_string()))?,
            };
            instructions.push(ins);
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            z0: raw.iter().map(|z| stats.normalize(z)).collect(),
            y: samples.iter().map(|s| s.y.to_tensor()).collect(),
            tokens: instructions.iter().map(|i| tok.tokenize(&i.text)).collect(),
            instructions,
        })
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, TokenBatch)> {
        let z0 = Tensor::cat0(&idx.iter().map(|&i| self.z0[i].clone()).collect::<Vec<_>>())?;
        let y = Tensor::stack(&idx.iter().map(|&i| self.y[i].clone()).collect::<Vec<_>>())?;
        let tokens = TokenBatch::new(&idx.iter().map(|&i| self.tokens[i].clone()).collect::<Vec<_>>())?;
        Ok((z0, y, tokens))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mse: Option<f64>,
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// One update: sample a batch, `t ~ U{1..T}` and `ε ~ N(0, I)`, noise `z_0`,
/// and regress `ε` with `ε_θ(z_t, t, E_I(y), S(F_L(instruction)))`. Batch
/// and noise come from streams keyed by `(seed, step)`, so a resumed run
/// repeats the uninterrupted one.
pub fn train_step(bundle: &mut ModelBundle, data: &TrainData, opt: &mut AdamW) -> Result<StepStats> {
    let step = bundle.step;
    let seed = bundle.config.train.seed;
    let b = bundle.config.train.batch;
    let mut brng = child_rng(seed, tag::TRAIN_BATCH, step);
    let idx: Vec<usize> = (0..b).map(|_| brng.random_range(0..data.len())).collect();
    let (z0, y, tokens) = data.batch(&idx)?;
    let mut nrng = child_rng(seed, tag::TRAIN_NOISE, step);
    let t_max = bundle.schedule.len();
    let ts: Vec<usize> = (0..b).map(|_| nrng.random_range(1..=t_max)).collect();
    let eps = randn(z0.shape(), &mut nrng);
    let z_t = q_sample_batch(&z0, &ts, &eps, &bundle.schedule)?;

    let grads = {
        let mut g = Graph::new(&bundle.store);
        let zv = g.constant(z_t);
        let yv = g.constant(y);
        let z_l = bundle.image_encoder.forward(&mut g, yv)?;
        let (eps_hat, _) = bundle.eps_full(&mut g, zv, &ts, z_l, &tokens, &mut Vec::new())?;
        let target = g.constant(eps);
        let loss = g.mse(eps_hat, target)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                source: Box::new(Error::NonFinite { op: "loss" }),
            });
        }
        (g.backward(loss)?, value)
    };
    opt.update(&mut bundle.store, &grads.0).map_err(|e| Error::Training {
        step,
        source: Box::new(e),
    })?;
    bundle.step += 1;
    Ok(StepStats { step, loss: grads.1 })
}

/// Mean per-element ε-MSE over `data` at timesteps and noise fixed by
/// `(seed, index)`, so successive calls are comparable.
pub fn validation_mse(bundle: &ModelBundle, data: &TrainData, seed: u64) -> Result<f64> {
    let t_max = bundle.schedule.len();
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(bundle.config.sample.batch) {
        let (z0, y, tokens) = data.batch(chunk)?;
        let per = z0.len() / chunk.len();
        let mut ts = Vec::new();
        let mut eps = Vec::with_capacity(z0.len());
        for &i in chunk {
            let mut r = child_rng(seed, tag::VALIDATION, i as u64);
            ts.push(r.random_range(1..=t_max));
            eps.extend((0..per).map(|_| r.sample::<f32, _>(StandardNormal)));
        }
        let eps = Tensor::new(z0.shape(), eps)?;
        let z_t = q_sample_batch(&z0, &ts, &eps, &bundle.schedule)?;
        let mut g = Graph::inference(&bundle.store);
        let zv = g.constant(z_t);
        let yv = g.constant(y);
        let z_l = bundle.image_encoder.forward(&mut g, yv)?;
        let (eps_hat, _) = bundle.eps_full(&mut g, zv, &ts, z_l, &tokens, &mut Vec::new())?;
        let e = g.value(eps_hat);
        total += e
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        count += e.len();
    }
    Ok(total / count as f64)
}

/// Where and how often the loop reports.
#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Checkpoints go to `<dir>/step_<n>.ckpt` and `<dir>/final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Receives one JSON line per step.
    pub log: Option<&'a mut dyn Write>,
    pub validation: Option<&'a TrainData>,
    /// Stop after this many steps even if the configured count is larger.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// Mean loss over the final tenth of the run.
    pub tail_loss: Option<f64>,
    pub val_mse: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run `train_step` from `bundle.step` to `config.train.steps`.
pub fn train_loop(bundle: &mut ModelBundle, data: &TrainData, opt: &mut AdamW, mut opts: LoopOptions) -> Result<TrainSummary> {
    let cfg = bundle.config.train.clone();
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let tail_from = end - end / 10;
    let mut summary = TrainSummary {
        steps: bundle.step,
        first_loss: None,
        last_loss: None,
        tail_loss: None,
        val_mse: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut tail = (0.0, 0usize);
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while bundle.step < end {
        let stats = train_step(bundle, data, opt)?;
        summary.first_loss.get_or_insert(stats.loss);
        summary.last_loss = Some(stats.loss);
        if stats.step >= tail_from {
            tail.0 += stats.loss;
            tail.1 += 1;
        }
        let done = bundle.step;
        let mut val_mse = None;
        if let Some(val) = opts.validation {
            if cfg.val_every > 0 && (done % cfg.val_every == 0 || done == end) {
                let v = validation_mse(bundle, val, cfg.seed)?;
                summary.val_mse.push((done, v));
                val_mse = Some(v);
            }
        }
        if let Some(log) = opts.log.as_deref_mut() {
            let rec = LogRecord {
                step: stats.step,
                loss: stats.loss,
                lr: cfg.lr,
                val_mse,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::Training {
                step: stats.step,
                source: Box::new(Error::io("training log", e)),
            })?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != end {
                let path = dir.join(format!("step_{done:06}.ckpt"));
                save_checkpoint(bundle, Some(opt), &path).map_err(|e| Error::Training {
                    step: done,
                    source: Box::new(e),
                })?;
                summary.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(bundle, Some(opt), &path)?;
        summary.checkpoints.push(path);
    }
    summary.steps = bundle.step;
    summary.tail_loss = (tail.1 > 0).then(|| tail.0 / tail.1 as f64);
    Ok(summary)
}

/// Fit the learned codec by L2 reconstruction of the normal-light images,
/// then measure latent statistics over them. Returns the final-batch
/// reconstruction MSE (0 for the identity codec).
pub fn train_codec(bundle: &mut ModelBundle, samples: &[PairedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("no pairs to fit the codec on".into()));
    }
    let cfg = bundle.config.codec_train.clone();
    let mut last = 0.0;
    if bundle.config.codec.mode == crate::codec::CodecMode::Learned {
        bundle.store.set_all_trainable(false);
        bundle.store.set_trainable_prefix(&format!("{CODEC}."), true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let seed = bundle.config.train.seed;
        for step in 0..cfg.steps {
            let mut r = child_rng(seed, tag::CODEC, step);
            let batch: Vec<ImageTensor> = (0..cfg.batch)
                .map(|_| samples[r.random_range(0..samples.len())].x0.clone())
                .collect();
            let x = images_to_batch(&batch)?;
            let (grads, loss) = {
                let mut g = Graph::new(&bundle.store);
                let xv = g.constant(x);
                let z = bundle.codec.encode_graph(&mut g, xv)?;
                let xr = bundle.codec.decode_graph(&mut g, z)?;
                let loss = g.mse(xr, xv)?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Training {
                        step,
                        source: Box::new(Error::NonFinite { op: "codec loss" }),
                    });
                }
                (g.backward(loss)?, value)
            };
            opt.update(&mut bundle.store, &grads)?;
            last = loss;
        }
        bundle.apply_freezing();
    }
    bundle.latent_stats = None;
    TrainData::prepare(bundle, samples)?;
    Ok(last)
}
