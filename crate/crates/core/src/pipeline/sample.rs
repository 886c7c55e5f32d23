use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::ModelBundle;
use crate::codec::{images_to_batch, ImageTensor};
use crate::denoiser::AttentionRecord;
use crate::diffusion::{ddpm_step, spaced_steps};
use crate::error::{Error, Result};
use crate::instruct::{Describer, Instruction, TokenBatch, Tokenizer};
use crate::numcore::{Graph, Tensor};
use crate::rng::{child_rng, tag};

/// Token-to-pixel relevance at one U-Net level, averaged over the sampling
/// steps. Row `i` belongs to instruction token `i` and sums to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMap {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<Vec<f32>>,
}

impl AttentionMap {
    /// Grayscale rendering of the token-averaged map at `size x size`
    /// (nearest neighbour), scaled so the peak is white.
    pub fn heatmap(&self, width: usize, height: usize) -> ImageTensor {
        let n = self.height * self.width;
        let mut mean = vec![0.0f32; n];
        for r in &self.rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / self.rows.len() as f32;
            }
        }
        let peak = mean.iter().copied().fold(0.0f32, f32::max).max(1e-12);
        ImageTensor::from_fn(width, height, |_, y, x| {
            let (sy, sx) = (y * self.height / height, x * self.width / width);
            mean[sy * self.width + sx] / peak
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionExport {
    pub tokens: Vec<String>,
    pub maps: Vec<AttentionMap>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: ImageTensor,
    pub attention: Option<AttentionExport>,
}

struct RelevanceAcc {
    n_tokens: Vec<usize>,
    /// `[image][level] -> (h, w, level, rows summed over steps)`.
    sums: Vec<Vec<(usize, usize, usize, Vec<Vec<f64>>)>>,
    steps: usize,
}

impl RelevanceAcc {
    fn new(n_tokens: Vec<usize>) -> Self {
        let b = n_tokens.len();
        Self {
            n_tokens,
            sums: vec![Vec::new(); b],
            steps: 0,
        }
    }

    /// `R[j, p] = Σ_q A_fusion[q, n_q + j] · A_unet[p, q]`, row-normalized.
    /// Without fusion attention every token gets the query-averaged map.
    fn add(&mut self, unet: &[AttentionRecord<f32>], fusion: Option<&Tensor<f32>>) {
        self.steps += 1;
        for (li, rec) in unet.iter().enumerate() {
            let s = rec.weights.shape();
            let (hw, nq) = (s[1], s[2]);
            for (b, sums) in self.sums.iter_mut().enumerate() {
                let nt = self.n_tokens[b];
                if sums.len() <= li {
                    sums.push((rec.height, rec.width, rec.level, vec![vec![0.0; hw]; nt]));
                }
                let u = &rec.weights.data()[b * hw * nq..(b + 1) * hw * nq];
                for j in 0..nt {
                    let mut row = vec![0.0f64; hw];
                    for (p, r) in row.iter_mut().enumerate() {
                        *r = (0..nq)
                            .map(|q| {
                                let a = match fusion {
                                    Some(f) => {
                                        let fs = f.shape();
                                        f.data()[(b * fs[1] + q) * fs[2] + nq + j] as f64
                                    }
                                    None => 1.0 / nq as f64,
                                };
                                a * u[p * nq + q] as f64
                            })
                            .sum();
                    }
                    let total: f64 = row.iter().sum();
                    for (acc, r) in sums[li].3[j].iter_mut().zip(&row) {
                        *acc += if total > 0.0 { r / total } else { 1.0 / hw as f64 };
                    }
                }
            }
        }
    }

    fn finish(self, tokens: Vec<Vec<String>>) -> Vec<AttentionExport> {
        let steps = self.steps.max(1) as f64;
        self.sums
            .into_iter()
            .zip(tokens)
            .map(|(levels, tokens)| AttentionExport {
                tokens,
                maps: levels
                    .into_iter()
                    .map(|(height, width, level, rows)| AttentionMap {
                        level,
                        height,
                        width,
                        rows: rows
                            .into_iter()
                            .map(|r| r.into_iter().map(|v| (v / steps) as f32).collect())
                            .collect(),
                    })
                    .collect(),
            })
            .collect()
    }
}

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// One sampling pass over a batch of equally sized images: `z_T` from
/// the stream `(seed, key)` of each image, `steps` spaced ancestral steps of
/// `ε_θ(z_t, t, E_I(y), S(F_L(instruction)))`, then `x̂ = D(z_0)`.
pub fn enhance_batch(
    bundle: &ModelBundle,
    ys: &[ImageTensor],
    instructions: &[Instruction],
    noise: &[(u64, u64)],
    steps: usize,
    with_attention: bool,
) -> Result<Vec<SampleOutput>> {
    let b = ys.len();
    if b == 0 || instructions.len() != b || noise.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} images, {} instructions, {} noise keys",
            instructions.len(),
            noise.len()
        )));
    }
    let (w, h) = (ys[0].width(), ys[0].height());
    if ys.iter().any(|y| y.width() != w || y.height() != h) {
        return Err(Error::InvalidArgument("images in one batch must share a size".into()));
    }
    let [c, lh, lw] = bundle.config.codec.latent_shape(h, w)?;
    let stats = bundle.latent_stats()?;
    let spacing = spaced_steps(bundle.schedule.len(), steps)?;
    let tok = Tokenizer::shared();
    let seqs: Vec<Vec<u32>> = instructions.iter().map(|i| tok.tokenize(&i.text)).collect();
    let tokens = TokenBatch::new(&seqs)?;
    let keep = tokens.keep::<f32>();

    // Constant across the reverse loop: z_l and e_t.
    let (z_l, e_t) = {
        let mut g = Graph::inference(&bundle.store);
        let yv = g.constant(images_to_batch(ys)?);
        let z_l = bundle.image_encoder.forward(&mut g, yv)?;
        let e_t = bundle.text.forward(&mut g, &tokens)?;
        (g.value(z_l).clone(), g.value(e_t).clone())
    };
    if z_l.shape() != [b, c, lh, lw] {
        return Err(Error::shape("enhance", format!("z_l {:?} vs latent {:?}", z_l.shape(), [c, lh, lw])));
    }
    let per = c * lh * lw;
    let mut rngs: Vec<ChaCha8Rng> = noise.iter().map(|&(s, k)| child_rng(s, tag::SAMPLE, k)).collect();
    let mut z = Tensor::new(&[b, c, lh, lw], rngs.iter_mut().flat_map(|r| randn(per, r)).collect())?;
    let mut acc = with_attention.then(|| RelevanceAcc::new(tokens.lengths.clone()));
    for (t, t_prev) in spacing.pairs() {
        let ts = vec![t; b];
        let mut record = Vec::new();
        let (eps, fusion) = {
            let mut g = Graph::inference(&bundle.store);
            let zv = g.constant(z.clone());
            let lv = g.constant(z_l.clone());
            let ev = g.constant(e_t.clone());
            let prior = bundle.prior(&mut g, ev, &keep, &ts)?;
            let eps = bundle.denoiser.eps_theta(&mut g, zv, &ts, lv, prior.prior, &mut record)?;
            (g.value(eps).clone(), prior.attention.last().cloned())
        };
        if let Some(acc) = acc.as_mut() {
            acc.add(&record, fusion.as_ref());
        }
        let n = Tensor::new(z.shape(), rngs.iter_mut().flat_map(|r| randn(per, r)).collect())?;
        z = ddpm_step(&z, t, t_prev, &eps, &bundle.schedule, &n, Some(stats.clamp()))?;
    }
    let images = bundle.codec.decode(&bundle.store, &stats.denormalize(&z))?;
    let attention = match acc {
        Some(acc) => {
            let labels = seqs.iter().map(|s| s.iter().map(|&id| tok.token_text(id)).collect()).collect();
            acc.finish(labels).into_iter().map(Some).collect()
        }
        None => vec![None; b],
    };
    Ok(images
        .into_iter()
        .zip(attention)
        .map(|(image, attention)| SampleOutput { image, attention })
        .collect())
}

/// Single-image enhancement with noise stream `(seed, 0)`.
pub fn enhance(
    bundle: &ModelBundle,
    y: &ImageTensor,
    instruction: &Instruction,
    seed: u64,
    steps: usize,
) -> Result<ImageTensor> {
    let out = enhance_batch(bundle, std::slice::from_ref(y), std::slice::from_ref(instruction), &[(seed, 0)], steps, false)?;
    Ok(out.into_iter().next().expect("one output").image)
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    /// 1-based pass index.
    pub iteration: usize,
    pub instruction: Instruction,
    pub seed: u64,
    #[serde(skip)]
    pub image: ImageTensor,
    #[serde(skip)]
    pub attention: Option<AttentionExport>,
    /// Set when the describer failed and the previous instruction was reused.
    pub warning: Option<String>,
    pub elapsed_ms: u64,
}

/// A multi-pass enhancement: one record per pass.
#[derive(Clone, Debug, Serialize)]
pub struct EnhancementJob {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint_hash: String,
    pub iterations: Vec<IterationRecord>,
}

/// `k` enhancement passes over the same `y`. Pass 1 uses `initial`; pass
/// `j >= 2` asks `describer` about `x̂_{j-1}`. A describer failure keeps the
/// previous instruction and records a warning. Every pass samples with the
/// same seed, so passes differ only through their instructions.
pub fn iterative_enhance(
    bundle: &ModelBundle,
    y: &ImageTensor,
    initial: &Instruction,
    k: usize,
    seed: u64,
    steps: usize,
    describer: &dyn Describer,
) -> Result<EnhancementJob> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut iterations: Vec<IterationRecord> = Vec::with_capacity(k);
    for j in 1..=k {
        let start = Instant::now();
        let (instruction, warning) = match iterations.last() {
            None => (initial.clone(), None),
            Some(prev) => match describer.describe(&prev.image, &prev.instruction) {
                Ok(ins) => (ins, None),
                Err(e) => {
                    let msg = format!("describer failed, reusing previous instruction: {e}");
                    eprintln!("warning: pass {j}: {msg}");
                    (prev.instruction.clone(), Some(msg))
                }
            },
        };
        let out = enhance_batch(
            bundle,
            std::slice::from_ref(y),
            std::slice::from_ref(&instruction),
            &[(seed, 0)],
            steps,
            true,
        )?;
        let out = out.into_iter().next().expect("one output");
        iterations.push(IterationRecord {
            iteration: j,
            instruction,
            seed,
            image: out.image,
            attention: out.attention,
            warning,
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(EnhancementJob {
        width: y.width(),
        height: y.height(),
        k,
        seed,
        steps,
        checkpoint_hash: bundle.checkpoint_hash(),
        iterations,
    })
}
