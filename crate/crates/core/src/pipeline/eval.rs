use super::sample::enhance_batch;
use super::ModelBundle;
use crate::codec::ImageTensor;
use crate::datagen::PairedSample;
use crate::error::{Error, Result};
use crate::instruct::{synthesize_instruction, Describer, FacetMask, Instruction};
use crate::metrics::{psnr, ssim, EvalReport, ImageScore, Provenance};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Passes per image; one report per pass is returned.
    pub k: usize,
    pub note: String,
}

impl EvalOptions {
    pub fn from_config(bundle: &ModelBundle, seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            steps: bundle.config.sample.steps,
            k: bundle.config.sample.k,
            note: String::new(),
        }
    }
}

/// First-pass instruction for an evaluation pair: the template under `mask`
/// when the scene is known, otherwise whatever `describer` reads off `y`.
pub fn initial_instruction(sample: &PairedSample, mask: FacetMask, describer: &dyn Describer) -> Instruction {
    match &sample.scene {
        Some(scene) => synthesize_instruction(scene, mask),
        None => describer
            .describe(&sample.y, &Instruction::manual(""))
            .unwrap_or_else(|_| Instruction::manual("")),
    }
}

/// Enhance every pair under every seed for `k` passes and score each pass
/// against `x0`. Image `i` under seed `s` samples from stream `(s, i)` in
/// every pass, so pass `j` of this run equals pass `j` of a single-image
/// `iterative_enhance` up to the key. Returns reports for passes `1..=k`.
pub fn eval_run(
    bundle: &ModelBundle,
    samples: &[PairedSample],
    opts: &EvalOptions,
    describer: &dyn Describer,
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() || opts.seeds.is_empty() || opts.k == 0 {
        return Err(Error::InvalidArgument("evaluation needs pairs, seeds and k >= 1".into()));
    }
    let mask = bundle.config.instruct.facet_mask;
    let initial: Vec<Instruction> = samples.iter().map(|s| initial_instruction(s, mask, describer)).collect();
    let mut scores: Vec<Vec<ImageScore>> = vec![Vec::new(); opts.k];
    let batch = bundle.config.sample.batch;
    for &seed in &opts.seeds {
        for (c, chunk) in samples.chunks(batch).enumerate() {
            let base = c * batch;
            let ys: Vec<ImageTensor> = chunk.iter().map(|s| s.y.clone()).collect();
            let keys: Vec<(u64, u64)> = (0..chunk.len()).map(|i| (seed, (base + i) as u64)).collect();
            let mut instructions = initial[base..base + chunk.len()].to_vec();
            let mut previous: Vec<ImageTensor> = Vec::new();
            for pass in 0..opts.k {
                if pass > 0 {
                    instructions = instructions
                        .iter()
                        .zip(&previous)
                        .map(|(prev, img)| describer.describe(img, prev).unwrap_or_else(|_| prev.clone()))
                        .collect();
                }
                let out = enhance_batch(bundle, &ys, &instructions, &keys, opts.steps, false)?;
                previous.clear();
                for (s, o) in chunk.iter().zip(out) {
                    scores[pass].push(ImageScore {
                        id: s.id.clone(),
                        seed,
                        psnr: psnr(&o.image, &s.x0)?,
                        ssim: ssim(&o.image, &s.x0)?,
                    });
                    previous.push(o.image);
                }
            }
        }
    }
    let input: Vec<_> = samples
        .iter()
        .map(|s| Ok((psnr(&s.y, &s.x0)?, ssim(&s.y, &s.x0)?)))
        .collect::<Result<_>>()?;
    let size = samples[0].x0.width();
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(j, per_image)| {
            EvalReport::from_scores(
                per_image,
                &input,
                Provenance {
                    config_hash: bundle.config_hash(),
                    checkpoint_hash: bundle.checkpoint_hash(),
                    sampling_steps: opts.steps,
                    iterations: j + 1,
                    image_size: size,
                    note: opts.note.clone(),
                },
            )
        })
        .collect())
}
