//! PSNR, SSIM and multi-seed evaluation reports.

use serde::{Deserialize, Serialize};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};

/// PSNR in dB; identical inputs give `Infinite`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

/// JSON form: `{"db": number | null, "infinite": bool}`.
impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PsnrRepr::from(*self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PsnrRepr::deserialize(d)?;
        match (r.db, r.infinite) {
            (_, true) => Ok(Psnr::Infinite),
            (Some(v), false) => Ok(Psnr::Finite(v)),
            (None, false) => Err(serde::de::Error::custom("finite psnr without a value")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PsnrRepr {
    db: Option<f64>,
    infinite: bool,
}

impl From<Psnr> for PsnrRepr {
    fn from(p: Psnr) -> Self {
        match p {
            Psnr::Finite(v) => Self { db: Some(v), infinite: false },
            Psnr::Infinite => Self { db: None, infinite: true },
        }
    }
}

pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<Psnr> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", format!("{} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(20.0 * peak.log10() - 10.0 * mse.log10()))
}

fn same_shape(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

fn to_f64(img: &ImageTensor) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// PSNR with peak 1.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Psnr> {
    same_shape("psnr", a, b)?;
    psnr_values(&to_f64(a), &to_f64(b), 1.0)
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions and channels of CHW planes.
pub fn ssim_values(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize, peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != channels * h * w {
        return Err(Error::shape("ssim", format!("{} vs {} values for {channels}x{h}x{w}", a.len(), b.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let taps = ssim_taps();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&sq_a, h, w, &taps);
        let e_bb = filter_valid(&sq_b, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with peak 1: 11x11 Gaussian window, sigma 1.5.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a == b {
        return Ok(1.0);
    }
    ssim_values(&to_f64(a), &to_f64(b), 3, a.height(), a.width(), 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub seed: u64,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub sampling_steps: usize,
    pub iterations: usize,
    pub image_size: usize,
    pub note: String,
}

/// Per-image scores, per-seed means, and their mean and population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub per_seed: Vec<SeedSummary>,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    /// Scores of the unprocessed input against the reference.
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub provenance: Provenance,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalReport {
    /// Aggregate scores. Records are ordered by (seed, id) first so the
    /// report does not depend on evaluation order.
    pub fn from_scores(
        mut per_image: Vec<ImageScore>,
        input_scores: &[(Psnr, f64)],
        provenance: Provenance,
    ) -> Self {
        per_image.sort_by(|a, b| (a.seed, &a.id).cmp(&(b.seed, &b.id)));
        let mut per_seed: Vec<SeedSummary> = Vec::new();
        let mut i = 0;
        while i < per_image.len() {
            let seed = per_image[i].seed;
            let j = per_image[i..].iter().position(|s| s.seed != seed).map_or(per_image.len(), |k| i + k);
            let group = &per_image[i..j];
            let psnrs: Vec<f64> = group.iter().map(|s| s.psnr.db()).collect();
            let ssims: Vec<f64> = group.iter().map(|s| s.ssim).collect();
            per_seed.push(SeedSummary {
                seed,
                mean_psnr: mean_std(&psnrs).0,
                mean_ssim: mean_std(&ssims).0,
            });
            i = j;
        }
        let (mean_psnr, std_psnr) = mean_std(&per_seed.iter().map(|s| s.mean_psnr).collect::<Vec<_>>());
        let (mean_ssim, std_ssim) = mean_std(&per_seed.iter().map(|s| s.mean_ssim).collect::<Vec<_>>());
        let input_psnr = mean_std(&input_scores.iter().map(|s| s.0.db()).collect::<Vec<_>>()).0;
        let input_ssim = mean_std(&input_scores.iter().map(|s| s.1).collect::<Vec<_>>()).0;
        Self {
            per_image,
            per_seed,
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
            input_psnr,
            input_ssim,
            provenance,
        }
    }
}
