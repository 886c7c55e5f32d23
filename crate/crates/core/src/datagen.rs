//! Procedural paired low/normal-light scenes and paired-folder ingestion.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::instruct::template::{
    Backdrop, Color, Intensity, LightPosition, LightSource, Region, SceneDescriptor, SceneObject, Shape,
};
use crate::rng::{child_rng, tag};

/// `y = clamp(a * x0^gamma + n)`. The noise is Gaussian with std `sigma`,
/// truncated per pixel so the clamp never binds; it is regenerated from
/// `noise_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub gain: f32,
    pub gamma: f32,
    pub sigma: f32,
    pub noise_seed: u64,
}

impl Degradation {
    pub const IDENTITY: Self = Self {
        gain: 1.0,
        gamma: 1.0,
        sigma: 0.0,
        noise_seed: 0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            gain: rng.random_range(0.05..0.4),
            gamma: rng.random_range(1.5..3.0),
            sigma: rng.random_range(0.01..0.05),
            noise_seed: rng.random(),
        }
    }

    fn clean(&self, v: f32) -> f32 {
        self.gain * v.powf(self.gamma)
    }

    /// Per-element noise in CHW order for an image whose clean degraded
    /// values are `clean`.
    fn noise(&self, clean: &[f32]) -> Vec<f32> {
        if self.sigma == 0.0 {
            return vec![0.0; clean.len()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        clean
            .iter()
            .map(|&c| {
                for _ in 0..64 {
                    let n = self.sigma * rng.sample::<f32, _>(StandardNormal);
                    if (0.0..=1.0).contains(&(c + n)) {
                        return n;
                    }
                }
                0.0
            })
            .collect()
    }

    pub fn apply(&self, x0: &ImageTensor) -> ImageTensor {
        let clean: Vec<f32> = x0.data().iter().map(|&v| self.clean(v)).collect();
        let noise = self.noise(&clean);
        let data = clean.iter().zip(&noise).map(|(c, n)| (c + n).clamp(0.0, 1.0)).collect();
        ImageTensor::new(x0.width(), x0.height(), data).expect("same size")
    }

    /// `clamp((y - n) / a)^(1/gamma)` with the recorded noise replayed.
    pub fn invert(&self, y: &ImageTensor, x0_for_noise: &ImageTensor) -> ImageTensor {
        let clean: Vec<f32> = x0_for_noise.data().iter().map(|&v| self.clean(v)).collect();
        let noise = self.noise(&clean);
        let data = y
            .data()
            .iter()
            .zip(&noise)
            .map(|(&v, &n)| ((v - n) / self.gain).clamp(0.0, 1.0).powf(1.0 / self.gamma))
            .collect();
        ImageTensor::new(y.width(), y.height(), data).expect("same size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub x0: ImageTensor,
    pub y: ImageTensor,
    /// Absent for real datasets.
    pub scene: Option<SceneDescriptor>,
    pub degradation: Option<Degradation>,
}

/// Sidecar metadata written next to each generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub scene: SceneDescriptor,
    pub degradation: Degradation,
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Placed {
    obj: SceneObject,
    cx: f32,
    cy: f32,
    r: f32,
}

impl Placed {
    /// Soft coverage in `[0,1]` at pixel-center coordinates `(px, py)`.
    fn coverage(&self, px: f32, py: f32, soft: f32) -> f32 {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let d = match self.obj.shape {
            Shape::Circle => (dx * dx + dy * dy).sqrt() - self.r,
            Shape::Square => dx.abs().max(dy.abs()) - self.r,
            Shape::Bar => (dx.abs() - 0.55 * self.r).max(dy.abs() - 1.5 * self.r),
        };
        1.0 - smoothstep(-soft, soft, d)
    }
}

fn light_gain(i: Intensity) -> f32 {
    match i {
        Intensity::Bright => 1.0,
        Intensity::Moderate => 0.72,
        Intensity::Soft => 0.48,
    }
}

fn light_tint(s: LightSource) -> [f32; 3] {
    match s {
        LightSource::Window => [0.95, 0.97, 1.0],
        LightSource::Lamp => [1.0, 0.84, 0.62],
        LightSource::Sky => [0.86, 0.93, 1.0],
        LightSource::None => [1.0, 1.0, 1.0],
    }
}

/// Draw a scene descriptor. Window light comes from a side, sky light from
/// above, and sourceless scenes are lit evenly.
pub fn sample_scene(rng: &mut impl Rng) -> SceneDescriptor {
    let light_source = LightSource::ALL[rng.random_range(0..4)];
    let light_position = match light_source {
        LightSource::Window => [LightPosition::Left, LightPosition::Right][rng.random_range(0..2)],
        LightSource::Lamp => LightPosition::ALL[rng.random_range(0..4)],
        LightSource::Sky => LightPosition::Top,
        LightSource::None => LightPosition::Center,
    };
    let intensity = Intensity::ALL[rng.random_range(0..3)];
    let backdrop = Backdrop::ALL[rng.random_range(0..2)];
    let count = rng.random_range(1..=3);
    let mut regions: Vec<Region> = Region::ALL.to_vec();
    // Partial shuffle, then restore left-to-right order for the text.
    for i in 0..count {
        let j = rng.random_range(i..regions.len());
        regions.swap(i, j);
    }
    let mut chosen: Vec<Region> = regions[..count].to_vec();
    chosen.sort_by_key(|r| match r {
        Region::Left => 0,
        Region::Center => 1,
        Region::Right => 2,
    });
    let objects = chosen
        .into_iter()
        .map(|region| SceneObject {
            shape: Shape::ALL[rng.random_range(0..3)],
            color: Color::ALL[rng.random_range(0..8)],
            region,
        })
        .collect();
    SceneDescriptor {
        light_source,
        intensity,
        light_position,
        shadow_direction: light_position.shadow(),
        backdrop,
        objects,
    }
}

/// Render the normal-light image of `scene`. Object placement jitter is
/// drawn from `rng`.
pub fn render_scene(scene: &SceneDescriptor, size: usize, rng: &mut impl Rng) -> ImageTensor {
    let s = size as f32;
    let placed: Vec<Placed> = scene
        .objects
        .iter()
        .map(|&obj| {
            let base = match obj.region {
                Region::Left => 0.2,
                Region::Center => 0.5,
                Region::Right => 0.8,
            };
            Placed {
                obj,
                cx: (base + rng.random_range(-0.04..0.04)) * s,
                cy: rng.random_range(0.45..0.62) * s,
                r: rng.random_range(0.09..0.14) * s,
            }
        })
        .collect();
    let floor_line = rng.random_range(0.68..0.78) * s;
    let wall_tone: f32 = rng.random_range(0.55..0.75);
    let gain = light_gain(scene.intensity);
    let tint = light_tint(scene.light_source);
    let ambient = 0.3 * gain;
    let shadow_offset = 0.07 * s;
    let (sdx, sdy, spread) = match scene.light_position {
        LightPosition::Left => (shadow_offset, 0.0, 1.0),
        LightPosition::Right => (-shadow_offset, 0.0, 1.0),
        LightPosition::Top => (0.0, shadow_offset, 1.0),
        LightPosition::Center => (0.0, 0.35 * shadow_offset, 1.15),
    };
    let soft = 0.9;

    let mut data = vec![0.0f32; 3 * size * size];
    let plane = size * size;
    for yi in 0..size {
        for xi in 0..size {
            let (px, py) = (xi as f32 + 0.5, yi as f32 + 0.5);
            let (xr, yr) = (px / s, py / s);
            let mut albedo = match scene.backdrop {
                Backdrop::Sky => {
                    let t = yr;
                    [0.42 + 0.4 * t, 0.58 + 0.3 * t, 0.92 - 0.05 * t]
                }
                Backdrop::Wall => {
                    let stripe = if ((py / (0.125 * s)) as usize) % 2 == 0 { 0.03 } else { -0.03 };
                    [wall_tone + stripe, wall_tone * 0.93 + stripe, wall_tone * 0.85 + stripe]
                }
            };
            if py > floor_line {
                let f = smoothstep(floor_line, floor_line + 1.5, py);
                for (c, v) in albedo.iter_mut().enumerate() {
                    *v = *v * (1.0 - f) + [0.42, 0.36, 0.3][c] * f;
                }
            }
            let mut shadow = 0.0f32;
            for p in &placed {
                let cov = p.coverage(px, py, soft);
                if cov > 0.0 {
                    let rgb = p.obj.color.rgb();
                    for c in 0..3 {
                        albedo[c] = albedo[c] * (1.0 - cov) + rgb[c] * cov;
                    }
                }
                let sh = Placed { r: p.r * spread, ..*p };
                let sh_cov = sh.coverage(px - sdx, py - sdy, 2.0 * soft);
                shadow = shadow.max(sh_cov * (1.0 - cov));
            }
            let falloff = match (scene.light_source, scene.light_position) {
                (LightSource::None, _) => 0.55,
                (_, LightPosition::Left) => (-1.3 * xr).exp(),
                (_, LightPosition::Right) => (-1.3 * (1.0 - xr)).exp(),
                (_, LightPosition::Top) => (-1.3 * yr).exp(),
                (_, LightPosition::Center) => {
                    let d2 = (xr - 0.5).powi(2) + (yr - 0.5).powi(2);
                    (-4.0 * d2).exp()
                }
            };
            let direct = (gain - ambient) * falloff;
            let shadow_strength = if scene.light_source == LightSource::None { 0.25 } else { 0.7 };
            let light = ambient + direct * (1.0 - shadow_strength * shadow);
            for c in 0..3 {
                data[c * plane + yi * size + xi] = (albedo[c] * light * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(size, size, data).expect("square image")
}

/// One synthetic pair from `rng`.
pub fn generate_scene(rng: &mut impl Rng, size: usize, id: impl Into<String>) -> PairedSample {
    let scene = sample_scene(rng);
    let x0 = render_scene(&scene, size, rng);
    let degradation = Degradation::sample(rng);
    let y = degradation.apply(&x0);
    PairedSample {
        id: id.into(),
        x0,
        y,
        scene: Some(scene),
        degradation: Some(degradation),
    }
}

/// `n` pairs; pair `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    (0..n)
        .map(|i| generate_scene(&mut child_rng(seed, tag::SCENE, i as u64), size, format!("{i:05}")))
        .collect()
}

/// Write `dir/high/<id>.png`, `dir/low/<id>.png` and `dir/meta/<id>.json`.
pub fn save_dataset(samples: &[PairedSample], dir: &Path) -> Result<()> {
    for sub in ["high", "low", "meta"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        s.x0.write_png(dir.join("high").join(format!("{}.png", s.id)))?;
        s.y.write_png(dir.join("low").join(format!("{}.png", s.id)))?;
        if let (Some(scene), Some(degradation)) = (&s.scene, s.degradation) {
            let meta = SampleMeta {
                id: s.id.clone(),
                scene: scene.clone(),
                degradation,
            };
            let p = dir.join("meta").join(format!("{}.json", s.id));
            let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Dataset(e.to_string()))?;
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|x| x.to_str()).map(|x| x.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

fn find_png(dir: &Path, stem: &str) -> PathBuf {
    let lower = dir.join(format!("{stem}.png"));
    if lower.exists() {
        lower
    } else {
        dir.join(format!("{stem}.PNG"))
    }
}

/// Center-crop to `size x size` when the image is larger; smaller images
/// are an error.
fn fit(img: ImageTensor, size: usize) -> Result<ImageTensor> {
    if img.width() == size && img.height() == size {
        Ok(img)
    } else {
        img.center_crop(size, size)
    }
}

/// Pairs matched by filename stem, sorted by stem, each center-cropped to
/// `size`. Scene metadata is absent.
pub fn load_paired_dir(low: &Path, high: &Path, size: usize) -> Result<Vec<PairedSample>> {
    let (a, b) = (png_stems(low)?, png_stems(high)?);
    let common: Vec<_> = a.intersection(&b).cloned().collect();
    if common.is_empty() {
        return Err(Error::Dataset(format!(
            "no matching file names between {} and {}",
            low.display(),
            high.display()
        )));
    }
    common
        .into_iter()
        .map(|stem| {
            Ok(PairedSample {
                y: fit(ImageTensor::read_png(find_png(low, &stem))?, size)?,
                x0: fit(ImageTensor::read_png(find_png(high, &stem))?, size)?,
                id: stem,
                scene: None,
                degradation: None,
            })
        })
        .collect()
}

/// Load a directory written by [`save_dataset`], attaching metadata where
/// sidecars exist.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Vec<PairedSample>> {
    let mut samples = load_paired_dir(&dir.join("low"), &dir.join("high"), size)?;
    for s in &mut samples {
        let p = dir.join("meta").join(format!("{}.json", s.id));
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let meta: SampleMeta =
                serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
            s.scene = Some(meta.scene);
            s.degradation = Some(meta.degradation);
        }
    }
    Ok(samples)
}
