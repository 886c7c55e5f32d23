//! Latent codec (deterministic autoencoder or identity) and the trainable
//! low-light image encoder.

mod image;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use image::ImageTensor;

use crate::error::{Error, Result};
use crate::numcore::nn::{Conv2d, Init};
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    /// Pixel space: `f = 1`, `c = 3`, encode and decode pass through.
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Spatial downscale factor, a power of two.
    pub f: usize,
    /// Latent channels.
    pub c: usize,
    /// Width of the first conv stage; doubles per downsampling stage.
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Learned,
            f: 4,
            c: 4,
            hidden: 16,
        }
    }
}

impl CodecConfig {
    pub fn identity() -> Self {
        Self {
            mode: CodecMode::Identity,
            f: 1,
            c: 3,
            hidden: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CodecMode::Identity if self.f != 1 || self.c != 3 => {
                Err(Error::Config("identity codec requires f = 1 and c = 3".into()))
            }
            CodecMode::Learned if !self.f.is_power_of_two() || self.c == 0 || self.hidden == 0 => Err(
                Error::Config("learned codec needs a power-of-two f and positive c, hidden".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn stages(&self) -> usize {
        self.f.trailing_zeros() as usize
    }

    /// Latent shape `[c, h/f, w/f]` for an `h x w` image.
    pub fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        if h % self.f != 0 || w % self.f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "codec",
                format!("{h}x{w} image not divisible by factor {}", self.f),
            ));
        }
        Ok([self.c, h / self.f, w / self.f])
    }
}

#[derive(Clone, Debug)]
struct Learned {
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    learned: Option<Learned>,
}

fn conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: String,
    i: usize,
    o: usize,
    k: usize,
    s: usize,
) -> Result<Conv2d> {
    Conv2d::new(store, rng, &name, i, o, k, s, Init::FanIn)
}

impl Codec {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let learned = match config.mode {
            CodecMode::Identity => None,
            CodecMode::Learned => {
                let h = config.hidden;
                let n = config.stages();
                let enc_in = conv(store, rng, format!("{name}.encoder.conv_in"), 3, h, 3, 1)?;
                let mut enc_down = Vec::new();
                let mut ch = h;
                for i in 0..n {
                    let down = conv(store, rng, format!("{name}.encoder.down.{i}.conv"), ch, ch * 2, 3, 2)?;
                    let refine = conv(store, rng, format!("{name}.encoder.down.{i}.refine"), ch * 2, ch * 2, 3, 1)?;
                    enc_down.push((down, refine));
                    ch *= 2;
                }
                let enc_out = conv(store, rng, format!("{name}.encoder.conv_out"), ch, config.c, 1, 1)?;
                let dec_in = conv(store, rng, format!("{name}.decoder.conv_in"), config.c, ch, 3, 1)?;
                let dec_mid = conv(store, rng, format!("{name}.decoder.mid"), ch, ch, 3, 1)?;
                let mut dec_up = Vec::new();
                for i in 0..n {
                    let up = conv(store, rng, format!("{name}.decoder.up.{i}.conv"), ch, ch / 2, 3, 1)?;
                    let refine = conv(store, rng, format!("{name}.decoder.up.{i}.refine"), ch / 2, ch / 2, 3, 1)?;
                    dec_up.push((up, refine));
                    ch /= 2;
                }
                let dec_out = conv(store, rng, format!("{name}.decoder.conv_out"), ch, 3, 3, 1)?;
                Some(Learned {
                    enc_in,
                    enc_down,
                    enc_out,
                    dec_in,
                    dec_mid,
                    dec_up,
                    dec_out,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            learned,
        })
    }

    fn check_image<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("encode", format!("expected [B,3,H,W], got {s:?}")));
        }
        self.config.latent_shape(s[2], s[3]).map(|_| ())
    }

    /// `[B,3,H,W] -> [B,c,H/f,W/f]`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_image(g, x)?;
        let Some(l) = &self.learned else { return Ok(x) };
        let mut h = l.enc_in.forward(g, x)?;
        h = g.silu(h)?;
        for (down, refine) in &l.enc_down {
            h = down.forward(g, h)?;
            h = g.silu(h)?;
            let r = refine.forward(g, h)?;
            let r = g.silu(r)?;
            h = g.add(h, r)?;
        }
        l.enc_out.forward(g, h)
    }

    /// `[B,c,h,w] -> [B,3,h*f,w*f]`, not clamped.
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.c {
            return Err(Error::shape(
                "decode",
                format!("expected [B,{},h,w], got {s:?}", self.config.c),
            ));
        }
        let Some(l) = &self.learned else { return Ok(z) };
        let mut h = l.dec_in.forward(g, z)?;
        h = g.silu(h)?;
        let r = l.dec_mid.forward(g, h)?;
        let r = g.silu(r)?;
        h = g.add(h, r)?;
        for (up, refine) in &l.dec_up {
            h = g.upsample2x(h)?;
            h = up.forward(g, h)?;
            h = g.silu(h)?;
            let r = refine.forward(g, h)?;
            let r = g.silu(r)?;
            h = g.add(h, r)?;
        }
        l.dec_out.forward(g, h)
    }

    pub fn encode(&self, store: &ParamStore<f32>, images: &[ImageTensor]) -> Result<Tensor<f32>> {
        let x = images_to_batch(images)?;
        let mut g = Graph::inference(store);
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// Decoded images, clamped to `[0, 1]`.
    pub fn decode(&self, store: &ParamStore<f32>, z: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
        let mut g = Graph::inference(store);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, zv)?;
        batch_to_images(g.value(x))
    }
}

/// Stack equally sized images into `[B,3,H,W]`.
pub fn images_to_batch(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = images.iter().map(ImageTensor::to_tensor).collect();
    Tensor::stack(&ts)
}

pub fn batch_to_images(x: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("images", format!("expected [B,3,H,W], got {s:?}")));
    }
    (0..s[0]).map(|i| ImageTensor::from_tensor(&x.narrow0(i, 1)?)).collect()
}

/// Trainable encoder of the low-light input. One stride-1 stem, one
/// stride-2 conv per factor of two, one output conv to the latent width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    out: Conv2d,
    f: usize,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: &CodecConfig,
        width: usize,
    ) -> Result<Self> {
        let stem = conv(store, rng, format!("{name}.stem"), 3, width, 3, 1)?;
        let mut down = Vec::new();
        let mut ch = width;
        for i in 0..config.stages() {
            down.push(conv(store, rng, format!("{name}.down.{i}"), ch, ch * 2, 3, 2)?);
            ch *= 2;
        }
        let out = conv(store, rng, format!("{name}.out"), ch, config.c, 3, 1)?;
        Ok(Self {
            stem,
            down,
            out,
            f: config.f,
        })
    }

    /// `y` `[B,3,H,W]` to `z_l` with the latent shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % self.f != 0 || s[3] % self.f != 0 {
            return Err(Error::shape("image_encode", format!("{s:?} with factor {}", self.f)));
        }
        let mut h = self.stem.forward(g, y)?;
        h = g.silu(h)?;
        for d in &self.down {
            h = d.forward(g, h)?;
            h = g.silu(h)?;
        }
        self.out.forward(g, h)
    }
}
