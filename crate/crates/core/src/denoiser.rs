//! Noise-prediction network: a compact U-Net whose cross-attention layers
//! read the instruction prior, plus a control branch that injects the
//! low-light latent through zero-initialized residuals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipfm::TimeEmbedder;
use crate::numcore::nn::{Conv2d, GroupNorm, Init, Linear, MultiHeadAttention};
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Level indices (0 = full resolution) that carry cross-attention.
    pub attention_levels: Vec<usize>,
    /// Width of the sinusoidal timestep base; the embedding is 4x base
    /// channels wide.
    pub time_base_dim: usize,
    pub heads: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 2],
            attention_levels: vec![1, 2],
            time_base_dim: 64,
            heads: 4,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channel_mults.len();
        if n == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config("unet: need at least one level with positive widths".into()));
        }
        if self.attention_levels.is_empty() {
            return Err(Error::Config(
                "unet: at least one level must carry cross-attention on the instruction prior".into(),
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= n) {
            return Err(Error::Config(format!("unet: attention level {l} out of range")));
        }
        for m in &self.channel_mults {
            let ch = self.base_channels * m;
            if ch % self.groups != 0 || ch % self.heads != 0 {
                return Err(Error::Config(format!(
                    "unet: width {ch} must be divisible by {} groups and {} heads",
                    self.groups, self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), groups.min(cin), cin)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, Init::FanIn)?,
            temb: Linear::new(store, rng, &format!("{name}.temb"), temb, cout, Init::FanIn)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, cout)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, Init::FanIn)?,
            skip: if cin != cout {
                Some(Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanIn)?)
            } else {
                None
            },
        })
    }

    /// `temb_act` is `SiLU(temb)`, `[B, temb]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let t = self.temb.forward(g, temb_act)?;
        let b = g.shape(t)[0];
        let t = g.reshape(t, &[b, self.temb.out_dim, 1, 1])?;
        let h = g.add(h, t)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Residual cross-attention from feature-map pixels to the prior tokens.
#[derive(Clone, Debug)]
struct CrossAttn {
    norm: GroupNorm,
    attn: MultiHeadAttention,
}

impl CrossAttn {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        ch: usize,
        ctx: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, ch)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), ch, ctx, ch, heads, Init::Zeros)?,
        })
    }

    /// Returns the updated features and head-averaged weights `[B, H*W, n_prior]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, ctx: Var) -> Result<(Var, Tensor<T>)> {
        let s = g.shape(x).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(g, x)?;
        let h = g.reshape(h, &[b, c, hw])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let (a, w) = self.attn.forward(g, h, ctx, None)?;
        let a = g.permute(a, &[0, 2, 1])?;
        let a = g.reshape(a, &s)?;
        Ok((g.add(x, a)?, w))
    }
}

#[derive(Clone, Debug)]
struct EncLevel {
    res: ResBlock,
    attn: Option<CrossAttn>,
    down: Option<Conv2d>,
}

/// Attention weights recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// `[B, H*W, n_prior]`, rows sum to one.
    pub weights: Tensor<T>,
}

/// Time embedding, input conv, down path and middle block. The U-Net and
/// the control branch each own one with identical layout.
#[derive(Clone, Debug)]
struct Encoder {
    time: TimeEmbedder,
    conv_in: Conv2d,
    levels: Vec<EncLevel>,
    mid_res: ResBlock,
    mid_attn: Option<CrossAttn>,
}

struct EncOut {
    temb_act: Var,
    skips: Vec<Var>,
    mid: Var,
}

impl Encoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &UNetConfig,
        latent: usize,
        ctx: usize,
    ) -> Result<Self> {
        let td = cfg.temb_dim();
        let time = TimeEmbedder::new(store, rng, &format!("{name}.time"), cfg.time_base_dim, td, Init::FanIn)?;
        let conv_in = Conv2d::new(store, rng, &format!("{name}.conv_in"), latent, cfg.width(0), 3, 1, Init::FanIn)?;
        let n = cfg.levels();
        let mut levels = Vec::new();
        let mut ch = cfg.width(0);
        for i in 0..n {
            let out = cfg.width(i);
            let p = format!("{name}.down.{i}");
            levels.push(EncLevel {
                res: ResBlock::new(store, rng, &format!("{p}.res"), ch, out, td, cfg.groups)?,
                attn: if cfg.attention_levels.contains(&i) {
                    Some(CrossAttn::new(store, rng, &format!("{p}.attn"), out, ctx, cfg.heads, cfg.groups)?)
                } else {
                    None
                },
                down: if i + 1 < n {
                    Some(Conv2d::new(store, rng, &format!("{p}.downsample"), out, out, 3, 2, Init::FanIn)?)
                } else {
                    None
                },
            });
            ch = out;
        }
        let mid_res = ResBlock::new(store, rng, &format!("{name}.mid.res"), ch, ch, td, cfg.groups)?;
        let mid_attn = if cfg.attention_levels.contains(&(n - 1)) {
            Some(CrossAttn::new(store, rng, &format!("{name}.mid.attn"), ch, ctx, cfg.heads, cfg.groups)?)
        } else {
            None
        };
        Ok(Self {
            time,
            conv_in,
            levels,
            mid_res,
            mid_attn,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z_t: Var,
        ts: &[usize],
        ctx: Var,
        extra: Option<Var>,
        record: &mut Vec<AttentionRecord<T>>,
    ) -> Result<EncOut> {
        let temb = self.time.forward(g, ts)?;
        let temb_act = g.silu(temb)?;
        let mut h = self.conv_in.forward(g, z_t)?;
        if let Some(e) = extra {
            h = g.add(h, e)?;
        }
        let mut skips = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            h = l.res.forward(g, h, temb_act)?;
            if let Some(a) = &l.attn {
                let (out, w) = a.forward(g, h, ctx)?;
                let s = g.shape(h).to_vec();
                record.push(AttentionRecord {
                    level: i,
                    height: s[2],
                    width: s[3],
                    weights: w,
                });
                h = out;
            }
            skips.push(h);
            if let Some(d) = &l.down {
                h = d.forward(g, h)?;
            }
        }
        h = self.mid_res.forward(g, h, temb_act)?;
        if let Some(a) = &self.mid_attn {
            let (out, _) = a.forward(g, h, ctx)?;
            h = out;
        }
        Ok(EncOut {
            temb_act,
            skips,
            mid: h,
        })
    }
}

#[derive(Clone, Debug)]
struct DecLevel {
    res: ResBlock,
    attn: Option<CrossAttn>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub latent_channels: usize,
    pub context_dim: usize,
    enc: Encoder,
    dec: Vec<DecLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Residuals added to the decoder: one per skip junction, then one for the
/// middle block.
pub type ControlResiduals = Vec<Var>;

impl UNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &UNetConfig,
        latent_channels: usize,
        context_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let enc = Encoder::new(store, rng, &format!("{name}.enc"), cfg, latent_channels, context_dim)?;
        let n = cfg.levels();
        let td = cfg.temb_dim();
        let mut dec = Vec::new();
        let mut ch = cfg.width(n - 1);
        for i in (0..n).rev() {
            let out = cfg.width(i);
            let p = format!("{name}.up.{i}");
            dec.push(DecLevel {
                res: ResBlock::new(store, rng, &format!("{p}.res"), ch + out, out, td, cfg.groups)?,
                attn: if cfg.attention_levels.contains(&i) {
                    Some(CrossAttn::new(store, rng, &format!("{p}.attn"), out, context_dim, cfg.heads, cfg.groups)?)
                } else {
                    None
                },
                up: if i > 0 {
                    Some(Conv2d::new(store, rng, &format!("{p}.upsample"), out, out, 3, 1, Init::FanIn)?)
                } else {
                    None
                },
            });
            ch = out;
        }
        Ok(Self {
            config: cfg.clone(),
            latent_channels,
            context_dim,
            enc,
            dec,
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), cfg.groups, cfg.width(0))?,
            conv_out: Conv2d::new(store, rng, &format!("{name}.conv_out"), cfg.width(0), latent_channels, 3, 1, Init::Zeros)?,
        })
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<T>, z_t: Var, ts: &[usize], p_s: Var) -> Result<()> {
        let zs = g.shape(z_t);
        let ps = g.shape(p_s);
        let div = 1usize << (self.config.levels() - 1);
        if zs.len() != 4 || zs[1] != self.latent_channels {
            return Err(Error::shape("unet", format!("latent {zs:?}, expected {} channels", self.latent_channels)));
        }
        if zs[2] % div != 0 || zs[3] % div != 0 {
            return Err(Error::shape(
                "unet",
                format!("spatial dims {}x{} not divisible by {div}", zs[2], zs[3]),
            ));
        }
        if ps.len() != 3 || ps[0] != zs[0] || ps[2] != self.context_dim || ts.len() != zs[0] {
            return Err(Error::shape(
                "unet",
                format!("prior {ps:?} / {} timesteps for batch {}", ts.len(), zs[0]),
            ));
        }
        Ok(())
    }

    /// `eps_hat` for `z_t`. `control` holds decoder residuals from a
    /// [`ControlBranch`]; `record` collects cross-attention weights of the
    /// down path.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z_t: Var,
        ts: &[usize],
        p_s: Var,
        control: Option<&ControlResiduals>,
        record: &mut Vec<AttentionRecord<T>>,
    ) -> Result<Var> {
        self.check_inputs(g, z_t, ts, p_s)?;
        let n = self.config.levels();
        let out = self.enc.forward(g, z_t, ts, p_s, None, record)?;
        let mut skips = out.skips;
        let mut h = out.mid;
        if let Some(res) = control {
            if res.len() != n + 1 {
                return Err(Error::shape("unet", format!("{} control residuals for {n} levels", res.len())));
            }
            for (s, r) in skips.iter_mut().zip(res) {
                *s = g.add(*s, *r)?;
            }
            h = g.add(h, res[n])?;
        }
        for d in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 1)?;
            h = d.res.forward(g, h, out.temb_act)?;
            if let Some(a) = &d.attn {
                h = a.forward(g, h, p_s)?.0;
            }
            if let Some(u) = &d.up {
                h = g.upsample2x(h)?;
                h = u.forward(g, h)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.silu(h)?;
        self.conv_out.forward(g, h)
    }
}

/// Trainable copy of the U-Net encoder fed with `z_t` plus a projection of
/// `z_l`, emitting zero-initialized residuals for the decoder.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    enc: Encoder,
    stem: Conv2d,
    fusion: Vec<Conv2d>,
    latent_channels: usize,
}

impl ControlBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &UNetConfig,
        latent_channels: usize,
        context_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let enc = Encoder::new(store, rng, &format!("{name}.enc"), cfg, latent_channels, context_dim)?;
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), latent_channels, cfg.width(0), 3, 1, Init::FanIn)?;
        let n = cfg.levels();
        let mut fusion = Vec::new();
        for i in 0..n {
            fusion.push(Conv2d::new(store, rng, &format!("{name}.fusion.{i}"), cfg.width(i), cfg.width(i), 1, 1, Init::Zeros)?);
        }
        fusion.push(Conv2d::new(store, rng, &format!("{name}.fusion.mid"), cfg.width(n - 1), cfg.width(n - 1), 1, 1, Init::Zeros)?);
        Ok(Self {
            enc,
            stem,
            fusion,
            latent_channels,
        })
    }

    /// Overwrite the copied encoder with the U-Net encoder weights, matching
    /// parameters by name under the two prefixes. Returns the number copied.
    pub fn copy_encoder_from<T: Scalar>(store: &mut ParamStore<T>, unet_prefix: &str, control_prefix: &str) -> Result<usize> {
        let src = format!("{unet_prefix}.enc.");
        let pairs: Vec<_> = store
            .iter()
            .filter_map(|(_, p)| {
                p.name
                    .strip_prefix(&src)
                    .map(|rest| (p.name.clone(), format!("{control_prefix}.enc.{rest}")))
            })
            .collect();
        for (from, to) in &pairs {
            let t = store.tensor(store.id(from).expect("listed")).clone();
            let dst = store
                .id(to)
                .ok_or_else(|| Error::InvalidArgument(format!("control branch lacks {to}")))?;
            store.set_tensor(dst, t)?;
        }
        Ok(pairs.len())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z_t: Var, ts: &[usize], z_l: Var, p_s: Var) -> Result<ControlResiduals> {
        if g.shape(z_l) != g.shape(z_t) {
            return Err(Error::shape(
                "control",
                format!("z_l {:?} vs z_t {:?}", g.shape(z_l), g.shape(z_t)),
            ));
        }
        if g.shape(z_t).get(1) != Some(&self.latent_channels) {
            return Err(Error::shape("control", format!("latent {:?}", g.shape(z_t))));
        }
        let stem = self.stem.forward(g, z_l)?;
        let out = self.enc.forward(g, z_t, ts, p_s, Some(stem), &mut Vec::new())?;
        let mut res = Vec::new();
        for (f, s) in self.fusion.iter().zip(out.skips.iter().chain(std::iter::once(&out.mid))) {
            res.push(f.forward(g, *s)?);
        }
        Ok(res)
    }
}

/// U-Net with its control branch.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub unet: UNet,
    pub control: ControlBranch,
}

impl Denoiser {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &UNetConfig,
        latent_channels: usize,
        context_dim: usize,
    ) -> Result<Self> {
        let unet = UNet::new(store, rng, "unet", cfg, latent_channels, context_dim)?;
        let control = ControlBranch::new(store, rng, "control", cfg, latent_channels, context_dim)?;
        ControlBranch::copy_encoder_from(store, "unet", "control")?;
        Ok(Self { unet, control })
    }

    /// `eps_theta(z_t, t, z_l, p_s)`.
    pub fn eps_theta<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z_t: Var,
        ts: &[usize],
        z_l: Var,
        p_s: Var,
        record: &mut Vec<AttentionRecord<T>>,
    ) -> Result<Var> {
        let res = self.control.forward(g, z_t, ts, z_l, p_s)?;
        self.unet.forward(g, z_t, ts, p_s, Some(&res), record)
    }
}
