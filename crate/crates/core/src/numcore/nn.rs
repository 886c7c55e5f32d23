//! Layers built from graph ops. Each layer only holds [`ParamId`]s, so the
//! same layer definition runs on an `f32` store for training and on an `f64`
//! store for gradient checks.

use rand::Rng;

use super::graph::{Conv2dSpec, Graph, Var};
use super::param::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Initialization for weight tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
    Zeros,
    Ones,
    Normal(f64),
}

pub fn init_tensor<T: Scalar>(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Normal(std) => Tensor::randn(shape, rng).map(|v| v * T::from_f64(std)),
    }
}

/// `x @ w + b` over the last axis. Weight layout is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], in_dim, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], in_dim, init, rng))?;
        Ok(Self {
            w,
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng),
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            w,
            b,
            spec: Conv2dSpec {
                stride,
                padding: kernel / 2,
            },
            out_channels: out_ch,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv2d(x, w, self.spec)?;
        let b = g.param(self.b);
        let b = g.reshape(b, &[1, self.out_channels, 1, 1])?;
        g.add(y, b)
    }
}

/// Layer normalization over the last axis with optional affine parameters.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
    let mut y = g.norm_last(x, eps)?;
    if let Some(gain) = gain {
        y = g.mul(y, gain)?;
    }
    if let Some(bias) = bias {
        y = g.add(y, bias)?;
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.weight"), Tensor::ones(&[dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        layer_norm(g, x, Some(gain), Some(bias), self.eps)
    }
}

/// Group normalization on [N,C,H,W], realized as a last-axis norm over
/// `[N, G, C/G*H*W]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gain: store.add(format!("{name}.weight"), Tensor::ones(&[channels]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape("group_norm", format!("{s:?}, channels {}", self.channels)));
        }
        let grouped = g.reshape(x, &[s[0], self.groups, s[1] / self.groups * s[2] * s[3]])?;
        let y = g.norm_last(grouped, self.eps)?;
        let y = g.reshape(y, &s)?;
        let gain = g.param(self.gain);
        let gain = g.reshape(gain, &[1, self.channels, 1, 1])?;
        let bias = g.param(self.bias);
        let bias = g.reshape(bias, &[1, self.channels, 1, 1])?;
        let y = g.mul(y, gain)?;
        g.add(y, bias)
    }
}

/// `softmax(q k^T / sqrt(d)) v`, batched over leading axes.
///
/// `q` is `[B, Nq, d]`, `k` and `v` are `[B, Nk, d]` / `[B, Nk, dv]`.
/// `mask`, if given, is an additive `[B, 1, Nk]` (or broadcastable) constant.
/// Returns the output and the attention weights `[B, Nq, Nk]`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != ks[2] || ks[1] != vs[1] || qs[0] != ks[0] || ks[0] != vs[0] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let d = qs[2];
    let scores = g.matmul_ex(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (d.max(1) as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// `out_init` lets residual blocks start with a zero output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
        heads: usize,
        out_init: Init,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::no_bias(store, rng, &format!("{name}.to_q"), query_dim, dim, Init::FanIn)?,
            k: Linear::no_bias(store, rng, &format!("{name}.to_k"), context_dim, dim, Init::FanIn)?,
            v: Linear::no_bias(store, rng, &format!("{name}.to_v"), context_dim, dim, Init::FanIn)?,
            out: Linear::new(store, rng, &format!("{name}.to_out"), dim, query_dim, out_init)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let hd = self.dim / self.heads;
        let x = g.reshape(x, &[s[0], s[1], self.heads, hd])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * self.heads, s[1], hd])
    }

    /// `x` is `[B, Nq, query_dim]`, `ctx` is `[B, Nk, context_dim]`.
    /// `key_keep`, if given, is `[B, Nk]` with 1 for valid keys and 0 for padding.
    /// Returns the output and head-averaged weights `[B, Nq, Nk]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: Var,
        key_keep: Option<&Tensor<T>>,
    ) -> Result<(Var, Tensor<T>)> {
        let (xs, cs) = (g.shape(x).to_vec(), g.shape(ctx).to_vec());
        if xs.len() != 3 || cs.len() != 3 || xs[0] != cs[0] {
            return Err(Error::shape("attention", format!("x {xs:?}, ctx {cs:?}")));
        }
        let (b, nq, nk) = (xs[0], xs[1], cs[1]);
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, ctx)?;
        let v = self.v.forward(g, ctx)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let mask = match key_keep {
            Some(keep) => {
                if keep.shape() != [b, nk] {
                    return Err(Error::shape("attention mask", format!("{:?} vs [{b}, {nk}]", keep.shape())));
                }
                let kd = keep.data();
                let m = Tensor::from_fn(&[b * self.heads, 1, nk], |i| {
                    let (bi, j) = (i / (self.heads * nk), i % nk);
                    if kd[bi * nk + j] > T::zero() {
                        T::zero()
                    } else {
                        T::from_f64(-1e9)
                    }
                });
                Some(g.constant(m))
            }
            None => None,
        };
        let (o, w) = scaled_dot_attention(g, q, k, v, mask)?;
        let hd = self.dim / self.heads;
        let o = g.reshape(o, &[b, self.heads, nq, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, nq, self.dim])?;
        let o = self.out.forward(g, o)?;
        Ok((o, head_mean(g.value(w), b, self.heads, nq, nk)))
    }
}

fn head_mean<T: Scalar>(w: &Tensor<T>, b: usize, heads: usize, nq: usize, nk: usize) -> Tensor<T> {
    let wd = w.data();
    let inv = T::from_f64(1.0 / heads as f64);
    Tensor::from_fn(&[b, nq, nk], |i| {
        let bi = i / (nq * nk);
        let r = i % (nq * nk);
        let mut s = T::zero();
        for h in 0..heads {
            s += wd[(bi * heads + h) * nq * nk + r];
        }
        s * inv
    })
}

/// Sinusoidal embedding of integer timesteps: `[sin(t f_i)..., cos(t f_i)...]`
/// with `f_i = 10000^(-i/half)`. Output `[ts.len(), dim]`.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (r, c) = (i / dim, i % dim);
        if c >= 2 * half {
            return T::zero();
        }
        let j = c % half;
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let arg = ts[r] * freq;
        T::from_f64(if c < half { arg.sin() } else { arg.cos() })
    })
}
