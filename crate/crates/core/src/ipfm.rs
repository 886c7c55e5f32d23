//! Instruction prior fusion: learnable queries that read the text embedding
//! through time-modulated cross-attention.
//!
//! Every block computes
//!
//! ```text
//! p      = q + Embed(t)
//! p_bar  = AdaLN(p, Embed(t))
//! p_til  = p + CrossAttn(query = p_bar, kv = [p_bar; e_t])
//! q_next = p_til + FFN(AdaLN(p_til, Embed(t)))
//! ```
//!
//! Tensors carry a leading batch axis: queries are `[B, n_query, d]`, text
//! embeddings `[B, n_text, d]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{layer_norm, sinusoidal_embedding, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// How the instruction reaches the queries. `Adaln` is the full module; the
/// others are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IpfmMode {
    /// Bare learnable queries, text unused.
    None,
    /// Mean-pooled text through a 2-layer FFN, broadcast onto the queries.
    Mlp,
    /// Blocks with plain LayerNorm, no time input.
    Ln,
    #[default]
    Adaln,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpfmConfig {
    pub mode: IpfmMode,
    pub n_blocks: usize,
    pub n_query: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of the sinusoidal base fed to the time projection.
    pub time_base_dim: usize,
}

impl Default for IpfmConfig {
    fn default() -> Self {
        Self {
            mode: IpfmMode::Adaln,
            n_blocks: 4,
            n_query: 8,
            dim: 256,
            heads: 4,
            ffn_mult: 2,
            time_base_dim: 128,
        }
    }
}

impl IpfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_query == 0 || self.dim == 0 {
            return Err(Error::Config("ipfm: n_query and dim must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "ipfm: dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.time_base_dim < 2 {
            return Err(Error::Config("ipfm: ffn_mult >= 1 and time_base_dim >= 2 required".into()));
        }
        Ok(())
    }
}

/// A materialized time embedding for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub values: Tensor<f32>,
}

/// The fixed sinusoidal base of the time embedding for timestep `t`.
pub fn time_embed_base(t: usize, dim: usize) -> Tensor<f64> {
    sinusoidal_embedding(&[t as f64], dim).reshape(&[dim]).expect("dim preserved")
}

/// Sinusoidal base followed by `Linear -> SiLU -> Linear`.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub base_dim: usize,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl TimeEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        base_dim: usize,
        out_dim: usize,
        last_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            base_dim,
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), base_dim, out_dim, Init::FanIn)?,
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), out_dim, out_dim, last_init)?,
        })
    }

    /// `[ts.len(), out_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ts: &[usize]) -> Result<Var> {
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let base = g.constant(sinusoidal_embedding(&tf, self.base_dim));
        let h = self.lin1.forward(g, base)?;
        let h = g.silu(h)?;
        self.lin2.forward(g, h)
    }

    pub fn embed(&self, store: &ParamStore<f32>, t: usize) -> Result<TimeEmbedding> {
        let mut g = Graph::inference(store);
        let v = self.forward(&mut g, &[t])?;
        let values = g.value(v).reshape(&[self.lin2.out_dim])?;
        Ok(TimeEmbedding {
            dim: self.lin2.out_dim,
            values,
        })
    }
}

/// `LN(x) * (1 + scale(temb)) + shift(temb)` with zero-initialized
/// modulation, or a plain affine LayerNorm when built without time input.
#[derive(Clone, Debug)]
pub enum AdaLn {
    Modulated { scale: Linear, shift: Linear, eps: f64 },
    Plain(LayerNorm),
}

impl AdaLn {
    pub fn modulated<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        temb_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(AdaLn::Modulated {
            scale: Linear::new(store, rng, &format!("{name}.scale"), temb_dim, dim, Init::Zeros)?,
            shift: Linear::new(store, rng, &format!("{name}.shift"), temb_dim, dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn plain<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(AdaLn::Plain(LayerNorm::new(store, name, dim)?))
    }

    /// `x` is `[B, N, d]`; `temb` is `[B, temb_dim]` and required for the
    /// modulated variant.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, temb: Option<Var>) -> Result<Var> {
        match self {
            AdaLn::Plain(ln) => ln.forward(g, x),
            AdaLn::Modulated { scale, shift, eps } => {
                let temb = temb.ok_or_else(|| Error::InvalidArgument("adaln needs a time embedding".into()))?;
                let xs = g.shape(x).to_vec();
                let b = g.shape(temb)[0];
                if xs.len() != 3 || xs[0] != b {
                    return Err(Error::shape("adaln", format!("x {xs:?}, temb batch {b}")));
                }
                let h = g.silu(temb)?;
                let sc = scale.forward(g, h)?;
                let sc = g.reshape(sc, &[b, 1, xs[2]])?;
                let sh = shift.forward(g, h)?;
                let sh = g.reshape(sh, &[b, 1, xs[2]])?;
                let n = layer_norm(g, x, None, None, *eps)?;
                let gain = g.add_scalar(sc, 1.0)?;
                let y = g.mul(n, gain)?;
                g.add(y, sh)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct IpfmBlock {
    pub norm1: AdaLn,
    pub attn: MultiHeadAttention,
    pub norm2: AdaLn,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl IpfmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &IpfmConfig,
        modulated: bool,
    ) -> Result<Self> {
        let d = cfg.dim;
        let norm = |store: &mut ParamStore<T>, rng: &mut _, n: &str| {
            if modulated {
                AdaLn::modulated(store, rng, &format!("{name}.{n}"), d, d)
            } else {
                AdaLn::plain(store, &format!("{name}.{n}"), d)
            }
        };
        let norm1 = norm(store, rng, "norm1")?;
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, d, d, cfg.heads, Init::Zeros)?;
        let norm2 = norm(store, rng, "norm2")?;
        Ok(Self {
            norm1,
            attn,
            norm2,
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, d * cfg.ffn_mult, Init::FanIn)?,
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), d * cfg.ffn_mult, d, Init::Zeros)?,
        })
    }

    /// One block. `p` is `[B, n_query, d]` (time embedding already added),
    /// `e_t` is `[B, n_text, d]` with `text_keep` `[B, n_text]` marking
    /// non-padding tokens. Returns the next queries and the head-averaged
    /// attention weights `[B, n_query, n_query + n_text]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: Var,
        e_t: Var,
        text_keep: &Tensor<T>,
        temb: Option<Var>,
    ) -> Result<(Var, Tensor<T>)> {
        let (ps, es) = (g.shape(p).to_vec(), g.shape(e_t).to_vec());
        if ps.len() != 3 || es.len() != 3 || ps[0] != es[0] || ps[2] != es[2] {
            return Err(Error::shape("ipfm_block", format!("queries {ps:?}, text {es:?}")));
        }
        let (b, nq, nt) = (ps[0], ps[1], es[1]);
        if text_keep.shape() != [b, nt] {
            return Err(Error::shape("ipfm_block", format!("text mask {:?}", text_keep.shape())));
        }
        let p_bar = self.norm1.forward(g, p, temb)?;
        let kv = g.concat(&[p_bar, e_t], 1)?;
        let kd = text_keep.data();
        let keep = Tensor::from_fn(&[b, nq + nt], |i| {
            let (bi, j) = (i / (nq + nt), i % (nq + nt));
            if j < nq {
                T::one()
            } else {
                kd[bi * nt + j - nq]
            }
        });
        let (a, weights) = self.attn.forward(g, p_bar, kv, Some(&keep))?;
        let p_til = g.add(p, a)?;
        let h = self.norm2.forward(g, p_til, temb)?;
        let h = self.ffn1.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.ffn2.forward(g, h)?;
        Ok((g.add(p_til, h)?, weights))
    }
}

/// Ablation block: `q + FFN(LN(mean_pool(e_t)))` broadcast over the queries.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub norm: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl MlpBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &IpfmConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, d * cfg.ffn_mult, Init::FanIn)?,
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), d * cfg.ffn_mult, d, Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, q: Var, pooled: Var) -> Result<Var> {
        let h = self.norm.forward(g, pooled)?;
        let h = self.ffn1.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.ffn2.forward(g, h)?;
        g.add(q, h)
    }
}

/// Output of the fusion stack.
pub struct IpfmOutput<T> {
    /// `[B, n_query, d]`.
    pub prior: Var,
    /// Per block, head-averaged weights `[B, n_query, n_query + n_text]`.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct IpfmStack {
    pub config: IpfmConfig,
    pub queries: ParamId,
    pub time: Option<TimeEmbedder>,
    pub blocks: Vec<IpfmBlock>,
    pub mlp_blocks: Vec<MlpBlock>,
}

impl IpfmStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &IpfmConfig) -> Result<Self> {
        cfg.validate()?;
        let queries = store.add(
            format!("{name}.queries"),
            Tensor::randn(&[cfg.n_query, cfg.dim], rng).map(|v| v * T::from_f64(0.02)),
        )?;
        let mut stack = Self {
            config: cfg.clone(),
            queries,
            time: None,
            blocks: Vec::new(),
            mlp_blocks: Vec::new(),
        };
        match cfg.mode {
            IpfmMode::None => {}
            IpfmMode::Mlp => {
                for i in 0..cfg.n_blocks {
                    stack.mlp_blocks.push(MlpBlock::new(store, rng, &format!("{name}.mlp.{i}"), cfg)?);
                }
            }
            IpfmMode::Ln | IpfmMode::Adaln => {
                let modulated = cfg.mode == IpfmMode::Adaln;
                if modulated {
                    // Zero last layer: Embed(t) starts at 0, so the stack is
                    // the identity on the queries at init.
                    stack.time = Some(TimeEmbedder::new(
                        store,
                        rng,
                        &format!("{name}.time"),
                        cfg.time_base_dim,
                        cfg.dim,
                        Init::Zeros,
                    )?);
                }
                for i in 0..cfg.n_blocks {
                    stack
                        .blocks
                        .push(IpfmBlock::new(store, rng, &format!("{name}.blocks.{i}"), cfg, modulated)?);
                }
            }
        }
        Ok(stack)
    }

    /// Run the stack. `ts` holds one timestep per batch entry; every block
    /// sees the same timestep.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        e_t: Var,
        text_keep: &Tensor<T>,
        ts: &[usize],
    ) -> Result<IpfmOutput<T>> {
        let es = g.shape(e_t).to_vec();
        let (nq, d) = (self.config.n_query, self.config.dim);
        if es.len() != 3 || es[2] != d || es[0] != ts.len() {
            return Err(Error::shape(
                "ipfm_forward",
                format!("text {es:?}, width {d}, {} timesteps", ts.len()),
            ));
        }
        let b = es[0];
        let zeros = g.constant(Tensor::zeros(&[b, nq, d]));
        let q1 = g.param(self.queries);
        let mut q = g.add(zeros, q1)?;
        let mut attention = Vec::new();
        match self.config.mode {
            IpfmMode::None => {}
            IpfmMode::Mlp => {
                let pooled = masked_mean(g, e_t, text_keep)?;
                for blk in &self.mlp_blocks {
                    q = blk.forward(g, q, pooled)?;
                }
            }
            IpfmMode::Ln | IpfmMode::Adaln => {
                let temb = match &self.time {
                    Some(te) => Some(te.forward(g, ts)?),
                    None => None,
                };
                let temb_b = match temb {
                    Some(v) => Some(g.reshape(v, &[b, 1, d])?),
                    None => None,
                };
                for blk in &self.blocks {
                    let p = match temb_b {
                        Some(tb) => g.add(q, tb)?,
                        None => q,
                    };
                    let (next, w) = blk.forward(g, p, e_t, text_keep, temb)?;
                    q = next;
                    attention.push(w);
                }
            }
        }
        Ok(IpfmOutput { prior: q, attention })
    }
}

/// Mean over non-padding text tokens, `[B, 1, d]`. All-padding rows pool to 0.
fn masked_mean<T: Scalar>(g: &mut Graph<T>, e_t: Var, keep: &Tensor<T>) -> Result<Var> {
    let s = g.shape(e_t).to_vec();
    let (b, nt) = (s[0], s[1]);
    if keep.shape() != [b, nt] {
        return Err(Error::shape("ipfm mean pool", format!("mask {:?}", keep.shape())));
    }
    let kd = keep.data();
    let w = Tensor::from_fn(&[b, 1, nt], |i| {
        let bi = i / nt;
        let count: f64 = kd[bi * nt..(bi + 1) * nt].iter().map(|v| v.as_f64()).sum();
        if count > 0.0 {
            T::from_f64(kd[i].as_f64() / count)
        } else {
            T::zero()
        }
    });
    let w = g.constant(w);
    g.matmul(w, e_t)
}
