//! Small bidirectional transformer producing the text embedding `e_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, MAX_LEN, PAD};
use crate::error::{Error, Result};
use crate::numcore::nn::{Init, LayerNorm, Linear, MultiHeadAttention};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_mult: 2,
        }
    }
}

/// Token ids padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<u32>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len > MAX_LEN {
            return Err(Error::InvalidArgument(format!("token sequence of {len} exceeds {MAX_LEN}")));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
            len,
        })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let tok = Tokenizer::shared();
        let seqs: Vec<_> = texts.iter().map(|t| tok.tokenize(t.as_ref())).collect();
        Self::new(&seqs)
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// `[B, len]`, 1 for real tokens and 0 for padding.
    pub fn keep<T: Scalar>(&self) -> Tensor<T> {
        let n = self.len;
        Tensor::from_fn(&[self.batch(), n], |i| {
            if i % n < self.lengths[i / n] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub vocab: usize,
    table: ParamId,
    positions: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        cfg: &TextEncoderConfig,
    ) -> Result<Self> {
        let vocab = Tokenizer::shared().vocab_size();
        let table = store.add(
            format!("{name}.token_embedding"),
            Tensor::randn(&[vocab, dim], rng).map(|v| v * T::from_f64(0.02)),
        )?;
        let positions = store.add(
            format!("{name}.position_embedding"),
            Tensor::randn(&[MAX_LEN, dim], rng).map(|v| v * T::from_f64(0.02)),
        )?;
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            let p = format!("{name}.layers.{i}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), dim)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{p}.attn"), dim, dim, dim, cfg.heads, Init::FanIn)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), dim)?,
                ffn1: Linear::new(store, rng, &format!("{p}.ffn1"), dim, dim * cfg.ffn_mult, Init::FanIn)?,
                ffn2: Linear::new(store, rng, &format!("{p}.ffn2"), dim * cfg.ffn_mult, dim, Init::FanIn)?,
            });
        }
        Ok(Self {
            dim,
            vocab,
            table,
            positions,
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), dim)?,
        })
    }

    /// `e_t` as `[B, len, dim]`; padding positions are excluded as keys.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var> {
        let (b, n) = (batch.batch(), batch.len);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(self.table);
        let x = g.gather(table, &ids)?;
        let mut x = g.reshape(x, &[b, n, self.dim])?;
        if n > 0 {
            let pos = g.param(self.positions);
            let pos = g.gather(pos, &(0..n).collect::<Vec<_>>())?;
            x = g.add(x, pos)?;
        }
        let keep = batch.keep::<T>();
        for l in &self.layers {
            let h = l.ln1.forward(g, x)?;
            let (a, _) = l.attn.forward(g, h, h, Some(&keep))?;
            x = g.add(x, a)?;
            let h = l.ln2.forward(g, x)?;
            let h = l.ffn1.forward(g, h)?;
            let h = g.silu(h)?;
            let h = l.ffn2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        self.final_ln.forward(g, x)
    }
}
