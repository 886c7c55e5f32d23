//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Update every trainable parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let decay = 1.0 - (c.lr * c.weight_decay) as f32;
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (id, g) in grads.params() {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape("adamw", format!("{}: grad {:?}", p.name, g.shape())));
            }
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let mut w = p.tensor.to_vec();
            for (i, (&gi, wi)) in g.data().iter().zip(w.iter_mut()).enumerate() {
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
                *wi *= decay;
                *wi -= step_size * mom.m[i] / (mom.v[i].sqrt() / bc2_sqrt + eps);
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "adamw" });
            }
            let shape = p.tensor.shape().to_vec();
            store.set_tensor(id, Tensor::new(&shape, w)?)?;
        }
        Ok(())
    }

    /// Moment tensors named `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, m) in self.moments.iter().enumerate() {
            if let Some(m) = m {
                let p = store.get(crate::numcore::ParamId(i));
                let shape = p.tensor.shape();
                out.push((format!("optim.m.{}", p.name), Tensor::new(shape, m.m.clone()).expect("shape")));
                out.push((format!("optim.v.{}", p.name), Tensor::new(shape, m.v.clone()).expect("shape")));
            }
        }
        out
    }

    /// Rebuild from [`Self::state_tensors`] output.
    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        store: &ParamStore<f32>,
        tensors: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let mut opt = Self::new(config);
        opt.step = step;
        opt.moments = vec![None; store.len()];
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for (id, p) in store.iter() {
            match (find(&format!("optim.m.{}", p.name)), find(&format!("optim.v.{}", p.name))) {
                (Some(m), Some(v)) => {
                    if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state shape for {}", p.name)));
                    }
                    opt.moments[id.0] = Some(Moments {
                        m: m.to_vec(),
                        v: v.to_vec(),
                    });
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("partial optimizer state for {}", p.name))),
            }
        }
        Ok(opt)
    }
}
