//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementation it checks.

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-3,
            max_entries_per_tensor: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries_checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.entries_checked += 1;
        if rel >= self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }
}

fn strided(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let step = len as f64 / max as f64;
    (0..max).map(|i| (i as f64 * step) as usize).collect()
}

fn eval<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compare analytic gradients of the scalar produced by `f` against central
/// differences, for every trainable parameter in `store` and every input.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let pg: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                (
                    id,
                    grads
                        .param(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape())),
                )
            })
            .collect();
        let ig: Vec<_> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (pg, ig)
    };

    let h = opts.step;
    let mut report = GradCheckReport::default();
    let mut scratch = store.clone();
    for (id, analytic) in &param_grads {
        let base = store.tensor(*id).clone();
        for i in strided(base.len(), opts.max_entries_per_tensor) {
            let mut plus = base.to_vec();
            plus[i] += h;
            scratch.set_tensor(*id, Tensor::new(base.shape(), plus)?)?;
            let fp = eval(&scratch, inputs, &f)?;
            let mut minus = base.to_vec();
            minus[i] -= h;
            scratch.set_tensor(*id, Tensor::new(base.shape(), minus)?)?;
            let fm = eval(&scratch, inputs, &f)?;
            let numeric = (fp - fm) / (2.0 * h);
            report.record(|| format!("{}[{i}]", store.get(*id).name), analytic.data()[i], numeric, opts.floor);
        }
        scratch.set_tensor(*id, base)?;
    }
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in strided(inputs[k].len(), opts.max_entries_per_tensor) {
            let mut shifted = inputs.to_vec();
            let mut plus = inputs[k].to_vec();
            plus[i] += h;
            shifted[k] = Tensor::new(inputs[k].shape(), plus)?;
            let fp = eval(store, &shifted, &f)?;
            let mut minus = inputs[k].to_vec();
            minus[i] -= h;
            shifted[k] = Tensor::new(inputs[k].shape(), minus)?;
            let fm = eval(store, &shifted, &f)?;
            let numeric = (fp - fm) / (2.0 * h);
            report.record(|| format!("input{k}[{i}]"), analytic.data()[i], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Add `N(0, std^2)` noise to every parameter so zero-initialized
/// projections do not hide gradient paths from a check.
pub fn perturb_params(store: &mut ParamStore<f64>, std: f64, rng: &mut impl rand::Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = store.tensor(id);
        let noise = Tensor::<f64>::randn(t.shape(), rng);
        let next = t.zip_map(&noise, |a, b| a + std * b).expect("same shape");
        store.set_tensor(id, next).expect("same shape");
    }
}
