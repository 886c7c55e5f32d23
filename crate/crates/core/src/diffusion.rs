//! Noise schedules, the forward noising process and the spaced ancestral
//! sampler step.
//!
//! Timesteps are 1-based: `t = 1..=T` index `betas[t - 1]`, and `t = 0`
//! denotes the clean signal (`alpha_bar(0) == 1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "ScheduleConfig::default_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "ScheduleConfig::default_t")]
    pub num_timesteps: usize,
    #[serde(default = "ScheduleConfig::default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "ScheduleConfig::default_beta_end")]
    pub beta_end: f64,
}

impl ScheduleConfig {
    fn default_kind() -> ScheduleKind {
        ScheduleKind::Linear
    }
    fn default_t() -> usize {
        1000
    }
    fn default_beta_start() -> f64 {
        1e-4
    }
    fn default_beta_end() -> f64 {
        0.02
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        make_schedule(config.kind, config.num_timesteps, config.beta_start, config.beta_end)
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(kind: ScheduleKind, num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..num_timesteps)
            .map(|i| {
                if num_timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_timesteps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            kind,
            num_timesteps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

/// Strictly decreasing subset of `1..=T` visited by the sampler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepSpacing {
    steps: Vec<usize>,
}

impl TimestepSpacing {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// `(t, t_prev)` pairs, ending with `(last, 0)`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(move |(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// `S` evenly strided timesteps from `T` downward: `t_i = T - floor(i * T / S)`.
pub fn spaced_steps(num_timesteps: usize, count: usize) -> Result<TimestepSpacing> {
    if count == 0 || count > num_timesteps {
        return Err(Error::InvalidArgument(format!(
            "step count {count} outside 1..={num_timesteps}"
        )));
    }
    let steps = (0..count)
        .map(|i| num_timesteps - i * num_timesteps / count)
        .collect();
    Ok(TimestepSpacing { steps })
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// [`q_sample`] over a batch `[B, ...]` with one timestep per sample.
pub fn q_sample_batch<T: Scalar>(z0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&ts.len()) {
        return Err(Error::shape(
            "q_sample_batch",
            format!("{:?}, eps {:?}, {} timesteps", z0.shape(), eps.shape(), ts.len()),
        ));
    }
    let per = z0.len() / ts.len().max(1);
    let mut coef = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        coef.push((T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt())));
    }
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let (a, b) = coef[i / per];
            a * z + b * e
        })
        .collect();
    Tensor::new(z0.shape(), data)
}

/// Invert the forward map: `z0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0_from_eps<T: Scalar>(z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    z_t.zip_map(eps_hat, |z, e| (z - n * e) / s)
}

/// Closed interval applied to predicted clean latents before the posterior mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampRange {
    pub min: f64,
    pub max: f64,
}

/// One ancestral step from `t` to `t_prev` of a (possibly spaced) schedule.
///
/// The effective beta is `1 - abar_t / abar_prev`; the posterior variance is
/// the fixed `beta_tilde`. No noise is added when `t_prev == 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
    clamp: Option<ClampRange>,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "sampler step must decrease, got {t} -> {t_prev}"
        )));
    }
    sched.check_t(t)?;
    if noise.shape() != z_t.shape() {
        return Err(Error::shape("ddpm_step", format!("noise {:?} vs {:?}", noise.shape(), z_t.shape())));
    }
    let mut z0 = predict_x0_from_eps(z_t, t, eps_hat, sched)?;
    if let Some(c) = clamp {
        let (lo, hi) = (T::from_f64(c.min), T::from_f64(c.max));
        z0 = z0.map(|v| v.max(lo).min(hi));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let beta = 1.0 - ab_t / ab_prev;
    let c0 = T::from_f64(ab_prev.sqrt() * beta / (1.0 - ab_t));
    let ct = T::from_f64((1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab_t));
    let mean = z0.zip_map(z_t, |a, b| c0 * a + ct * b)?;
    if t_prev == 0 {
        return Ok(z0);
    }
    let sigma = T::from_f64((beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt());
    mean.zip_map(noise, |m, n| m + sigma * n)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn defaults() -> NoiseSchedule {
        make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    /// Independent product oracle: abar_t = prod_{s<=t} (1 - beta_s).
    fn abar_oracle(t: usize) -> f64 {
        (1..=t)
            .map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 999.0))
            .product()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn default_schedule_matches_product_oracle() {
        let s = defaults();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        for t in [1, 2, 10, 500, 999, 1000] {
            assert!((s.alpha_bar(t) - abar_oracle(t)).abs() < 1e-12, "t={t}");
        }
        // frozen regression value, computed by `abar_oracle(1000)`
        assert!((s.alpha_bar(1000) - 4.035_829_765_375_675e-5).abs() < 1e-17, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn schedule_invariants() {
        let s = defaults();
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn schedule_rejects_bad_range() {
        assert!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_trivial_cases() {
        let s = defaults();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let z0 = Tensor::<f64>::randn(&[2, 3], &mut r);
        let eps = Tensor::<f64>::randn(&[2, 3], &mut r);
        let t = 300;
        let zero = Tensor::zeros(&[2, 3]);
        let a = q_sample(&z0, t, &zero, &s).unwrap();
        for (x, z) in a.data().iter().zip(z0.data()) {
            assert!((x - s.alpha_bar(t).sqrt() * z).abs() < 1e-15);
        }
        let b = q_sample(&zero, t, &eps, &s).unwrap();
        for (x, e) in b.data().iter().zip(eps.data()) {
            assert!((x - (1.0 - s.alpha_bar(t)).sqrt() * e).abs() < 1e-15);
        }
        assert!(q_sample(&z0, 0, &eps, &s).is_err());
        assert!(q_sample(&z0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn x0_prediction_inverts_forward() {
        let s = defaults();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let z0 = Tensor::<f32>::randn(&[4, 8], &mut r);
        let eps = Tensor::<f32>::randn(&[4, 8], &mut r);
        for t in [1, 10, 250, 500, 900] {
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let back = predict_x0_from_eps(&zt, t, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&z0) < 1e-5 * (1.0 / s.alpha_bar(t).sqrt()).max(1.0), "t={t}");
        }
        let zt = Tensor::<f64>::randn(&[3], &mut r);
        let zero = Tensor::zeros(&[3]);
        let x = predict_x0_from_eps(&zt, 7, &zero, &s).unwrap();
        for (a, b) in x.data().iter().zip(zt.data()) {
            assert!((a - b / s.alpha_bar(7).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn x0_roundtrip_every_step_of_short_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=50 {
            let z0 = Tensor::<f64>::randn(&[16], &mut r);
            let eps = Tensor::<f64>::randn(&[16], &mut r);
            // compose forward with inverse through the explicit formulas
            let ab: f64 = (1..=t).map(|k| 1.0 - s.betas[k - 1]).product();
            let zt = Tensor::from_fn(&[16], |i| ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]);
            let back = predict_x0_from_eps(&zt, t, &eps, &s).unwrap();
            assert!(back.max_abs_diff(&z0) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn spacing_cases() {
        let full = spaced_steps(7, 7).unwrap();
        assert_eq!(full.steps(), &[7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(spaced_steps(1000, 1).unwrap().steps(), &[1000]);
        let reference: Vec<usize> = (1..=50).rev().map(|j| j * 20).collect();
        assert_eq!(spaced_steps(1000, 50).unwrap().steps(), reference.as_slice());
        assert!(spaced_steps(10, 0).is_err());
        assert!(spaced_steps(10, 11).is_err());
        let odd = spaced_steps(1000, 33).unwrap();
        assert_eq!(odd.steps()[0], 1000);
        assert!(odd.steps().windows(2).all(|w| w[0] > w[1]));
        assert!(*odd.steps().last().unwrap() >= 1);
        let pairs: Vec<_> = spaced_steps(10, 2).unwrap().pairs().collect();
        assert_eq!(pairs, vec![(10, 5), (5, 0)]);
    }

    #[test]
    fn ddpm_terminal_step_returns_clean_estimate() {
        let s = defaults();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::<f64>::uniform(&[10], -0.9, 0.9, &mut r);
        let eps = Tensor::<f64>::randn(&[10], &mut r);
        let zt = q_sample(&z0, 1000, &eps, &s).unwrap();
        let noise = Tensor::randn(&[10], &mut r);
        let clamp = Some(ClampRange { min: -1.0, max: 1.0 });
        let out = ddpm_step(&zt, 1000, 0, &eps, &s, &noise, clamp).unwrap();
        let direct = predict_x0_from_eps(&zt, 1000, &eps, &s).unwrap().map(|v| v.clamp(-1.0, 1.0));
        assert_eq!(out, direct);
        assert!(out.max_abs_diff(&z0) < 1e-9);
        assert!(ddpm_step(&zt, 5, 5, &eps, &s, &noise, None).is_err());
        assert!(ddpm_step(&zt, 5, 9, &eps, &s, &noise, None).is_err());
    }

    #[test]
    fn ddpm_step_clamps_before_mean() {
        let s = defaults();
        let zt = Tensor::<f64>::full(&[4], 50.0);
        let eps = Tensor::zeros(&[4]);
        let noise = Tensor::zeros(&[4]);
        let out = ddpm_step(&zt, 1, 0, &eps, &s, &noise, Some(ClampRange { min: -2.0, max: 2.0 })).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn oracle_denoiser_trajectory_recovers_z0() {
        let s = defaults();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for count in [1, 10, 50] {
            let z0 = Tensor::<f32>::uniform(&[4, 8, 8], -1.5, 1.5, &mut r);
            let mut z = Tensor::<f32>::randn(&[4, 8, 8], &mut r);
            let spacing = spaced_steps(1000, count).unwrap();
            for (t, tp) in spacing.pairs() {
                let ab = s.alpha_bar(t);
                let eps_hat = z
                    .zip_map(&z0, |zt, x| (zt - (ab.sqrt() as f32) * x) / ((1.0 - ab).sqrt() as f32))
                    .unwrap();
                let noise = Tensor::randn(z.shape(), &mut r);
                z = ddpm_step(&z, t, tp, &eps_hat, &s, &noise, Some(ClampRange { min: -3.0, max: 3.0 })).unwrap();
            }
            assert!(z.max_abs_diff(&z0) < 1e-3, "S={count}: {}", z.max_abs_diff(&z0));
        }
    }
}
