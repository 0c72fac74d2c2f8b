//! Noise schedule, forward noising, the ancestral reverse step and the
//! noise-prediction loss.
//!
//! Timesteps are 1-based: `t = 1` is the first noising step and `t = T` the
//! last. `alpha_bar(t)` is the cumulative product `∏_{s≤t} (1 - β_s)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Parameters of a linear β schedule, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed β, ᾱ and σ tables.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// β linearly spaced from `beta_1` to `beta_t` inclusive over `steps` steps.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
    ensure!(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0, "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}");
    let beta: Vec<f64> = (0..steps).map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { params: ScheduleParams { steps, beta_start: beta_1, beta_end: beta_t }, beta, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        Ok(())
    }
}

/// Closed-form marginal `√ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
pub fn forward_sample(x0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    ensure!(x0.len() == eps.len(), "x0 has {} elements but eps has {}", x0.len(), eps.len());
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

/// One noising transition `x_t = √(1-β_t)·x_{t-1} + √β_t·ε`.
pub fn forward_step(x_prev: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    ensure!(x_prev.len() == eps.len(), "shape mismatch: {} vs {}", x_prev.len(), eps.len());
    schedule.check_t(t)?;
    let beta = schedule.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(x_prev.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

/// Ancestral update
/// `x_{t-1} = (x_t - β_t/√(1-ᾱ_t)·ε̂) / √(1-β_t) + σ_t·z`, written in place.
pub fn reverse_step_in_place(x: &mut [f32], t: usize, eps_hat: &[f32], z: &[f32], schedule: &NoiseSchedule) -> Result<()> {
    ensure!(t >= 1, "reverse step needs t >= 1");
    schedule.check_t(t)?;
    ensure!(x.len() == eps_hat.len() && x.len() == z.len(), "shape mismatch: x {}, eps_hat {}, z {}", x.len(), eps_hat.len(), z.len());
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sigma = schedule.sigma(t);
    for ((v, &e), &n) in x.iter_mut().zip(eps_hat).zip(z) {
        *v = (inv * (*v as f64 - coef * e as f64) + sigma * n as f64) as f32;
    }
    Ok(())
}

pub fn reverse_step(x_t: &[f32], t: usize, eps_hat: &[f32], z: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    let mut x = x_t.to_vec();
    reverse_step_in_place(&mut x, t, eps_hat, z, schedule)?;
    Ok(x)
}

/// Per-pixel penalty in the noise-prediction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

/// Mean over pixels of `|ε - ε̂|²` (or `|ε - ε̂|` for [`LossKind::Mae`]).
pub fn training_loss(eps: &[f32], eps_hat: &[f32], kind: LossKind) -> Result<f64> {
    ensure!(eps.len() == eps_hat.len(), "shape mismatch: {} vs {}", eps.len(), eps_hat.len());
    ensure!(!eps.is_empty(), "empty arrays");
    let sum: f64 = eps
        .iter()
        .zip(eps_hat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            match kind {
                LossKind::Mse => d * d,
                LossKind::Mae => d.abs(),
            }
        })
        .sum();
    Ok(sum / eps.len() as f64)
}

/// Maps `[0, 1]` intensities to the model's `[-1, 1]` range.
pub fn to_model_range(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Clips to `[-1, 1]` and maps back to `[0, 1]`.
pub fn from_model_range(x: f32) -> f32 {
    (x.clamp(-1.0, 1.0) + 1.0) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn default_schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn schedule_endpoints() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // Independent product in log space.
        let log_prod: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        let expect = log_prod.exp();
        assert!((s.alpha_bar(1000) - expect).abs() / expect < 1e-8);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() / 4.0e-5 < 0.1);
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0 && a.is_finite()));
        for t in 1..=1000 {
            assert!((s.sigma(t).powi(2) - s.beta(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_special_cases() {
        let s = default_schedule();
        let x0 = vec![0.5f32, -0.25, 1.0];
        let y = forward_sample(&x0, 1, &[0.0; 3], &s).unwrap();
        for (a, b) in y.iter().zip(&x0) {
            assert!((a - 0.9999f32.sqrt() * b).abs() < 1e-7);
        }
        let eps = vec![1.0f32, -2.0, 0.5];
        let y = forward_sample(&[0.0; 3], 700, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(700)).sqrt() as f32;
        for (a, e) in y.iter().zip(&eps) {
            assert!((a - k * e).abs() < 1e-6);
        }
        assert!(forward_sample(&x0, 1, &[0.0; 2], &s).is_err());
        assert!(forward_sample(&x0, 0, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn stepwise_and_closed_form_marginals_agree() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (trials, steps, x0) = (10_000usize, 50usize, 0.7f32);
        let (mut step_vals, mut closed_vals) = (Vec::new(), Vec::new());
        for _ in 0..trials {
            let mut x = vec![x0];
            for t in 1..=steps {
                x = forward_step(&x, t, &normals(1, &mut rng), &s).unwrap();
            }
            step_vals.push(x[0] as f64);
            closed_vals.push(forward_sample(&[x0], steps, &normals(1, &mut rng), &s).unwrap()[0] as f64);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
        };
        let (m1, v1) = stats(&step_vals);
        let (m2, v2) = stats(&closed_vals);
        let n = trials as f64;
        let se_mean = ((v1 + v2) / n).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_mean, "means {m1} vs {m2}");
        // Normal data: Var(s²) ≈ 2σ⁴/(n-1).
        let se_var = (2.0 * v1 * v1 / n + 2.0 * v2 * v2 / n).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se_var, "variances {v1} vs {v2}");
        // And both match the analytic marginal.
        let ab = s.alpha_bar(steps);
        assert!((m2 - ab.sqrt() * x0 as f64).abs() < 3.0 * (v2 / n).sqrt());
    }

    #[test]
    fn reverse_step_examples() {
        let s = default_schedule();
        let x = vec![0.3f32, -1.2];
        let y = reverse_step(&x, 500, &[0.0; 2], &[0.0; 2], &s).unwrap();
        let inv = 1.0 / (1.0 - s.beta(500)).sqrt();
        for (a, b) in y.iter().zip(&x) {
            assert!((*a as f64 - inv * *b as f64).abs() < 1e-6);
        }
        // z enters with coefficient sqrt(beta_t).
        let y0 = reverse_step(&x, 500, &[0.1; 2], &[0.0; 2], &s).unwrap();
        let y1 = reverse_step(&x, 500, &[0.1; 2], &[1.0; 2], &s).unwrap();
        assert!(((y1[0] - y0[0]) as f64 - s.beta(500).sqrt()).abs() < 1e-6);
        assert!(reverse_step(&x, 0, &[0.0; 2], &[0.0; 2], &s).is_err());
    }

    #[test]
    fn reverse_step_matches_independent_formula_at_t2() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, e, z) = (normals(64, &mut rng), normals(64, &mut rng), normals(64, &mut rng));
        let got = reverse_step(&x, 2, &e, &z, &s).unwrap();
        // β_2 and ᾱ_2 computed from scratch.
        let b1: f64 = 1e-4;
        let b2: f64 = 1e-4 + (0.02 - 1e-4) / 999.0;
        let ab2 = (1.0 - b1) * (1.0 - b2);
        for i in 0..64 {
            let want = (x[i] as f64 - b2 / (1.0 - ab2).sqrt() * e[i] as f64) / (1.0 - b2).sqrt() + b2.sqrt() * z[i] as f64;
            assert!((got[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_inverts_a_forward_step_given_true_noise() {
        // With eps_hat = true per-step noise rescaled to the reverse
        // parameterisation, a z = 0 step recovers x_{t-1}.
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &t in &[1usize, 2, 100, 999, 1000] {
            let prev = normals(32, &mut rng);
            let e = normals(32, &mut rng);
            let xt = forward_step(&prev, t, &e, &s).unwrap();
            // x_t - β/√(1-ᾱ)·ε̂ = √(1-β)·x_{t-1}  ⇔  ε̂ = √(1-ᾱ)/√β · ε
            let k = ((1.0 - s.alpha_bar(t)) / s.beta(t)).sqrt();
            let eps_hat: Vec<f32> = e.iter().map(|&v| (k * v as f64) as f32).collect();
            let back = reverse_step(&xt, t, &eps_hat, &[0.0; 32], &s).unwrap();
            for (a, b) in back.iter().zip(&prev) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (normals(100, &mut rng), normals(100, &mut rng));
        assert_eq!(training_loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert!((training_loss(&[0.0; 8], &[0.5; 8], LossKind::Mse).unwrap() - 0.25).abs() < 1e-15);
        let mut brute = 0.0;
        for i in 0..100 {
            brute += ((a[i] - b[i]) as f64).powi(2);
        }
        assert!((training_loss(&a, &b, LossKind::Mse).unwrap() - brute / 100.0).abs() < 1e-7);
        assert!((training_loss(&[0.0; 4], &[-0.5; 4], LossKind::Mae).unwrap() - 0.5).abs() < 1e-15);
        assert!(training_loss(&a, &b[..10], LossKind::Mse).is_err());
    }

    #[test]
    fn model_range_round_trip_clips() {
        assert_eq!(to_model_range(0.0), -1.0);
        assert_eq!(to_model_range(1.0), 1.0);
        assert_eq!(from_model_range(-3.0), 0.0);
        assert_eq!(from_model_range(2.0), 1.0);
        assert_eq!(from_model_range(to_model_range(0.25)), 0.25);
    }
}
