//! Linear noise schedule and the forward/reverse diffusion updates.
//!
//! Timesteps are 1-based throughout: `t` ranges over `1..=T`, and
//! `alpha_bar(0)` is defined as 1.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the linear schedule `beta_t = (1e-4 (T - t) + 2e-2 (t - 1)) / (T - 1)`.
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "diffusion needs at least 2 steps, got {steps}"
            )));
        }
        let denom = (steps - 1) as f64;
        let beta: Vec<f64> = (1..=steps)
            .map(|t| (BETA_START * (steps - t) as f64 + BETA_END * (t - 1) as f64) / denom)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let beta_tilde = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b} elements")));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Scalar>(x0: &[T], t: usize, eps: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_step(t)?;
    check_len("forward_noise", x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One reverse step:
/// `eps' = (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat`,
/// `x_{t-1} = (x_t - eps') / sqrt(alpha_t) + [t > 1] sqrt(beta_tilde_t) z`.
pub fn reverse_step<T: Scalar>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    z: &[T],
    sched: &NoiseSchedule,
) -> Result<Vec<T>> {
    sched.check_step(t)?;
    check_len("reverse_step", x_t.len(), eps_hat.len())?;
    let eps_coef = T::of((1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv_sqrt_alpha = T::of(1.0 / sched.alpha(t).sqrt());
    let mut out: Vec<T> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| (x - eps_coef * e) * inv_sqrt_alpha)
        .collect();
    if t > 1 {
        check_len("reverse_step", x_t.len(), z.len())?;
        let sigma = T::of(sched.beta_tilde(t).sqrt());
        for (o, &n) in out.iter_mut().zip(z) {
            *o = *o + sigma * n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn endpoints_match_formula() {
        let s = NoiseSchedule::new(100).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-12);
        assert!((s.beta(100) - 2e-2).abs() < 1e-12);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::new(2).unwrap();
        assert_eq!(s.betas(), &[1e-4, 2e-2]);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.9999 * 0.98).abs() < 1e-15);
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn alpha_bar_matches_sequential_product() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=100 {
            let beta = (1e-4 * (100 - t) as f64 + 2e-2 * (t - 1) as f64) / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100) - prod).abs() / prod < 1e-12);
        // the linear 1e-4..2e-2 schedule keeps ~36% of the signal variance at T = 100
        assert!((s.alpha_bar(100) - 0.3636).abs() < 1e-3, "{}", s.alpha_bar(100));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(matches!(NoiseSchedule::new(1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_noise_degenerate_inputs() {
        let s = NoiseSchedule::new(100).unwrap();
        let x0 = [0.5f64, -1.0, 2.0];
        let zero = [0.0f64; 3];
        let a = forward_noise(&x0, 30, &zero, &s).unwrap();
        for (o, x) in a.iter().zip(&x0) {
            assert_eq!(*o, s.alpha_bar(30).sqrt() * x);
        }
        let b = forward_noise(&zero, 30, &x0, &s).unwrap();
        for (o, e) in b.iter().zip(&x0) {
            assert_eq!(*o, (1.0 - s.alpha_bar(30)).sqrt() * e);
        }
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 101, &zero, &s).is_err());
    }

    #[test]
    fn forward_noise_scalar_recomputation() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(16, &mut rng);
        let eps = randn(16, &mut rng);
        let out = forward_noise(&x0, 50, &eps, &s).unwrap();
        let ab: f64 = (1..=50).map(|t| 1.0 - s.beta(t)).product();
        for i in 0..16 {
            let e = ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i];
            assert!((out[i] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_at_first_step_recovers_x0() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(32, &mut rng);
        let eps = randn(32, &mut rng);
        let z = randn(32, &mut rng);
        let x1 = forward_noise(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, &eps, 1, &z, &s).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_with_zero_noise_rescales() {
        let s = NoiseSchedule::new(100).unwrap();
        let x = [1.0f64, -2.0, 0.25];
        let zero = [0.0; 3];
        let out = reverse_step(&x, &zero, 40, &zero, &s).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - v / s.alpha(40).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_scalar_recomputation() {
        let (t, steps) = (37usize, 100usize);
        let s = NoiseSchedule::new(steps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, e, z) = (randn(8, &mut rng), randn(8, &mut rng), randn(8, &mut rng));
        let out = reverse_step(&x, &e, t, &z, &s).unwrap();
        let beta = |t: usize| (1e-4 * (steps - t) as f64 + 2e-2 * (t - 1) as f64) / (steps - 1) as f64;
        let ab = |t: usize| (1..=t).map(|k| 1.0 - beta(k)).product::<f64>();
        let alpha = 1.0 - beta(t);
        let bt = (1.0 - ab(t - 1)) / (1.0 - ab(t)) * beta(t);
        for i in 0..8 {
            let eps_p = (1.0 - alpha) / (1.0 - ab(t)).sqrt() * e[i];
            let xbar = (x[i] - eps_p) / alpha.sqrt();
            let expected = xbar + bt.sqrt() * z[i];
            assert!((out[i] - expected).abs() < 1e-12, "{} vs {}", out[i], expected);
        }
    }

    #[test]
    fn reverse_is_linear_without_noise() {
        let s = NoiseSchedule::new(50).unwrap();
        let zero = [0.0f64; 2];
        let a = [1.0, 2.0];
        let b = [-3.0, 0.5];
        let sum = [a[0] + b[0] * 2.0, a[1] + b[1] * 2.0];
        let ra = reverse_step(&a, &zero, 20, &zero, &s).unwrap();
        let rb = reverse_step(&b, &zero, 20, &zero, &s).unwrap();
        let rs = reverse_step(&sum, &zero, 20, &zero, &s).unwrap();
        for i in 0..2 {
            assert!((rs[i] - (ra[i] + 2.0 * rb[i])).abs() < 1e-12);
        }
    }
}
