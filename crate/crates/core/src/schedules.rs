//! Variance-preserving noise schedules and the x / ε / v conversions.
//!
//! With `x_t = α_t x + σ_t ε` and `v = α_t ε − σ_t x`, the map
//! `(x, ε) ↦ (x_t, v)` is a rotation because `α_t² + σ_t² = 1`, so its
//! inverse is its transpose (see [`from_v`]).

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Sample,
    Epsilon,
    Velocity,
}

/// Precomputed `α_t`, `σ_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear β schedule (linear in `sqrt(β)`) over `steps` steps.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut alpha_bar = 1.0f64;
        for i in 0..steps {
            let r = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let sb = s0 + (s1 - s0) * r;
            alpha_bar *= 1.0 - sb * sb;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self { steps, alpha, sigma })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn coeffs(&self, t: usize) -> Result<(f64, f64)> {
        if t > self.steps {
            return Err(Error::param(format!("timestep {t} outside [0, {}]", self.steps)));
        }
        Ok((self.alpha[t], self.sigma[t]))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// `x_t = α_t x + σ_t ε`.
pub fn noise(x: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, s) = sched.coeffs(t)?;
    x.zip_map(eps, |x, e| a * x + s * e)
}

/// `v = α_t ε − σ_t x`.
pub fn to_v(x: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, s) = sched.coeffs(t)?;
    x.zip_map(eps, |x, e| a * e - s * x)
}

/// Recovers `(x̂, ε̂)` from `(x_t, v)`.
pub fn from_v(x_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let (a, s) = sched.coeffs(t)?;
    let x_hat = x_t.zip_map(v, |z, v| a * z - s * v)?;
    let eps_hat = x_t.zip_map(v, |z, v| s * z + a * v)?;
    Ok((x_hat, eps_hat))
}

/// Converts a model output of any parameterization into `(x̂, ε̂)`.
///
/// `Sample` and `Epsilon` divide by `σ_t` and `α_t` respectively, so they
/// are undefined at the corresponding endpoint.
pub fn to_sample_and_eps(
    x_t: &Tensor,
    output: &Tensor,
    kind: Parameterization,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    let (a, s) = sched.coeffs(t)?;
    match kind {
        Parameterization::Velocity => from_v(x_t, output, t, sched),
        Parameterization::Epsilon => {
            if a == 0.0 {
                return Err(Error::param("epsilon parameterization needs alpha_t > 0"));
            }
            let x_hat = x_t.zip_map(output, |z, e| (z - s * e) / a)?;
            Ok((x_hat, output.clone()))
        }
        Parameterization::Sample => {
            if s == 0.0 {
                return Err(Error::param("sample parameterization needs sigma_t > 0"));
            }
            let eps = x_t.zip_map(output, |z, x| (z - a * x) / s)?;
            Ok((output.clone(), eps))
        }
    }
}
