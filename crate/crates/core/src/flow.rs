//! Flow-matching mathematics on the straight interpolation path and the
//! stochastic sampler built on it.
//!
//! Time runs from the noise end (`t → 1`) to the data end (`t → 0`): the
//! path is `x_t = (1 − t)·x0 + t·x1` with `x0` a data point and `x1` a
//! standard-normal draw, so the regression target `x1 − x0` points from
//! data toward noise and generation integrates `t` downward. Every
//! transition therefore maps `x_t → x_{t−Δt}` with a positive step `Δt`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{self, backward_into, forward_tape, GradVector, ParamVector, Tape};
use crate::rollout::Condition;

/// Lower bound applied to the transition variance inside log-densities.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Noise level `a` in `σ_t = a·√(t/(1−t))`.
    pub a: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { a: 0.7 }
    }
}

impl NoiseSchedule {
    pub fn sigma(&self, t: f64) -> Result<f64> {
        sigma(t, self)
    }
}

pub fn sigma(t: f64, schedule: &NoiseSchedule) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(schedule.a * (t / (1.0 - t)).sqrt())
}

/// Uniform descending grid `t_max = t_0 > t_1 > … > t_T = t_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, t_min: f64, t_max: f64) -> Result<Self> {
        let grid = TimeGrid { steps, t_min, t_max };
        grid.validate()?;
        Ok(grid)
    }

    pub fn training() -> Self {
        TimeGrid {
            steps: 10,
            t_min: 0.02,
            t_max: 0.98,
        }
    }

    pub fn evaluation() -> Self {
        TimeGrid {
            steps: 40,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "time grid bounds must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_max - self.t_min) / self.steps as f64
    }

    /// Grid point `k` for `k = 0..=steps`, descending.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_min
        } else {
            self.t_max - k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// One point on the interpolation path between a data point `x0` (t = 0)
/// and a noise draw `x1` (t = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub target_v: Vec<f64>,
    pub condition: Condition,
}

impl PathSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64, condition: Condition) -> Result<Self> {
        let x_t = ot_interpolate(&x0, &x1, t)?;
        let target_v = x1.iter().zip(&x0).map(|(b, a)| b - a).collect();
        Ok(PathSample {
            x0,
            x1,
            t,
            x_t,
            target_v,
            condition,
        })
    }
}

pub fn ot_interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::DimensionMismatch {
            what: "path endpoints",
            expected: x0.len(),
            got: x1.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Network input for the velocity field: state, time, then the condition
/// embedding padded to the architecture's width.
pub fn model_input(params: &ParamVector, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>> {
    let arch = params.arch();
    let cond_width = arch
        .input_dim
        .checked_sub(arch.output_dim + 1)
        .ok_or_else(|| Error::InvalidArch("input too narrow for state and time".into()))?;
    if x.len() != arch.output_dim {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: arch.output_dim,
            got: x.len(),
        });
    }
    let mut input = Vec::with_capacity(arch.input_dim);
    input.extend_from_slice(x);
    input.push(t);
    c.embed_into(cond_width, &mut input)?;
    Ok(input)
}

pub fn velocity(params: &ParamVector, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>> {
    numgrad::forward(params, &model_input(params, x, t, c)?)
}

pub fn velocity_tape(params: &ParamVector, x: &[f64], t: f64, c: &Condition) -> Result<Tape> {
    forward_tape(params, &model_input(params, x, t, c)?)
}

/// Mean of `‖v_θ(x_t, t, c) − (x1 − x0)‖²` over the batch, with its gradient.
pub fn fm_loss(params: &ParamVector, batch: &[PathSample]) -> Result<(f64, GradVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty flow-matching batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = GradVector::zeros(params.len());
    let mut loss = 0.0;
    for s in batch {
        let tape = velocity_tape(params, &s.x_t, s.t, &s.condition)?;
        let resid: Vec<f64> = tape.output().iter().zip(&s.target_v).map(|(v, y)| v - y).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        backward_into(params, &tape, &resid, 2.0 / n, &mut grad.values)?;
    }
    Ok((loss / n, grad))
}

/// Drift of the marginal-preserving SDE, written for the descending-time
/// sampler: `v + σ_t²/(2t) · (x + (1 − t)·v)`.
pub fn sde_drift(v: &[f64], x: &[f64], t: f64, sigma_t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    if v.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "velocity",
            expected: x.len(),
            got: v.len(),
        });
    }
    let k = sigma_t * sigma_t / (2.0 * t);
    Ok(v.iter().zip(x).map(|(vi, xi)| vi + k * (xi + (1.0 - t) * vi)).collect())
}

/// Transition mean for the step `t → t − dt` given the velocity at `(x_t, t)`.
pub fn mean_from_velocity(x_t: &[f64], v: &[f64], t: f64, dt: f64, sigma_t: f64) -> Result<Vec<f64>> {
    let drift = sde_drift(v, x_t, t, sigma_t)?;
    Ok(x_t.iter().zip(&drift).map(|(x, d)| x - d * dt).collect())
}

/// `∂μ/∂v`, a multiple of the identity: `−dt·(1 + σ_t²(1 − t)/(2t))`.
pub fn mean_velocity_gain(t: f64, sigma_t: f64, dt: f64) -> f64 {
    -dt * (1.0 + sigma_t * sigma_t * (1.0 - t) / (2.0 * t))
}

pub fn em_step(x_t: &[f64], v: &[f64], t: f64, dt: f64, sigma_t: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != x_t.len() {
        return Err(Error::DimensionMismatch {
            what: "noise",
            expected: x_t.len(),
            got: noise.len(),
        });
    }
    let mu = mean_from_velocity(x_t, v, t, dt, sigma_t)?;
    let scale = sigma_t * dt.sqrt();
    Ok(mu.iter().zip(noise).map(|(m, z)| m + scale * z).collect())
}

pub fn transition_mean(
    params: &ParamVector,
    x_t: &[f64],
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
    c: &Condition,
) -> Result<Vec<f64>> {
    let v = velocity(params, x_t, t, c)?;
    mean_from_velocity(x_t, &v, t, dt, schedule.sigma(t)?)
}

pub fn transition_variance(sigma_t: f64, dt: f64) -> f64 {
    sigma_t * sigma_t * dt
}

/// Log-density of `N(mu, variance·I)` at `x_next`.
pub fn transition_logprob(x_next: &[f64], mu: &[f64], variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::NonPositiveVariance(variance));
    }
    if x_next.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            what: "transition sample",
            expected: mu.len(),
            got: x_next.len(),
        });
    }
    let var = variance.max(VARIANCE_FLOOR);
    let sq: f64 = x_next.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = mu.len() as f64;
    Ok(-0.5 * (sq / var + d * (2.0 * std::f64::consts::PI * var).ln()))
}

/// Closed-form KL(N(μ1, Σ1) ‖ N(μ2, Σ2)) for full covariances.
pub fn gaussian_kl_general(mu1: &[f64], sigma1: &DMatrix<f64>, mu2: &[f64], sigma2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            what: "gaussian parameters",
            expected: d,
            got: mu2.len(),
        });
    }
    for s in [sigma1, sigma2] {
        let asym = (s - s.transpose()).abs().max();
        if asym > 1e-12 * s.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
    }
    let chol1 = sigma1.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let chol2 = sigma2.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol2.solve(sigma1).trace();
    let diff = DVector::from_iterator(d, mu1.iter().zip(mu2).map(|(a, b)| a - b));
    let quad = diff.dot(&chol2.solve(&diff));
    let kl = 0.5 * (trace - d as f64 + quad + logdet(&chol2.l()) - logdet(&chol1.l()));
    // rounding can leave a tiny negative residue for identical inputs
    Ok(kl.max(0.0))
}

/// KL between two isotropic Gaussians sharing variance `σ_t²·dt`.
pub fn kl_means(mu_theta: &[f64], mu_target: &[f64], sigma_t: f64, dt: f64) -> f64 {
    let sq: f64 = mu_theta.iter().zip(mu_target).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * sigma_t * sigma_t * dt)
}

pub fn weight_w(t: f64, sigma_t: f64, dt: f64) -> f64 {
    let inner = sigma_t * (1.0 - t) / (2.0 * t) + 1.0 / sigma_t;
    0.5 * dt * inner * inner
}

pub fn kl_velocities(v_theta: &[f64], v_target: &[f64], t: f64, sigma_t: f64, dt: f64) -> f64 {
    let sq: f64 = v_theta.iter().zip(v_target).map(|(a, b)| (a - b) * (a - b)).sum();
    weight_w(t, sigma_t, dt) * sq
}
