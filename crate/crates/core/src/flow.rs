//! Rectified-flow reference machinery with closed-form velocities.
//!
//! Targets are isotropic Gaussian mixtures (a zero variance gives a point
//! mass), so the optimal velocity field is available exactly and no learned
//! model is needed to check distance and constancy properties.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Guard keeping evaluation times away from the `1 / (1 - t)` pole.
pub const T_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance; zero means a point mass.
    #[serde(default)]
    pub variance: f64,
}

/// Weighted mixture of isotropic Gaussians in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTarget {
    components: Vec<Component>,
    dim: usize,
}

impl MixtureTarget {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(invalid(format!("component {i} has dimension {}, expected {dim}", c.mean.len())));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(invalid(format!("component {i} has invalid weight {}", c.weight)));
            }
            if !(c.variance >= 0.0 && c.variance.is_finite()) {
                return Err(invalid(format!("component {i} has invalid variance {}", c.variance)));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("component {i} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    pub fn point_mass(mean: Vec<f64>) -> Result<Self> {
        Self::new(vec![Component { weight: 1.0, mean, variance: 0.0 }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Posterior component probabilities given `x = alpha * x1 + sigma * x0`
    /// with standard normal `x0`.
    pub fn responsibilities(&self, x: &[f64], alpha: f64, sigma: f64) -> Result<Vec<f64>> {
        check_dim(x.len(), self.dim)?;
        let d = self.dim as f64;
        let mut logw = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s2 = alpha * alpha * c.variance + sigma * sigma;
            if c.weight == 0.0 {
                logw.push(f64::NEG_INFINITY);
                continue;
            }
            if s2 <= 0.0 {
                return Err(Error::Singularity(format!(
                    "posterior variance vanishes at alpha={alpha}, sigma={sigma}"
                )));
            }
            let r2: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - alpha * mi).powi(2)).sum();
            logw.push(c.weight.ln() - r2 / (2.0 * s2) - 0.5 * d * s2.ln());
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for wi in &mut w {
            *wi /= z;
        }
        Ok(w)
    }

    /// `E[x1 | x]` on the path `x = alpha * x1 + sigma * x0`.
    pub fn posterior_mean(&self, x: &[f64], alpha: f64, sigma: f64) -> Result<Vec<f64>> {
        let w = self.responsibilities(x, alpha, sigma)?;
        let mut m = vec![0.0; self.dim];
        for (c, wi) in self.components.iter().zip(&w) {
            if *wi == 0.0 {
                continue;
            }
            let s2 = alpha * alpha * c.variance + sigma * sigma;
            let gain = alpha * c.variance / s2;
            for j in 0..self.dim {
                m[j] += wi * (c.mean[j] + gain * (x[j] - alpha * c.mean[j]));
            }
        }
        Ok(m)
    }
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid(format!("dimension mismatch: {got} vs {want}")));
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| t * b + (1.0 - t) * a).collect())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    if t > 1.0 - T_EPS + 1e-12 {
        return Err(Error::Singularity(format!("t = {t} is within {T_EPS} of 1")));
    }
    Ok(())
}

/// Optimal rectified-flow velocity `(E[x1 | x_t] - x_t) / (1 - t)`.
pub fn oracle_velocity(target: &MixtureTarget, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    let m = target.posterior_mean(x_t, t, 1.0 - t)?;
    let inv = 1.0 / (1.0 - t);
    Ok(m.iter().zip(x_t).map(|(mi, xi)| (mi - xi) * inv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub source: Vec<f64>,
    pub component: Option<usize>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the source state")
    }
}

/// Explicit Euler on the grid `t_k = k / steps`.
///
/// The returned trajectory holds `steps + 1` states including the source.
/// Velocity evaluations use `min(t_k, 1 - T_EPS)`.
pub fn euler_integrate<F>(mut velocity_fn: F, x0: &[f64], steps: usize) -> Result<Trajectory>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(invalid("euler_integrate needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        let t = (k as f64 * dt).min(1.0 - T_EPS);
        let v = velocity_fn(&x, t)?;
        check_dim(v.len(), x.len())?;
        if let Some(i) = v.iter().position(|vi| !vi.is_finite()) {
            return Err(Error::Numeric {
                step: k,
                detail: format!("velocity component {i} is {}", v[i]),
            });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        times.push((k + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        source: x0.to_vec(),
        component: None,
    })
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `||vA - vB|| - ||x0A - x0B||`; positive values indicate diverging outcomes.
pub fn latent_distance(va: &[f64], vb: &[f64], x0a: &[f64], x0b: &[f64]) -> Result<f64> {
    let d = va.len();
    for n in [vb.len(), x0a.len(), x0b.len()] {
        check_dim(n, d)?;
    }
    Ok(l2_diff(va, vb) - l2_diff(x0a, x0b))
}

/// A `(source, target)` pair defining one straight path.
#[derive(Debug, Clone, Copy)]
pub struct PathPair<'a> {
    pub x0: &'a [f64],
    pub x1: &'a [f64],
}

/// `||v(x_tA, t) - v(x_tB, t)||` for each `t` in the grid, with both points
/// placed on their straight paths.
pub fn velocity_constancy_profile(
    target: &MixtureTarget,
    a: PathPair<'_>,
    b: PathPair<'_>,
    grid: &[f64],
) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&t| {
            if !(0.0..=0.9).contains(&t) {
                return Err(invalid(format!("profile time {t} outside [0, 0.9]")));
            }
            let xa = interpolate(a.x0, a.x1, t)?;
            let xb = interpolate(b.x0, b.x1, t)?;
            let va = oracle_velocity(target, &xa, t)?;
            let vb = oracle_velocity(target, &xb, t)?;
            Ok(l2_diff(&va, &vb))
        })
        .collect()
}

/// Discrete `alpha(t_k)`, `sigma(t_k)` for a path `x = alpha * x1 + sigma * x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub times: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// How to difference at index 0, where no previous sample exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstIndex {
    #[default]
    Reject,
    Forward,
}

impl NoiseSchedule {
    pub fn new(times: Vec<f64>, alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if times.len() != alpha.len() || times.len() != sigma.len() {
            return Err(invalid("schedule arrays must have equal length"));
        }
        if times.len() < 2 {
            return Err(invalid("schedule needs at least two entries"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("schedule times must be strictly increasing"));
        }
        if alpha.iter().chain(&sigma).chain(&times).any(|v| !v.is_finite()) {
            return Err(invalid("schedule contains non-finite values"));
        }
        Ok(Self { times, alpha, sigma })
    }

    /// Samples `alpha(t)` and `sigma(t)` on `times`.
    pub fn from_fns(times: Vec<f64>, alpha: impl Fn(f64) -> f64, sigma: impl Fn(f64) -> f64) -> Result<Self> {
        let a = times.iter().map(|&t| alpha(t)).collect();
        let s = times.iter().map(|&t| sigma(t)).collect();
        Self::new(times, a, s)
    }

    /// Uniform grid with `n + 1` points on `[start, end]`.
    pub fn uniform_times(start: f64, end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| start + (end - start) * k as f64 / n as f64).collect()
    }

    /// Straight path `alpha = t`, `sigma = 1 - t`.
    pub fn rectified(n: usize) -> Result<Self> {
        Self::from_fns(Self::uniform_times(0.0, 1.0, n), |t| t, |t| 1.0 - t)
    }

    /// Trigonometric path `alpha = sin(pi t / 2)`, `sigma = cos(pi t / 2)`.
    pub fn cosine(times: Vec<f64>) -> Result<Self> {
        let h = std::f64::consts::FRAC_PI_2;
        Self::from_fns(times, |t| (h * t).sin(), |t| (h * t).cos())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Backward-difference `(alpha_dot, sigma_dot)` at index `k`.
pub fn finite_diff_derivatives(schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64)> {
    finite_diff_derivatives_with(schedule, k, FirstIndex::Reject)
}

pub fn finite_diff_derivatives_with(schedule: &NoiseSchedule, k: usize, first: FirstIndex) -> Result<(f64, f64)> {
    if k >= schedule.len() {
        return Err(invalid(format!("index {k} beyond schedule length {}", schedule.len())));
    }
    let (lo, hi) = match (k, first) {
        (0, FirstIndex::Reject) => {
            return Err(invalid("backward difference undefined at index 0"));
        }
        (0, FirstIndex::Forward) => (0, 1),
        _ => (k - 1, k),
    };
    let dt = schedule.times[hi] - schedule.times[lo];
    Ok((
        (schedule.alpha[hi] - schedule.alpha[lo]) / dt,
        (schedule.sigma[hi] - schedule.sigma[lo]) / dt,
    ))
}

/// Converts a noise prediction into a velocity:
/// `(alpha_dot / alpha) x + (sigma_dot - alpha_dot sigma / alpha) eps_hat`.
pub fn eps_to_v(eps_hat: &[f64], x_t: &[f64], schedule: &NoiseSchedule, k: usize) -> Result<Vec<f64>> {
    check_dim(eps_hat.len(), x_t.len())?;
    let (ad, sd) = finite_diff_derivatives(schedule, k)?;
    let a = schedule.alpha[k];
    let s = schedule.sigma[k];
    if a == 0.0 {
        return Err(Error::Singularity(format!("alpha vanishes at index {k}")));
    }
    let cx = ad / a;
    let ce = sd - ad * s / a;
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| cx * x + ce * e).collect())
}

/// Optimal noise prediction `E[x0 | x]` on the path `x = alpha x1 + sigma x0`.
pub fn oracle_epsilon(target: &MixtureTarget, x: &[f64], alpha: f64, sigma: f64) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Err(Error::Singularity("sigma vanishes".into()));
    }
    let m = target.posterior_mean(x, alpha, sigma)?;
    Ok(x.iter().zip(&m).map(|(xi, mi)| (xi - alpha * mi) / sigma).collect())
}
