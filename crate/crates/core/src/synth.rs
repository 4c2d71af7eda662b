//! Procedural latent videos with regions of known complexity, and their
//! denoising trajectories.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::T_EPS;
use crate::latents::{LatentShape, LatentTensor, TokenMatrix};

/// Fill rule for one region. Frequencies are in cycles per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Constant,
    /// Diagonal ramp from `-amplitude` at the region origin to `+amplitude`
    /// at the far corner.
    LinearRamp,
    Sinusoid { fy: f64, fx: f64 },
    Checkerboard { period: usize },
    /// Sinusoid translating by `(vy, vx)` pixels per frame.
    MovingSinusoid { fy: f64, fx: f64, vy: f64, vx: f64 },
}

impl Pattern {
    fn validate(&self) -> Result<()> {
        let nyq = |f: f64| f.is_finite() && f.abs() <= 0.5;
        match *self {
            Pattern::Sinusoid { fy, fx } | Pattern::MovingSinusoid { fy, fx, .. } if !(nyq(fy) && nyq(fx)) => {
                Err(invalid(format!("frequency ({fy}, {fx}) exceeds Nyquist")))
            }
            Pattern::MovingSinusoid { vy, vx, .. } if !(vy.is_finite() && vx.is_finite()) => {
                Err(invalid("non-finite velocity"))
            }
            Pattern::Checkerboard { period } if period < 2 => Err(invalid("checkerboard period must be at least 2")),
            _ => Ok(()),
        }
    }

    /// Default rollout uncertainty relative to amplitude: coarse content
    /// settles early, fine texture stays ambiguous longer.
    fn relative_uncertainty(&self) -> f64 {
        match *self {
            Pattern::Constant | Pattern::LinearRamp => 0.0,
            Pattern::Sinusoid { fy, fx } | Pattern::MovingSinusoid { fy, fx, .. } => {
                (2.0 * fy.hypot(fx)).min(1.0)
            }
            Pattern::Checkerboard { period } => (2.0 / period as f64).min(1.0),
        }
    }
}

fn full_range() -> Option<[usize; 2]> {
    None
}

/// A box of the canvas filled with one pattern. Missing ranges span the
/// whole axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    #[serde(default = "full_range")]
    pub frames: Option<[usize; 2]>,
    #[serde(default = "full_range")]
    pub rows: Option<[usize; 2]>,
    #[serde(default = "full_range")]
    pub cols: Option<[usize; 2]>,
    pub pattern: Pattern,
    pub amplitude: f64,
    /// Base phase in radians; drawn from the scene seed when absent.
    #[serde(default)]
    pub phase: Option<f64>,
    /// Target standard deviation for oracle rollouts; derived from the
    /// pattern when absent.
    #[serde(default)]
    pub uncertainty: Option<f64>,
}

impl Region {
    pub fn new(pattern: Pattern, amplitude: f64) -> Self {
        Self {
            frames: None,
            rows: None,
            cols: None,
            pattern,
            amplitude,
            phase: None,
            uncertainty: None,
        }
    }

    pub fn rows(mut self, r: [usize; 2]) -> Self {
        self.rows = Some(r);
        self
    }

    pub fn cols(mut self, c: [usize; 2]) -> Self {
        self.cols = Some(c);
        self
    }

    pub fn frames(mut self, f: [usize; 2]) -> Self {
        self.frames = Some(f);
        self
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
            .unwrap_or_else(|| self.amplitude.abs() * self.pattern.relative_uncertainty())
    }

    fn bounds(&self, shape: LatentShape) -> Result<[[usize; 2]; 3]> {
        let pick = |r: Option<[usize; 2]>, n: usize, axis: &str| -> Result<[usize; 2]> {
            let r = r.unwrap_or([0, n]);
            if r[0] >= r[1] || r[1] > n {
                return Err(invalid(format!("region {axis} range {r:?} outside canvas extent {n}")));
            }
            Ok(r)
        };
        Ok([
            pick(self.frames, shape.frames, "frames")?,
            pick(self.rows, shape.height, "rows")?,
            pick(self.cols, shape.width, "cols")?,
        ])
    }
}

fn default_phase_spread() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `[channels, frames, height, width]`.
    pub dims: [usize; 4],
    pub regions: Vec<Region>,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the uniform per-channel phase jitter, in radians.
    #[serde(default = "default_phase_spread")]
    pub phase_spread: f64,
}

impl SceneSpec {
    pub fn shape(&self) -> LatentShape {
        let [c, f, h, w] = self.dims;
        LatentShape::new(c, f, h, w)
    }

    /// Region index owning each `(f, h, w)` cell; later regions win.
    pub fn ownership(&self) -> Result<Vec<usize>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(invalid("scene canvas has a zero dimension"));
        }
        if self.regions.is_empty() {
            return Err(invalid("scene has no regions"));
        }
        let mut owner = vec![usize::MAX; shape.cells()];
        for (ri, r) in self.regions.iter().enumerate() {
            r.pattern.validate()?;
            if !r.amplitude.is_finite() {
                return Err(invalid(format!("region {ri} has non-finite amplitude")));
            }
            let [fr, hr, wr] = r.bounds(shape)?;
            for f in fr[0]..fr[1] {
                for h in hr[0]..hr[1] {
                    for w in wr[0]..wr[1] {
                        owner[(f * shape.height + h) * shape.width + w] = ri;
                    }
                }
            }
        }
        if let Some(cell) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(invalid(format!("cell {cell} is not covered by any region")));
        }
        Ok(owner)
    }
}

struct RegionPhases {
    per_channel: Vec<f64>,
}

fn draw_phases(spec: &SceneSpec) -> Vec<RegionPhases> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.dims[0];
    spec.regions
        .iter()
        .map(|r| {
            let drawn: f64 = rng.random_range(0.0..TAU);
            let base = r.phase.unwrap_or(drawn);
            let per_channel = (0..c)
                .map(|_| {
                    let j: f64 = if spec.phase_spread > 0.0 {
                        rng.random_range(-spec.phase_spread..spec.phase_spread)
                    } else {
                        0.0
                    };
                    base + j
                })
                .collect();
            RegionPhases { per_channel }
        })
        .collect()
}

fn pattern_value(r: &Region, bounds: &[[usize; 2]; 3], phase: f64, f: usize, h: usize, w: usize) -> f64 {
    let a = r.amplitude;
    let (hf, wf, ff) = (h as f64, w as f64, f as f64);
    match r.pattern {
        Pattern::Constant => a,
        Pattern::LinearRamp => {
            let [_, hr, wr] = bounds;
            let span = ((hr[1] - hr[0] - 1) + (wr[1] - wr[0] - 1)).max(1) as f64;
            let pos = ((h - hr[0]) + (w - wr[0])) as f64 / span;
            a * (2.0 * pos - 1.0)
        }
        Pattern::Sinusoid { fy, fx } => a * (TAU * (fy * hf + fx * wf) + phase).sin(),
        Pattern::Checkerboard { period } => {
            let parity = (2 * h / period + 2 * w / period) % 2;
            if parity == 0 {
                a
            } else {
                -a
            }
        }
        Pattern::MovingSinusoid { fy, fx, vy, vx } => {
            a * (TAU * (fy * (hf - vy * ff) + fx * (wf - vx * ff)) + phase).sin()
        }
    }
}

/// Renders the clean latent. Deterministic in the scene description, including its seed.
pub fn render_scene(spec: &SceneSpec) -> Result<LatentTensor> {
    let owner = spec.ownership()?;
    let shape = spec.shape();
    let phases = draw_phases(spec);
    let bounds: Vec<[[usize; 2]; 3]> = spec
        .regions
        .iter()
        .map(|r| r.bounds(shape))
        .collect::<Result<_>>()?;
    LatentTensor::from_fn(shape, |c, f, h, w| {
        let ri = owner[(f * shape.height + h) * shape.width + w];
        pattern_value(&spec.regions[ri], &bounds[ri], phases[ri].per_channel[c], f, h, w) as f32
    })
}

/// Per-cell standard deviation of the rollout target, in cell order.
pub fn uncertainty_map(spec: &SceneSpec) -> Result<Vec<f32>> {
    let owner = spec.ownership()?;
    let sig: Vec<f64> = spec.regions.iter().map(Region::uncertainty).collect();
    Ok(owner.into_iter().map(|o| sig[o] as f32).collect())
}

/// Time of output step `k` (1-based) on a `steps`-point uniform grid.
pub fn step_time(k: usize, steps: usize) -> f64 {
    (k as f64 / steps as f64).min(1.0 - T_EPS)
}

#[derive(Debug, Clone)]
enum RunStorage {
    Interpolated,
    Recorded(Vec<LatentTensor>),
}

/// Per-step latents `x_{t_k}` for `k = 1..=steps` plus the path endpoints.
#[derive(Debug, Clone)]
pub struct DenoisingRun {
    steps: usize,
    x0: LatentTensor,
    x1: LatentTensor,
    storage: RunStorage,
}

impl DenoisingRun {
    /// Wraps recorded step latents; `x1` is taken as the last one.
    pub fn from_recorded(x0: LatentTensor, latents: Vec<LatentTensor>) -> Result<Self> {
        let last = latents.last().ok_or_else(|| invalid("recorded run has no steps"))?.clone();
        if latents.iter().any(|l| l.shape() != x0.shape()) {
            return Err(invalid("recorded latents differ in shape from x0"));
        }
        Ok(Self {
            steps: latents.len(),
            x0,
            x1: last,
            storage: RunStorage::Recorded(latents),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> LatentShape {
        self.x1.shape()
    }

    pub fn x0(&self) -> &LatentTensor {
        &self.x0
    }

    pub fn x1(&self) -> &LatentTensor {
        &self.x1
    }

    pub fn time(&self, k: usize) -> f64 {
        step_time(k, self.steps)
    }

    /// Latent after step `k`, 1-based.
    pub fn latent(&self, k: usize) -> Result<LatentTensor> {
        if k == 0 || k > self.steps {
            return Err(invalid(format!("step {k} outside 1..={}", self.steps)));
        }
        match &self.storage {
            RunStorage::Recorded(v) => Ok(v[k - 1].clone()),
            RunStorage::Interpolated => {
                let t = self.time(k) as f32;
                self.x1.axpby(t, &self.x0, 1.0 - t)
            }
        }
    }

    /// Returns the latent with every value multiplied by `c` (for invariance
    /// checks).
    pub fn scaled(&self, c: f32) -> Result<Self> {
        let storage = match &self.storage {
            RunStorage::Interpolated => RunStorage::Interpolated,
            RunStorage::Recorded(v) => RunStorage::Recorded(v.iter().map(|l| l.scale(c)).collect::<Result<_>>()?),
        };
        Ok(Self {
            steps: self.steps,
            x0: self.x0.scale(c)?,
            x1: self.x1.scale(c)?,
            storage,
        })
    }
}

/// Seeded standard-normal latent.
pub fn gaussian_latent(shape: LatentShape, seed: u64) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentTensor::new(shape, data).expect("normal samples are finite")
}

/// Exact straight-path trajectory from seeded noise to `clean`.
pub fn synth_trajectory(clean: &LatentTensor, steps: usize, seed: u64) -> Result<DenoisingRun> {
    if steps < 2 {
        return Err(invalid("trajectory needs at least two steps"));
    }
    Ok(DenoisingRun {
        steps,
        x0: gaussian_latent(clean.shape(), seed),
        x1: clean.clone(),
        storage: RunStorage::Interpolated,
    })
}

/// Closed-form velocity field whose target places an independent Gaussian
/// `N(mean, std^2)` on every latent element. Values are kept in token layout
/// (`cell * channels + channel`).
#[derive(Debug, Clone)]
pub struct SceneField {
    pub shape: LatentShape,
    mean: Vec<f32>,
    var: Vec<f32>,
}

impl SceneField {
    pub fn new(clean: &LatentTensor, std_per_cell: &[f32]) -> Result<Self> {
        let shape = clean.shape();
        if std_per_cell.len() != shape.cells() {
            return Err(invalid("uncertainty map does not match the canvas"));
        }
        let mean = clean.to_tokens().data;
        let c = shape.channels;
        let var = (0..mean.len()).map(|i| std_per_cell[i / c].powi(2)).collect();
        Ok(Self { shape, mean, var })
    }

    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        Self::new(&render_scene(spec)?, &uncertainty_map(spec)?)
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    /// Velocity of a single element at flat token-layout index `i`.
    #[inline]
    pub fn element_velocity(&self, i: usize, x: f32, t: f64) -> f32 {
        let mu = f64::from(self.mean[i]);
        let var = f64::from(self.var[i]);
        let x = f64::from(x);
        let s2 = t * t * var + (1.0 - t) * (1.0 - t);
        let m = mu + t * var / s2 * (x - t * mu);
        ((m - x) / (1.0 - t)) as f32
    }

    /// Velocities for the listed token rows of `tokens` (which holds only
    /// those rows, in order).
    pub fn rows_velocity(&self, ids: &[usize], tokens: &TokenMatrix, t: f64) -> TokenMatrix {
        let c = self.channels();
        let mut out = TokenMatrix::zeros(ids.len(), c);
        for (r, &id) in ids.iter().enumerate() {
            let src = tokens.row(r);
            let dst = out.row_mut(r);
            for ch in 0..c {
                dst[ch] = self.element_velocity(id * c + ch, src[ch], t);
            }
        }
        out
    }

    pub fn velocity(&self, tokens: &TokenMatrix, t: f64) -> TokenMatrix {
        let ids: Vec<usize> = (0..tokens.rows).collect();
        self.rows_velocity(&ids, tokens, t)
    }
}

/// Euler rollout of a [`SceneField`] from seeded noise. Step `k` evaluates
/// the field at `t = (k - 1) / steps`.
pub fn oracle_rollout(field: &SceneField, steps: usize, seed: u64) -> Result<DenoisingRun> {
    if steps < 2 {
        return Err(invalid("rollout needs at least two steps"));
    }
    let x0 = gaussian_latent(field.shape, seed);
    let dt = 1.0 / steps as f32;
    let mut x = x0.to_tokens();
    let mut latents = Vec::with_capacity(steps);
    for k in 1..=steps {
        let t = step_time(k - 1, steps);
        let v = field.velocity(&x, t);
        for (xi, vi) in x.data.iter_mut().zip(&v.data) {
            *xi += dt * vi;
        }
        latents.push(LatentTensor::from_tokens(field.shape, &x)?);
    }
    DenoisingRun::from_recorded(x0, latents)
}

/// Dimensions used by the built-in suites.
pub const SUITE_DIMS: [usize; 4] = [16, 8, 48, 48];
const BAND: usize = 16;
const NARROW_BAND: usize = 8;
const LOW_AMPLITUDE: f64 = 8.0;
const HIGH_AMPLITUDE: f64 = 12.0;

fn band_region(pattern: Pattern, amplitude: f64, span: [usize; 2], horizontal: bool, phase: f64) -> Region {
    let r = Region {
        phase: Some(phase),
        ..Region::new(pattern, amplitude)
    };
    if horizontal {
        r.rows(span)
    } else {
        r.cols(span)
    }
}

fn textured(rng: &mut ChaCha8Rng, freq: (f64, f64), velocity: f64) -> Pattern {
    let fr = rng.random_range(freq.0..freq.1);
    let ang = rng.random_range(0.0..std::f64::consts::PI);
    let (fy, fx) = (fr * ang.sin(), fr * ang.cos());
    if velocity == 0.0 {
        Pattern::Sinusoid { fy, fx }
    } else {
        Pattern::MovingSinusoid { fy, fx, vy: velocity, vx: velocity }
    }
}

/// Three equal-area bands in random order and orientation: a flat
/// background, a low-frequency texture and a high-frequency texture. Even
/// indices pan their textures over time.
///
/// Amplitudes are large relative to unit noise so content gradients
/// dominate the early-step noise decay that all blocks share.
pub fn standard_suite(count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            let background: f64 = rng.random_range(-0.3..0.3);
            let velocity = if i % 2 == 0 { rng.random_range(0.5..1.0) } else { 0.0 };
            let mut order = [0usize, 1, 2];
            order.shuffle(&mut rng);
            let horizontal = rng.random_bool(0.5);
            let mut regions = vec![Region::new(Pattern::Constant, background)];
            for (band, tier) in order.into_iter().enumerate() {
                let (freq, amp) = match tier {
                    0 => continue,
                    1 => ((0.10, 0.20), LOW_AMPLITUDE),
                    _ => ((0.30, 0.45), HIGH_AMPLITUDE),
                };
                let amp = amp * rng.random_range(0.8..1.2);
                let pattern = textured(&mut rng, freq, velocity);
                let phase = rng.random_range(0.0..TAU);
                regions.push(band_region(pattern, amp, [band * BAND, (band + 1) * BAND], horizontal, phase));
            }
            SceneSpec {
                dims: SUITE_DIMS,
                regions,
                seed: rng.random(),
                phase_spread: 0.3,
            }
        })
        .collect()
}

/// Scenes where five sixths of the canvas is flat background and a single
/// block-aligned 8-pixel band carries high-frequency texture.
pub fn static_heavy_suite(count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(i as u64));
            let background: f64 = rng.random_range(-0.3..0.3);
            let velocity = if i % 2 == 0 { rng.random_range(0.5..1.0) } else { 0.0 };
            let band = rng.random_range(0..SUITE_DIMS[2] / NARROW_BAND);
            let horizontal = rng.random_bool(0.5);
            let amp = HIGH_AMPLITUDE * rng.random_range(0.8..1.2);
            let pattern = textured(&mut rng, (0.30, 0.45), velocity);
            let phase = rng.random_range(0.0..TAU);
            SceneSpec {
                dims: SUITE_DIMS,
                regions: vec![
                    Region::new(Pattern::Constant, background),
                    band_region(pattern, amp, [band * NARROW_BAND, (band + 1) * NARROW_BAND], horizontal, phase),
                ],
                seed: rng.random(),
                phase_spread: 0.3,
            }
        })
        .collect()
}
