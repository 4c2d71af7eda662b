//! Block-wise complexity recognition from early denoising steps, the
//! reference complexity/convergence maps, and the statistics used to compare
//! them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latents::{channel_average, extract_block, BlockFeatureMatrix, BlockGrid, BlockSize, LatentTensor, Volume};
use crate::synth::DenoisingRun;

/// Default level split: equal thirds.
pub const EQUAL_THIRDS: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzerConfig {
    /// Number of early steps `K` inspected.
    pub warmup: usize,
    #[serde(default = "default_omega_t")]
    pub omega_t: f64,
    #[serde(default = "default_omega_s")]
    pub omega_s: f64,
    pub block: BlockSize,
}

fn default_omega_t() -> f64 {
    0.7
}

fn default_omega_s() -> f64 {
    0.3
}

/// `ceil(0.1 * steps)`, the default warm-up length.
pub fn default_warmup(steps: usize) -> usize {
    (steps as f64 * 0.1).ceil() as usize
}

impl AnalyzerConfig {
    pub fn new(warmup: usize, block: BlockSize) -> Self {
        Self {
            warmup,
            omega_t: default_omega_t(),
            omega_s: default_omega_s(),
            block,
        }
    }

    pub fn for_steps(steps: usize, block: BlockSize) -> Self {
        Self::new(default_warmup(steps).max(2), block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup < 2 {
            return Err(invalid(format!("warm-up must be at least 2 steps, got {}", self.warmup)));
        }
        if self.omega_t < 0.0 || self.omega_s < 0.0 || (self.omega_t + self.omega_s - 1.0).abs() > 1e-9 {
            return Err(invalid(format!(
                "weights ({}, {}) must be non-negative and sum to 1",
                self.omega_t, self.omega_s
            )));
        }
        Ok(())
    }
}

/// Per-block raw scores and their min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityMap {
    pub grid: BlockGrid,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ComplexityMap {
    pub fn from_raw(grid: BlockGrid, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != grid.len() {
            return Err(invalid("score count does not match the block grid"));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(invalid("complexity scores must be finite"));
        }
        let normalized = min_max(&raw);
        Ok(Self { grid, raw, normalized })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

fn max_normalize(v: &mut [f64]) {
    let hi = v.iter().cloned().fold(0.0, f64::max);
    if hi > 0.0 {
        for x in v.iter_mut() {
            *x /= hi;
        }
    }
}

/// Mean over spatial positions of the L2 norm of adjacent-frame differences.
pub fn temporal_gradient(block: &BlockFeatureMatrix) -> f64 {
    if block.frames < 2 {
        return 0.0;
    }
    let s = block.s();
    let mut total = 0.0;
    for pos in 0..s {
        let mut sq = 0.0;
        for i in 0..block.frames - 1 {
            let d = f64::from(block.get(i + 1, pos)) - f64::from(block.get(i, pos));
            sq += d * d;
        }
        total += sq.sqrt();
    }
    total / s as f64
}

/// Mean over frames of the L2 norm of all horizontal and vertical neighbour
/// differences within the frame.
pub fn spatial_gradient(block: &BlockFeatureMatrix) -> f64 {
    if block.s() < 2 {
        return 0.0;
    }
    let (h, w) = (block.height, block.width);
    let mut total = 0.0;
    for f in 0..block.frames {
        let mut sq = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(block.at(f, y, x));
                if x + 1 < w {
                    sq += (f64::from(block.at(f, y, x + 1)) - v).powi(2);
                }
                if y + 1 < h {
                    sq += (f64::from(block.at(f, y + 1, x)) - v).powi(2);
                }
            }
        }
        total += sq.sqrt();
    }
    total / block.frames as f64
}

/// `sum_{k=1}^{K/2} |g[k + K/2] - g[k]|` for a sequence of length `K`.
pub fn second_order_diffs(g: &[f64]) -> Result<f64> {
    if g.len() < 2 {
        return Err(invalid(format!("need at least 2 gradient samples, got {}", g.len())));
    }
    let dk = g.len() / 2;
    Ok((0..dk).map(|k| (g[k + dk] - g[k]).abs()).sum())
}

/// Temporal and spatial gradients of every block of one latent.
pub fn block_gradients(latent: &LatentTensor, grid: &BlockGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let vol = channel_average(latent)?;
    Ok(gradients_of_volume(&vol, grid))
}

fn gradients_of_volume(vol: &Volume, grid: &BlockGrid) -> (Vec<f64>, Vec<f64>) {
    (0..grid.len())
        .into_par_iter()
        .map(|b| {
            let blk = extract_block(vol, grid, b);
            (temporal_gradient(&blk), spatial_gradient(&blk))
        })
        .unzip()
}

/// Scores blocks from the first `cfg.warmup` latents in `steps`.
pub fn complexity_from_latents(steps: &[LatentTensor], cfg: &AnalyzerConfig) -> Result<ComplexityMap> {
    cfg.validate()?;
    if steps.len() < cfg.warmup {
        return Err(invalid(format!(
            "warm-up of {} steps exceeds the {} available",
            cfg.warmup,
            steps.len()
        )));
    }
    let shape = steps[0].shape();
    let grid = BlockGrid::new(shape.volume_dims(), cfg.block)?;
    let mut tg = Vec::with_capacity(cfg.warmup);
    let mut sg = Vec::with_capacity(cfg.warmup);
    for latent in &steps[..cfg.warmup] {
        if latent.shape() != shape {
            return Err(invalid("warm-up latents differ in shape"));
        }
        let (t, s) = block_gradients(latent, &grid)?;
        tg.push(t);
        sg.push(s);
    }
    score_blocks(grid, &tg, &sg, cfg, shape.frames == 1)
}

fn score_blocks(grid: BlockGrid, tg: &[Vec<f64>], sg: &[Vec<f64>], cfg: &AnalyzerConfig, single_frame: bool) -> Result<ComplexityMap> {
    let (wt, ws) = if single_frame { (0.0, 1.0) } else { (cfg.omega_t, cfg.omega_s) };
    let mut raw = Vec::with_capacity(grid.len());
    let mut gt = vec![0.0; tg.len()];
    let mut gs = vec![0.0; sg.len()];
    for b in 0..grid.len() {
        for k in 0..tg.len() {
            gt[k] = tg[k][b];
            gs[k] = sg[k][b];
        }
        raw.push(wt * second_order_diffs(&gt)? + ws * second_order_diffs(&gs)?);
    }
    ComplexityMap::from_raw(grid, raw)
}

/// Block complexity map from steps `1..=K` of a run.
pub fn complexity_map(run: &DenoisingRun, cfg: &AnalyzerConfig) -> Result<ComplexityMap> {
    cfg.validate()?;
    if run.steps() < cfg.warmup {
        return Err(invalid(format!(
            "warm-up of {} steps exceeds the {} available",
            cfg.warmup,
            run.steps()
        )));
    }
    let latents: Vec<LatentTensor> = (1..=cfg.warmup).map(|k| run.latent(k)).collect::<Result<_>>()?;
    complexity_from_latents(&latents, cfg)
}

fn centered_radius(i: usize, n: usize) -> f64 {
    // Index of the bin after shifting DC to the centre.
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// High-frequency energy ratio per block of a clean latent.
///
/// Each block's `h x w` spatial patch (per channel and frame) is
/// transformed; the ratio is the energy with radius above `min(h, w) / 4`
/// over all non-DC energy. Block scores average the ratio over channels and
/// the block's frames. Patches with no non-DC energy score 0.
pub fn fft_ground_truth(clean: &LatentTensor, grid: &BlockGrid) -> Result<Vec<f64>> {
    let shape = clean.shape();
    if shape.volume_dims() != grid.dims {
        return Err(invalid("block grid does not match the latent"));
    }
    let (h, w) = (grid.block.height, grid.block.width);
    if h < 4 || w < 4 {
        return Err(invalid(format!("spectral patches need at least 4x4 pixels, block is {h}x{w}")));
    }
    let r = h.min(w) as f64 / 4.0;
    let outside: Vec<bool> = (0..h * w)
        .map(|i| centered_radius(i / w, h).hypot(centered_radius(i % w, w)) > r)
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let cells = shape.cells();
    let channel_vols: Vec<Volume> = (0..shape.channels)
        .map(|c| Volume {
            dims: grid.dims,
            data: clean.data()[c * cells..(c + 1) * cells].to_vec(),
        })
        .collect();

    let scores = (0..grid.len())
        .into_par_iter()
        .map(|b| {
            let [(f0, f1), _, _] = grid.extent(b);
            let mut buf = vec![Complex::new(0.0, 0.0); h * w];
            let mut col = vec![Complex::new(0.0, 0.0); h];
            let mut acc = 0.0;
            let mut count = 0usize;
            for vol in &channel_vols {
                let blk = extract_block(vol, grid, b);
                for f in 0..(f1 - f0) {
                    let mut power = 0.0;
                    for (i, z) in buf.iter_mut().enumerate() {
                        let v = f64::from(blk.at(f, i / w, i % w));
                        power += v * v;
                        *z = Complex::new(v, 0.0);
                    }
                    for row in buf.chunks_exact_mut(w) {
                        row_fft.process(row);
                    }
                    for x in 0..w {
                        for y in 0..h {
                            col[y] = buf[y * w + x];
                        }
                        col_fft.process(&mut col);
                        for y in 0..h {
                            buf[y * w + x] = col[y];
                        }
                    }
                    let mut total = 0.0;
                    let mut high = 0.0;
                    for (i, z) in buf.iter().enumerate().skip(1) {
                        let e = z.norm_sqr();
                        total += e;
                        if outside[i] {
                            high += e;
                        }
                    }
                    let ratio = if total <= 1e-12 * power.max(1.0) { 0.0 } else { high / total };
                    acc += ratio;
                    count += 1;
                }
            }
            acc / count as f64
        })
        .collect();
    Ok(scores)
}

/// Accumulated per-block mean absolute change over 5-step intervals,
/// starting at step 10, scaled so the largest block is 1.
pub fn convergence_ground_truth(run: &DenoisingRun, grid: &BlockGrid) -> Result<Vec<f64>> {
    const START: usize = 10;
    const INTERVAL: usize = 5;
    if run.steps() < START + INTERVAL {
        return Err(invalid(format!(
            "convergence reference needs at least {} steps, run has {}",
            START + INTERVAL,
            run.steps()
        )));
    }
    let shape = run.shape();
    if shape.volume_dims() != grid.dims {
        return Err(invalid("block grid does not match the run"));
    }
    let owners = grid.token_index_map();
    let cells = shape.cells();
    let mut acc = vec![0.0f64; grid.len()];
    let mut k = START;
    let mut prev = run.latent(k)?;
    while k + INTERVAL <= run.steps() {
        let next = run.latent(k + INTERVAL)?;
        let mut diff = vec![0.0f64; cells];
        for (a, b) in next.data().chunks_exact(cells).zip(prev.data().chunks_exact(cells)) {
            for i in 0..cells {
                diff[i] += f64::from((a[i] - b[i]).abs());
            }
        }
        for (b, toks) in owners.iter().enumerate() {
            let s: f64 = toks.iter().map(|&t| diff[t]).sum();
            acc[b] += s / (toks.len() * shape.channels) as f64;
        }
        prev = next;
        k += INTERVAL;
    }
    max_normalize(&mut acc);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    pub fft: Vec<f64>,
    pub convergence: Vec<f64>,
}

pub fn ground_truth_maps(run: &DenoisingRun, grid: &BlockGrid) -> Result<GroundTruthMaps> {
    Ok(GroundTruthMaps {
        fft: fft_ground_truth(run.x1(), grid)?,
        convergence: convergence_ground_truth(run, grid)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("score lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::CorrelationUndefined(format!("need at least 3 samples, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("scores must be finite"));
    }
    Ok(())
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::CorrelationUndefined("an input has zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson_unchecked(a, b)
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson_unchecked(&average_ranks(a), &average_ranks(b))
}

pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<Correlation> {
    Ok(Correlation {
        pearson: pearson(a, b)?,
        spearman: spearman(a, b)?,
    })
}

/// Two-sided permutation p-value for Spearman's rho: the share of seeded
/// shuffles of `b` whose `|rho|` reaches the observed one, with the usual
/// `+1` correction.
pub fn permutation_p_value(a: &[f64], b: &[f64], shuffles: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    let ra = average_ranks(a);
    let mut rb = average_ranks(b);
    let observed = pearson_unchecked(&ra, &rb)?.abs();
    // Centre once so each shuffle costs a single dot product.
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let ca: Vec<f64> = ra.iter().map(|r| r - mean).collect();
    for r in rb.iter_mut() {
        *r -= mean;
    }
    let norm = (ca.iter().map(|x| x * x).sum::<f64>() * rb.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..shuffles {
        rb.shuffle(&mut rng);
        let dot: f64 = ca.iter().zip(&rb).map(|(x, y)| x * y).sum();
        if (dot / norm).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (shuffles + 1) as f64)
}

/// Buckets scores into levels 1..=3 at nearest-rank quantiles
/// `fractions.0` and `fractions.1`. A score equal to a cut point takes the
/// lower level.
pub fn quantile_levels(scores: &[f64], fractions: (f64, f64)) -> Result<Vec<u8>> {
    let (f1, f2) = fractions;
    if !(0.0 < f1 && f1 <= f2 && f2 <= 1.0) {
        return Err(invalid(format!("level fractions ({f1}, {f2}) must satisfy 0 < f1 <= f2 <= 1")));
    }
    if scores.is_empty() {
        return Err(invalid("no scores to bucket"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cut = |f: f64| sorted[((n as f64 * f).ceil() as usize).clamp(1, n) - 1];
    let (q1, q2) = (cut(f1), cut(f2));
    Ok(scores
        .iter()
        .map(|&s| if s <= q1 { 1 } else if s <= q2 { 2 } else { 3 })
        .collect())
}

/// Share of blocks that fall into the same quantile level under both maps.
pub fn recognition_accuracy(predicted: &[f64], reference: &[f64], fractions: (f64, f64)) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(invalid(format!(
            "maps cover different grids: {} vs {} blocks",
            predicted.len(),
            reference.len()
        )));
    }
    let a = quantile_levels(predicted, fractions)?;
    let b = quantile_levels(reference, fractions)?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latents::{LatentShape, VolumeDims};
    use crate::synth::{render_scene, synth_trajectory, Pattern, Region, SceneSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn block(frames: usize, h: usize, w: usize, data: Vec<f32>) -> BlockFeatureMatrix {
        BlockFeatureMatrix { block_id: 0, frames, height: h, width: w, data }
    }

    #[test]
    fn temporal_gradient_cases() {
        assert_eq!(temporal_gradient(&block(3, 2, 2, vec![1.5; 12])), 0.0);
        assert_eq!(temporal_gradient(&block(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])), 0.0);
        let mut d = Vec::new();
        for v in [0.0, 1.0, 3.0] {
            d.extend([v; 4]);
        }
        let g = temporal_gradient(&block(3, 2, 2, d));
        assert!((g - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spatial_gradient_cases() {
        assert_eq!(spatial_gradient(&block(2, 3, 3, vec![0.2; 18])), 0.0);
        assert_eq!(spatial_gradient(&block(1, 1, 2, vec![0.0, 3.0])), 3.0);
        assert_eq!(spatial_gradient(&block(1, 1, 1, vec![5.0])), 0.0);
        let n = 8;
        let checker: Vec<f32> = (0..n * n).map(|i| if (i / n + i % n) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let ramp: Vec<f32> = (0..n * n)
            .map(|i| -1.0 + 2.0 * ((i / n + i % n) as f32 / (2 * n - 2) as f32))
            .collect();
        assert!(spatial_gradient(&block(1, n, n, checker)) > spatial_gradient(&block(1, n, n, ramp)));
    }

    #[test]
    fn second_order_diff_cases() {
        assert_eq!(second_order_diffs(&[2.0; 6]).unwrap(), 0.0);
        assert_eq!(second_order_diffs(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 4.0);
        assert_eq!(second_order_diffs(&[0.5, 2.0]).unwrap(), 1.5);
        assert!(second_order_diffs(&[1.0]).is_err());
    }

    #[test]
    fn identical_blocks_normalize_to_zero() {
        let spec = SceneSpec {
            dims: [2, 4, 16, 16],
            regions: vec![Region::new(Pattern::Checkerboard { period: 4 }, 1.0)],
            seed: 0,
            phase_spread: 0.0,
        };
        let clean = render_scene(&spec).unwrap();
        let grid = BlockGrid::new(clean.shape().volume_dims(), BlockSize::new(2, 8, 8)).unwrap();
        let x0 = LatentTensor::zeros(clean.shape());
        // Noise-free path so every block sees identical content.
        let latents: Vec<LatentTensor> =
            (1..=5).map(|k| clean.axpby(k as f32 / 50.0, &x0, 0.0).unwrap()).collect();
        let map = complexity_from_latents(&latents, &AnalyzerConfig::new(5, grid.block)).unwrap();
        assert!(map.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warmup_beyond_run_is_invalid() {
        let clean = LatentTensor::zeros(LatentShape::new(1, 2, 8, 8));
        let run = synth_trajectory(&clean, 4, 0).unwrap();
        let cfg = AnalyzerConfig::new(5, BlockSize::new(1, 4, 4));
        assert!(matches!(complexity_map(&run, &cfg), Err(Error::InvalidInput(_))));
        let bad = AnalyzerConfig { omega_t: 0.9, ..AnalyzerConfig::new(2, BlockSize::new(1, 4, 4)) };
        assert!(complexity_map(&run, &bad).is_err());
    }

    #[test]
    fn temporal_only_weight_isolates_motion() {
        let spec = SceneSpec {
            dims: [1, 4, 16, 16],
            regions: vec![
                Region::new(Pattern::Sinusoid { fy: 0.25, fx: 0.25 }, 2.0),
                Region::new(Pattern::MovingSinusoid { fy: 0.0, fx: 0.25, vy: 0.0, vx: 1.0 }, 2.0)
                    .rows([0, 8])
                    .cols([0, 8]),
            ],
            seed: 3,
            phase_spread: 0.0,
        };
        let clean = render_scene(&spec).unwrap();
        let x0 = LatentTensor::zeros(clean.shape());
        let latents: Vec<LatentTensor> =
            (1..=4).map(|k| clean.axpby(k as f32 / 10.0, &x0, 0.0).unwrap()).collect();
        let cfg = AnalyzerConfig { omega_t: 1.0, omega_s: 0.0, ..AnalyzerConfig::new(4, BlockSize::new(4, 8, 8)) };
        let map = complexity_from_latents(&latents, &cfg).unwrap();
        assert!(map.raw[0] > 0.0);
        assert!(map.raw[1..].iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn single_frame_uses_spatial_only() {
        let spec = SceneSpec {
            dims: [1, 1, 16, 16],
            regions: vec![Region::new(Pattern::Sinusoid { fy: 0.3, fx: 0.1 }, 2.0)],
            seed: 3,
            phase_spread: 0.0,
        };
        let clean = render_scene(&spec).unwrap();
        let run = synth_trajectory(&clean, 20, 9).unwrap();
        let block = BlockSize::new(1, 8, 8);
        let grid = BlockGrid::new(clean.shape().volume_dims(), block).unwrap();
        let map = complexity_map(&run, &AnalyzerConfig::new(4, block)).unwrap();
        let latents: Vec<LatentTensor> = (1..=4).map(|k| run.latent(k).unwrap()).collect();
        for b in 0..grid.len() {
            let g: Vec<f64> = latents.iter().map(|l| block_gradients(l, &grid).unwrap().1[b]).collect();
            assert!((map.raw[b] - second_order_diffs(&g).unwrap()).abs() < 1e-12);
        }
    }

    fn single_tone(fx: f64, n: usize) -> LatentTensor {
        let spec = SceneSpec {
            dims: [1, 1, n, n],
            regions: vec![Region { phase: Some(0.3), ..Region::new(Pattern::Sinusoid { fy: 0.0, fx }, 1.0) }],
            seed: 0,
            phase_spread: 0.0,
        };
        render_scene(&spec).unwrap()
    }

    #[test]
    fn fft_reference_cases() {
        let dims = VolumeDims { frames: 1, height: 16, width: 16 };
        let grid = BlockGrid::new(dims, BlockSize::new(1, 8, 8)).unwrap();
        let flat = LatentTensor::from_fn(LatentShape::new(1, 1, 16, 16), |_, _, _, _| 2.0).unwrap();
        assert!(fft_ground_truth(&flat, &grid).unwrap().iter().all(|&v| v == 0.0));
        let zero = LatentTensor::zeros(LatentShape::new(1, 1, 16, 16));
        assert!(fft_ground_truth(&zero, &grid).unwrap().iter().all(|&v| v == 0.0));
        let checker = LatentTensor::from_fn(LatentShape::new(1, 1, 16, 16), |_, _, h, w| {
            if (h + w) % 2 == 0 { 1.0 } else { -1.0 }
        })
        .unwrap();
        assert!(fft_ground_truth(&checker, &grid).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        // With 8-pixel patches the cut-off radius is 2 bins.
        let inside = fft_ground_truth(&single_tone(2.0 / 8.0, 16), &grid).unwrap();
        let outside = fft_ground_truth(&single_tone(3.0 / 8.0, 16), &grid).unwrap();
        assert!(inside.iter().all(|&v| v < 1e-9));
        assert!(outside.iter().all(|&v| v > 1.0 - 1e-9));
    }

    #[test]
    fn fft_reference_is_monotone_in_tone_frequency() {
        let dims = VolumeDims { frames: 1, height: 32, width: 32 };
        let grid = BlockGrid::new(dims, BlockSize::new(1, 16, 16)).unwrap();
        let mut last = -1.0;
        for bin in 1..=8 {
            let s = fft_ground_truth(&single_tone(bin as f64 / 16.0, 32), &grid).unwrap()[0];
            assert!((0.0..=1.0).contains(&s));
            assert!(s >= last - 1e-12, "bin {bin}: {s} < {last}");
            last = s;
        }
    }

    #[test]
    fn fft_reference_rejects_tiny_patches() {
        let clean = LatentTensor::zeros(LatentShape::new(1, 1, 8, 8));
        let grid = BlockGrid::new(clean.shape().volume_dims(), BlockSize::new(1, 2, 2)).unwrap();
        assert!(fft_ground_truth(&clean, &grid).is_err());
    }

    #[test]
    fn convergence_reference_on_straight_path() {
        let spec = SceneSpec {
            dims: [2, 2, 16, 16],
            regions: vec![
                Region::new(Pattern::Sinusoid { fy: 0.1, fx: 0.2 }, 1.0),
                Region::new(Pattern::Sinusoid { fy: 0.1, fx: 0.2 }, 5.0).cols([0, 8]),
            ],
            seed: 2,
            phase_spread: 0.3,
        };
        let clean = render_scene(&spec).unwrap();
        let run = synth_trajectory(&clean, 30, 4).unwrap();
        let grid = BlockGrid::new(clean.shape().volume_dims(), BlockSize::new(2, 8, 8)).unwrap();
        let conv = convergence_ground_truth(&run, &grid).unwrap();
        let mut closed: Vec<f64> = grid
            .token_index_map()
            .iter()
            .map(|toks| {
                let mut s = 0.0;
                for c in 0..2 {
                    for &t in toks {
                        let i = c * clean.shape().cells() + t;
                        s += f64::from((clean.data()[i] - run.x0().data()[i]).abs());
                    }
                }
                s
            })
            .collect();
        max_normalize(&mut closed);
        for (a, b) in conv.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(conv[0] > conv[1] && conv[2] > conv[3]);
    }

    #[test]
    fn frozen_run_converges_to_zero() {
        let x = LatentTensor::from_fn(LatentShape::new(1, 2, 8, 8), |_, f, h, w| (f + h * w) as f32).unwrap();
        let run = DenoisingRun::from_recorded(x.clone(), vec![x.clone(); 20]).unwrap();
        let grid = BlockGrid::new(x.shape().volume_dims(), BlockSize::new(1, 4, 4)).unwrap();
        assert!(convergence_ground_truth(&run, &grid).unwrap().iter().all(|&v| v == 0.0));
        let short = DenoisingRun::from_recorded(x.clone(), vec![x; 14]).unwrap();
        assert!(convergence_ground_truth(&short, &grid).is_err());
    }

    fn textbook_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    #[test]
    fn correlation_cases() {
        let a = [0.3, 1.2, -0.5, 2.2, 0.9];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let c = rank_correlation(&a, &b).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);
        let mut sorted = a.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rev: Vec<f64> = sorted.iter().rev().cloned().collect();
        assert!((spearman(&sorted, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(rank_correlation(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::CorrelationUndefined(_))));
        assert!(rank_correlation(&[1.0, 2.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn correlation_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
            assert!((pearson(&a, &b).unwrap() - textbook_pearson(&a, &b)).abs() < 1e-12);
            let ra = average_ranks(&a);
            let rb = average_ranks(&b);
            assert!((spearman(&a, &b).unwrap() - textbook_pearson(&ra, &rb)).abs() < 1e-12);
        }
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn permutation_p_value_behaviour() {
        let a: Vec<f64> = (0..60).map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 0.5 + (x * 7.0).sin()).collect();
        let p = permutation_p_value(&a, &b, 2000, 1).unwrap();
        assert!((p - 1.0 / 2001.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!(permutation_p_value(&a, &noise, 2000, 1).unwrap() > 0.01);
        assert_eq!(permutation_p_value(&a, &b, 500, 9).unwrap(), permutation_p_value(&a, &b, 500, 9).unwrap());
    }

    #[test]
    fn quantile_levels_tie_to_lower() {
        let lv = quantile_levels(&[0.0, 0.0, 0.0, 0.5, 0.7, 0.9], EQUAL_THIRDS).unwrap();
        assert_eq!(lv, vec![1, 1, 1, 2, 3, 3]);
        assert!(quantile_levels(&[1.0], (0.7, 0.2)).is_err());
    }

    #[test]
    fn accuracy_identity_and_shuffle_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        assert_eq!(recognition_accuracy(&r, &r, EQUAL_THIRDS).unwrap(), 1.0);
        let mut mean = 0.0;
        let trials = 400;
        for _ in 0..trials {
            let mut p = r.clone();
            p.shuffle(&mut rng);
            mean += recognition_accuracy(&p, &r, EQUAL_THIRDS).unwrap();
        }
        mean /= trials as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.01, "mean {mean}");
        assert!(recognition_accuracy(&r[..10], &r, EQUAL_THIRDS).is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_scale_invariant(seed in 0u64..200, c in 0.1f32..10.0) {
            let spec = SceneSpec {
                dims: [2, 4, 16, 16],
                regions: vec![
                    Region::new(Pattern::Constant, 0.1),
                    Region::new(Pattern::Sinusoid { fy: 0.35, fx: 0.1 }, 3.0).cols([0, 8]),
                ],
                seed,
                phase_spread: 0.3,
            };
            let run = synth_trajectory(&render_scene(&spec).unwrap(), 20, seed).unwrap();
            let cfg = AnalyzerConfig::new(4, BlockSize::new(2, 8, 8));
            let a = complexity_map(&run, &cfg).unwrap();
            let b = complexity_map(&run.scaled(c).unwrap(), &cfg).unwrap();
            for (x, y) in a.normalized.iter().zip(&b.normalized) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }

        #[test]
        fn min_max_lands_in_unit_interval(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            let m = min_max(&v);
            prop_assert!(m.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
