//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::process::ExitCode;
use std::sync::atomic::{AtomicIsize, Ordering};
use std::time::Instant;

use jano_cli::commands::constancy::{constancy_experiment, PairKind, CONSTANCY_HORIZON};
use jano_cli::commands::median;
use jano_cli::config::ConstancySection;
use jano_core::analyzer::{
    complexity_map, fft_ground_truth, ground_truth_maps, permutation_p_value, recognition_accuracy, spearman,
    EQUAL_THIRDS,
};
use jano_core::flow::{eps_to_v, interpolate, latent_distance, oracle_epsilon, oracle_velocity, Component};
use jano_core::runtime::{
    attention_macs, cache_memory_report, integrate_full, masked_forward, relative_l2, run_pipeline, CachedDiT,
    LevelSelection, OracleField, PipelineConfig, PipelineOutput, PlanSource, VelocityModel,
};
use jano_core::scheduler::{build_step_plan, estimate_cost, optimize_thresholds};
use jano_core::synth::{gaussian_latent, render_scene, standard_suite, synth_trajectory, SceneField};
use jano_core::{
    AnalyzerConfig, BlockGrid, BlockSize, ComplexityMap, KVCacheStore, LatentShape, Level, LevelMap, MixtureTarget,
    ModelConfig, NoiseSchedule, ScheduleConfig, StepPlan, TokenMatrix, ToyDiT, VolumeDims,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Net heap bytes currently allocated by the process.
static NET_BYTES: AtomicIsize = AtomicIsize::new(0);

struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            NET_BYTES.fetch_add(layout.size() as isize, Ordering::Relaxed);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            NET_BYTES.fetch_add(layout.size() as isize, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        NET_BYTES.fetch_sub(layout.size() as isize, Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            NET_BYTES.fetch_add(new_size as isize - layout.size() as isize, Ordering::Relaxed);
        }
        p
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Spearman's rho from O(n^2) rank counting, independent of the library's
/// sort-based ranks.
fn naive_spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// 1: shared-target distance nullity.
fn distance_nullity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid: Vec<f64> = (1..=18).map(|k| k as f64 * 0.05).collect();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=16);
        let x1 = normal_vec(&mut rng, dim, 3.0);
        let target = MixtureTarget::point_mass(x1.clone()).map_err(err)?;
        let (x0a, x0b) = (normal_vec(&mut rng, dim, 1.0), normal_vec(&mut rng, dim, 1.0));
        for &t in &grid {
            let va = oracle_velocity(&target, &interpolate(&x0a, &x1, t).map_err(err)?, t).map_err(err)?;
            let vb = oracle_velocity(&target, &interpolate(&x0b, &x1, t).map_err(err)?, t).map_err(err)?;
            let d = latent_distance(&va, &vb, &x0a, &x0b).map_err(err)?;
            worst = worst.max(d.abs());
        }
    }
    Ok((worst <= 1e-9, format!("max |D| = {worst:.2e} over 1000 pairs (tol 1e-9)")))
}

// 2: velocity constancy on a two-component mixture.
fn velocity_constancy() -> Outcome {
    let section = ConstancySection {
        pairs: 500,
        ..ConstancySection::default()
    };
    let r = constancy_experiment("acceptance", &section, 2).map_err(err)?;
    // Recompute both statistics from the raw profile rows.
    let mut same: Vec<Vec<f64>> = vec![Vec::new(); section.pairs];
    let (mut same_half, mut cross_half) = (vec![f64::NAN; section.pairs], vec![f64::NAN; section.pairs]);
    for row in &r.rows {
        let at_half = (row.t - CONSTANCY_HORIZON).abs() < 1e-9;
        match row.kind {
            PairKind::SameComponent => {
                if row.t <= CONSTANCY_HORIZON + 1e-9 {
                    same[row.pair].push(row.distance);
                }
                if at_half {
                    same_half[row.pair] = row.distance;
                }
            }
            PairKind::CrossComponent if at_half => cross_half[row.pair] = row.distance,
            _ => {}
        }
    }
    let cv = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt() / m
    };
    let max_cv = same.iter().map(|v| cv(v)).fold(0.0, f64::max);
    let exceeds = cross_half.iter().zip(&same_half).filter(|(c, s)| c > s).count() as f64 / section.pairs as f64;
    let consistent = (max_cv - r.summary.same_component_max_cv).abs() < 1e-12
        && (exceeds - r.summary.cross_exceeds_fraction).abs() < 1e-12;
    Ok((
        max_cv <= 0.05 && exceeds >= 0.95 && consistent,
        format!("max same-component CV = {max_cv:.4} (tol 0.05), cross > same at t=0.5 in {:.1}% (need 95%)", exceeds * 100.0),
    ))
}

const SUITE_SEED: u64 = 2024;
const SUITE_BLOCK: BlockSize = BlockSize {
    frames: 2,
    height: 8,
    width: 8,
};

struct RecognitionStats {
    lines: Vec<String>,
    pass_accuracy: bool,
    pass_correlation: bool,
}

// 3 and 4 share the trajectories.
fn recognition_suite() -> Result<RecognitionStats, String> {
    let specs = standard_suite(20, SUITE_SEED);
    let mut runs = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let clean = render_scene(spec).map_err(err)?;
        let run = synth_trajectory(&clean, 50, 1000 + i as u64).map_err(err)?;
        let grid = BlockGrid::new(clean.shape().volume_dims(), SUITE_BLOCK).map_err(err)?;
        let truth = ground_truth_maps(&run, &grid).map_err(err)?;
        runs.push((run, truth));
    }
    let mut stats = RecognitionStats {
        lines: Vec::new(),
        pass_accuracy: true,
        pass_correlation: true,
    };
    for k in 5..=7 {
        let cfg = AnalyzerConfig::new(k, SUITE_BLOCK);
        let (mut acc, mut base) = (Vec::new(), Vec::new());
        let (mut scores, mut conv) = (Vec::new(), Vec::new());
        for (run, truth) in &runs {
            let map = complexity_map(run, &cfg).map_err(err)?;
            let grid = map.grid.clone();
            let baseline = fft_ground_truth(&run.latent(k).map_err(err)?, &grid).map_err(err)?;
            acc.push(recognition_accuracy(&map.normalized, &truth.fft, EQUAL_THIRDS).map_err(err)?);
            base.push(recognition_accuracy(&baseline, &truth.fft, EQUAL_THIRDS).map_err(err)?);
            scores.extend_from_slice(&map.normalized);
            conv.extend_from_slice(&truth.convergence);
        }
        let (ma, mb) = (median(&acc), median(&base));
        let ok_acc = ma >= 0.65 && ma >= mb + 0.2;
        let rho = spearman(&scores, &conv).map_err(err)?;
        let rho_check = naive_spearman(&scores, &conv);
        let p = permutation_p_value(&scores, &conv, 10_000, 40 + k as u64).map_err(err)?;
        let ok_corr = rho >= 0.6 && p < 1e-3 && (rho - rho_check).abs() < 1e-9;
        stats.pass_accuracy &= ok_acc;
        stats.pass_correlation &= ok_corr;
        stats.lines.push(format!(
            "K={k}: median accuracy {ma:.3} vs baseline {mb:.3} | rho {rho:.3} (oracle {rho_check:.3}), p {p:.1e}"
        ));
    }
    Ok(stats)
}

/// Dense multi-head attention in f64 over explicit key/value rows.
fn naive_attention(q: &TokenMatrix, keys: &[Vec<f32>], values: &[Vec<f32>], heads: usize) -> TokenMatrix {
    let d = q.cols;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = TokenMatrix::zeros(q.rows, d);
    let mut w = vec![0.0f64; keys.len()];
    for i in 0..q.rows {
        let qi = q.row(i);
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            for (j, k) in keys.iter().enumerate() {
                w[j] = qi[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>()
                    * scale;
            }
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in w.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            let mut acc = vec![0.0f64; hd];
            for (v, p) in values.iter().zip(&w) {
                for (a, x) in acc.iter_mut().zip(&v[r.clone()]) {
                    *a += p * f64::from(*x);
                }
            }
            for (slot, a) in out.row_mut(i)[r.clone()].iter_mut().zip(&acc) {
                *slot = (a / z) as f32;
            }
        }
    }
    out
}

/// The model on `ids`, with every other token's keys and values taken
/// from the cache as it stands.
fn stale_kv_oracle(
    model: &ToyDiT,
    cache: &KVCacheStore,
    tokens: &TokenMatrix,
    ids: &[usize],
    t: f64,
) -> Result<TokenMatrix, String> {
    let n = cache.num_tokens();
    let mut pos = vec![usize::MAX; n];
    for (i, &id) in ids.iter().enumerate() {
        pos[id] = i;
    }
    let mut h = model.embed(tokens, t);
    for (l, layer) in model.layers().iter().enumerate() {
        let qkv = layer.norm_qkv(&h);
        let (mut keys, mut values) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (tok, &p) in pos.iter().enumerate() {
            if p != usize::MAX {
                keys.push(qkv.k.row(p).to_vec());
                values.push(qkv.v.row(p).to_vec());
            } else {
                let (k, v) = cache.cached_kv(l, tok).ok_or(format!("token {tok} has no cached row"))?;
                keys.push(k.to_vec());
                values.push(v.to_vec());
            }
        }
        let a = naive_attention(&qkv.q, &keys, &values, model.heads());
        h = layer.output(&h, &a);
    }
    Ok(model.head(&h))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn random_token_levels(rng: &mut ChaCha8Rng, n: usize, active_share: f64) -> Vec<Level> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < active_share {
                Level::Active
            } else if u < active_share + (1.0 - active_share) / 2.0 {
                Level::Moderate
            } else {
                Level::Static
            }
        })
        .collect()
}

// 5: token-sparse forward against a dense stale-KV oracle.
fn attention_equivalence() -> Outcome {
    let shape = LatentShape::new(4, 4, 16, 16);
    let n = shape.cells();
    let model = ToyDiT::new(ModelConfig::new(4, 64, 4, 11), shape.channels).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cache = KVCacheStore::for_model(&model, n);
    let all: Vec<usize> = (0..n).collect();
    let mut levels = Vec::new();
    let (mut worst, mut rows_ok) = (0.0f32, true);
    for p in 0..200u64 {
        if p % 20 == 0 {
            levels = random_token_levels(&mut rng, n, 0.05);
            cache.assign(&levels).map_err(err)?;
            let fill = gaussian_latent(shape, 900 + p).to_tokens();
            masked_forward(&model, &fill, &all, &mut cache, 0.2).map_err(err)?;
        }
        let f: f64 = rng.random_range(0.05..0.5);
        let ids: Vec<usize> = (0..n).filter(|&i| levels[i] == Level::Active || rng.random_bool(f)).collect();
        let t: f64 = rng.random_range(0.05..0.95);
        let tokens = gaussian_latent(shape, 2000 + p).to_tokens().gather(&ids);
        let want = stale_kv_oracle(&model, &cache, &tokens, &ids, t)?;
        let got = masked_forward(&model, &tokens, &ids, &mut cache, t).map_err(err)?;
        worst = worst.max(max_abs_diff(&got.data, &want.data));
        rows_ok &= ids.iter().all(|&id| levels[id] == Level::Active || cache.cached_kv(0, id).is_some());
    }

    // All-active plan through the scheduler against the plain loop.
    let block = BlockSize::new(2, 8, 8);
    let grid = BlockGrid::new(shape.volume_dims(), block).map_err(err)?;
    let x0 = gaussian_latent(shape, 77);
    let source = PlanSource::Fixed {
        plan: StepPlan::all_active(grid.len(), 4),
        levels: LevelMap::uniform(grid.len(), Level::Active),
    };
    let out = run_pipeline(&mut CachedDiT::new(model.clone()), &x0, source, &PipelineConfig { steps: 4, block })
        .map_err(err)?;
    let plain = integrate_full(|x, t| model.full_forward(x, t), &x0, 4).map_err(err)?;
    let e2e = max_abs_diff(out.latent.data(), plain.data());
    Ok((
        worst <= 1e-5 && e2e <= 1e-5 && rows_ok,
        format!("max error {worst:.2e} over 200 freeze patterns (tol 1e-5); all-active vs plain loop {e2e:.2e}"),
    ))
}

// 6: query-side FLOPs are linear in the active share; wall time follows.
fn near_linear_speedup() -> Outcome {
    // Counting oracle: walk the key segments masked_forward attends over.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d) = (4096usize, 64usize);
    let full_macs = attention_macs(n, n, d);
    let mut exact = true;
    for _ in 0..20 {
        let share = rng.random_range(0.0..0.5);
        let levels = random_token_levels(&mut rng, n, share);
        let ids: Vec<usize> = (0..n).filter(|&i| levels[i] == Level::Active || rng.random_bool(0.3)).collect();
        let fresh = ids.len();
        let frozen = n - fresh;
        let mut counted = 0u64;
        for _query in 0..fresh {
            for _key in 0..fresh + frozen {
                counted += 2 * d as u64;
            }
        }
        exact &= counted == attention_macs(fresh, n, d);
        exact &= counted as u128 * n as u128 == full_macs as u128 * fresh as u128;
    }
    // Plan-level pair counts.
    let grid = BlockGrid::new(VolumeDims { frames: 4, height: 32, width: 32 }, BlockSize::new(2, 8, 8)).map_err(err)?;
    let sched = ScheduleConfig::wan_1_3b(50);
    for _ in 0..10 {
        let levels = LevelMap {
            levels: (0..grid.len())
                .map(|_| [Level::Static, Level::Moderate, Level::Active][rng.random_range(0..3)])
                .collect(),
        };
        let plan = build_step_plan(&levels, &sched).map_err(err)?;
        let cost = estimate_cost(&plan, &grid).map_err(err)?;
        let walked: u64 = (1..=plan.len()).map(|k| plan.active_tokens(k, &grid).len() as u64).sum();
        exact &= cost.attention_pairs_per_layer == walked * grid.num_tokens() as u64;
        exact &= cost.token_steps == walked;
    }

    // Wall clock at sequence length 4096.
    let shape = LatentShape::new(4, 4, 32, 32);
    let model = ToyDiT::new(ModelConfig::new(2, 64, 4, 3), shape.channels).map_err(err)?;
    let tokens = gaussian_latent(shape, 6).to_tokens();
    let all: Vec<usize> = (0..n).collect();
    let mut full_cache = KVCacheStore::for_model(&model, n);
    let mut cache = KVCacheStore::for_model(&model, n);
    let levels: Vec<Level> = (0..n).map(|i| if i % 4 == 0 { Level::Active } else { Level::Static }).collect();
    cache.assign(&levels).map_err(err)?;
    masked_forward(&model, &tokens, &all, &mut cache, 0.3).map_err(err)?;
    let quarter: Vec<usize> = (0..n).step_by(4).collect();
    let q_tokens = tokens.gather(&quarter);
    let time = |f: &mut dyn FnMut() -> Result<(), String>| -> Result<f64, String> {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            f()?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let t_full = time(&mut || masked_forward(&model, &tokens, &all, &mut full_cache, 0.4).map(|_| ()).map_err(err))?;
    let t_quarter = time(&mut || masked_forward(&model, &q_tokens, &quarter, &mut cache, 0.4).map(|_| ()).map_err(err))?;
    let ratio = t_quarter / t_full;
    Ok((
        exact && ratio <= 0.55,
        format!(
            "FLOP counts exact: {exact}; 25% active {:.0} ms vs full {:.0} ms, ratio {ratio:.3} (tol 0.55) at N=4096",
            t_quarter * 1e3,
            t_full * 1e3
        ),
    ))
}

/// Computed steps per level, by walking the schedule one step at a time.
fn steps_per_level(cfg: &ScheduleConfig) -> [usize; 3] {
    let mut out = [0; 3];
    for k in 1..=cfg.steps {
        let edge = k <= cfg.warmup || k > cfg.steps - cfg.cooldown;
        for (slot, interval) in [cfg.static_interval, cfg.moderate_interval, 1].into_iter().enumerate() {
            if edge || (k - cfg.warmup - 1) % interval == 0 {
                out[slot] += 1;
            }
        }
    }
    out
}

struct GridChoice {
    s: f64,
    m: f64,
    cost: f64,
    counts: [usize; 3],
}

/// Every threshold pair on the nearest-rank quantile grid, with its cost.
fn grid_plans(scores: &[f64], sizes: &[usize], cfg: &ScheduleConfig) -> Vec<GridChoice> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cands = vec![0.0];
    cands.extend((1..=20).map(|i| sorted[(n * i).div_ceil(20) - 1]));
    let per_level = steps_per_level(cfg);
    let total: usize = sizes.iter().sum();
    let mut out = Vec::new();
    for &s in &cands {
        for &m in cands.iter().filter(|&&m| m >= s) {
            let mut counts = [0; 3];
            let mut token_steps = 0;
            for (&x, &size) in scores.iter().zip(sizes) {
                let l = if x <= s { 0 } else if x <= m { 1 } else { 2 };
                counts[l] += 1;
                token_steps += size * per_level[l];
            }
            let cost = token_steps as f64 / (total * cfg.steps) as f64;
            out.push(GridChoice { s, m, cost, counts });
        }
    }
    out
}

/// Exhaustive search: most active blocks, then most moderate ones, then the
/// lowest thresholds, among plans within budget.
fn grid_search(plans: &[GridChoice], budget: f64) -> Option<&GridChoice> {
    plans
        .iter()
        .filter(|p| p.cost <= budget + 1e-12)
        .max_by(|a, b| {
            (a.counts[2], a.counts[1], -a.s, -a.m)
                .partial_cmp(&(b.counts[2], b.counts[1], -b.s, -b.m))
                .expect("finite thresholds")
        })
}

// 7: threshold optimizer against exhaustive search.
fn optimizer_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Uneven edge blocks make token weighting matter.
    let grid = BlockGrid::new(VolumeDims { frames: 3, height: 44, width: 44 }, BlockSize::new(2, 8, 8)).map_err(err)?;
    let sizes = grid.token_counts();
    let cfg = ScheduleConfig::wan_1_3b(50);
    let (mut matched, mut reachable, mut close) = (0usize, 0usize, 0usize);
    let mut worst_gap = 0.0f64;
    for i in 0..50 {
        let raw: Vec<f64> = (0..grid.len())
            .map(|_| {
                let x: f64 = rng.random();
                // Every third map is coarsely quantized to produce ties.
                if i % 3 == 0 { (x * 6.0).round() / 6.0 } else { x.powf(1.0 + (i % 4) as f64) }
            })
            .collect();
        let map = ComplexityMap::from_raw(grid.clone(), raw).map_err(err)?;
        let budget: f64 = rng.random_range(0.3..1.0);
        let plans = grid_plans(&map.normalized, &sizes, &cfg);
        let want = grid_search(&plans, budget);
        match (optimize_thresholds(&map, budget, &cfg), want) {
            (Ok(got), Some(w)) => {
                let same = got.static_threshold == w.s
                    && got.moderate_threshold == w.m
                    && got.counts == w.counts
                    && (got.cost - w.cost).abs() < 1e-12;
                if same && got.cost <= budget + 1e-12 {
                    matched += 1;
                }
                // The 5% requirement applies where the grid offers such a plan.
                if plans.iter().any(|p| p.cost <= budget + 1e-12 && p.cost >= 0.95 * budget) {
                    reachable += 1;
                    let gap = (budget - got.cost) / budget;
                    worst_gap = worst_gap.max(gap);
                    if gap <= 0.05 {
                        close += 1;
                    }
                }
            }
            (Err(jano_core::Error::BudgetInfeasible { .. }), None) => matched += 1,
            (got, want) => {
                return Ok((false, format!("map {i}: optimizer {got:?}, search found {}", want.is_some())));
            }
        }
    }
    Ok((
        matched == 50 && close == reachable,
        format!(
            "{matched}/50 maps match exhaustive search; cost within 5% of budget on {close}/{reachable} maps \
             where the quantile grid allows it (worst shortfall {:.2}%)",
            worst_gap * 100.0
        ),
    ))
}

// 8: noise-prediction to velocity conversion is first order in the step.
fn eps_to_v_order() -> Outcome {
    let target = MixtureTarget::new(vec![
        Component {
            weight: 0.4,
            mean: vec![1.5, -0.5, 0.8],
            variance: 0.3,
        },
        Component {
            weight: 0.6,
            mean: vec![-1.0, 1.0, 0.0],
            variance: 0.1,
        },
    ])
    .map_err(err)?;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let t = 0.5;
    let (alpha, sigma) = ((half_pi * t).sin(), (half_pi * t).cos());
    let (alpha_dot, sigma_dot) = (half_pi * (half_pi * t).cos(), -half_pi * (half_pi * t).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..20).map(|_| normal_vec(&mut rng, 3, 1.5)).collect();
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for n in [10usize, 20, 40] {
        let schedule = NoiseSchedule::cosine(NoiseSchedule::uniform_times(0.0, 1.0, n)).map_err(err)?;
        let k = n / 2;
        let mut worst = 0.0f64;
        for x in &points {
            let eps = oracle_epsilon(&target, x, alpha, sigma).map_err(err)?;
            let v = eps_to_v(&eps, x, &schedule, k).map_err(err)?;
            // Exact velocity from the posterior means and analytic derivatives.
            let m = target.posterior_mean(x, alpha, sigma).map_err(err)?;
            let exact: Vec<f64> = x
                .iter()
                .zip(&m)
                .map(|(xi, mi)| alpha_dot * mi + sigma_dot * (xi - alpha * mi) / sigma)
                .collect();
            worst = worst.max(l2(&v, &exact));
        }
        hs.push(1.0 / n as f64);
        errs.push(worst);
    }
    let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (_, slope, _) = jano_cli::commands::linear_fit(&lx, &ly).ok_or("degenerate fit")?;
    Ok((
        slope >= 0.9,
        format!("errors {:.2e} / {:.2e} / {:.2e} at h = 0.1 / 0.05 / 0.025, observed order {slope:.3} (tol 0.9)", errs[0], errs[1], errs[2]),
    ))
}

fn oracle_run(field: &SceneField, x0: &jano_core::LatentTensor, source: PlanSource) -> Result<PipelineOutput, String> {
    let mut model = OracleField { field: field.clone() };
    let m: &mut dyn VelocityModel = &mut model;
    run_pipeline(m, x0, source, &PipelineConfig { steps: 50, block: SUITE_BLOCK }).map_err(err)
}

// 9: quality under freezing on oracle rollouts.
fn end_to_end_quality() -> Outcome {
    let sched = ScheduleConfig::wan_1_3b(50);
    let (mut worst_err, mut worst_frac, mut aware_wins) = (0.0f64, 0.0f64, 0usize);
    let mut matched_cost = true;
    let specs = standard_suite(20, SUITE_SEED);
    for (i, spec) in specs.iter().enumerate() {
        let field = SceneField::from_spec(spec).map_err(err)?;
        let x0 = gaussian_latent(field.shape, 500 + i as u64);
        let grid = BlockGrid::new(field.shape.volume_dims(), SUITE_BLOCK).map_err(err)?;
        let full = oracle_run(
            &field,
            &x0,
            PlanSource::Fixed {
                plan: StepPlan::all_active(grid.len(), 50),
                levels: LevelMap::uniform(grid.len(), Level::Active),
            },
        )?;
        let aware = oracle_run(
            &field,
            &x0,
            PlanSource::Analyze {
                analyzer: AnalyzerConfig::new(5, SUITE_BLOCK),
                schedule: sched,
                selection: LevelSelection::Thresholds,
            },
        )?;
        // Same level counts on shuffled blocks: an identical token budget.
        let mut shuffled = aware.levels.clone();
        shuffled.levels.shuffle(&mut ChaCha8Rng::seed_from_u64(700 + i as u64));
        let plan = build_step_plan(&shuffled, &sched).map_err(err)?;
        let random = oracle_run(&field, &x0, PlanSource::Fixed { plan, levels: shuffled })?;

        let aware_cost = estimate_cost(&aware.plan, &grid).map_err(err)?;
        let random_cost = estimate_cost(&random.plan, &grid).map_err(err)?;
        matched_cost &= aware_cost.token_steps == random_cost.token_steps;
        let (ea, er) = (relative_l2(&aware.latent, &full.latent), relative_l2(&random.latent, &full.latent));
        worst_err = worst_err.max(ea);
        worst_frac = worst_frac.max(aware_cost.fraction);
        if ea <= er {
            aware_wins += 1;
        }
    }
    Ok((
        worst_err <= 0.05 && worst_frac <= 0.55 && aware_wins == specs.len() && matched_cost,
        format!(
            "worst relative L2 {worst_err:.4} (tol 0.05), worst token fraction {worst_frac:.3} (tol 0.55), \
             convergence-aware <= random on {aware_wins}/{} scenes",
            specs.len()
        ),
    ))
}

// 10: cache memory report against the closed form and the allocator.
fn memory_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (layers, d) = (4usize, 64usize);
    let (mut exact, mut worst_rel) = (true, 0.0f64);
    for (trial, &n) in [1024usize, 4096, 2048, 1024, 4096].iter().enumerate() {
        let levels = random_token_levels(&mut rng, n, 0.2 + 0.1 * trial as f64);
        let count = |l: Level| levels.iter().filter(|&&x| x == l).count();
        let mut cache = KVCacheStore::new(layers, d, n);
        let before = NET_BYTES.load(Ordering::SeqCst);
        cache.assign(&levels).map_err(err)?;
        let growth = (NET_BYTES.load(Ordering::SeqCst) - before) as f64;
        let report = cache_memory_report(&cache);
        let mut closed_total = 0u64;
        for row in &report.rows {
            let lvl = if row.level == 1 { Level::Static } else { Level::Moderate };
            let bytes = (count(lvl) * d * 2 * 4) as u64;
            exact &= row.rows == count(lvl) && row.bytes == bytes;
            closed_total += bytes;
        }
        let formula = ((count(Level::Static) + count(Level::Moderate)) * d * 2 * 4 * layers) as u64;
        exact &= report.rows.len() == 2 * layers && report.total_bytes == formula && closed_total == formula;
        exact &= cache.total_payload_bytes() as u64 == formula;
        worst_rel = worst_rel.max((growth - formula as f64).abs() / formula as f64);
    }
    Ok((
        exact && worst_rel <= 0.10,
        format!("report equals rows*d*2*4*L exactly: {exact}; allocation growth within {:.2}% of formula (tol 10%)", worst_rel * 100.0),
    ))
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u8, name: &str, limit: Option<f64>, secs: f64, outcome: Outcome) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = ok && in_time;
        if !pass {
            self.failures += 1;
        }
        let budget = limit.map_or(String::new(), |l| format!(", limit {l:.0}s"));
        println!(
            "{} {id:>2} {name}: {detail} [{secs:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored; a filter
    // argument of "--list" reports nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut report = Report { failures: 0 };

    let (o, s) = timed(distance_nullity);
    report.line(1, "shared-target distance nullity", Some(5.0), s, o);
    let (o, s) = timed(velocity_constancy);
    report.line(2, "velocity constancy", Some(30.0), s, o);

    let (rec, s) = timed(recognition_suite);
    match rec {
        Ok(r) => {
            let detail = r.lines.join("; ");
            report.line(3, "early recognition beats FFT baseline", Some(120.0), s, Ok((r.pass_accuracy, detail.clone())));
            report.line(4, "complexity-convergence correlation", Some(120.0), s, Ok((r.pass_correlation, detail)));
        }
        Err(e) => {
            report.line(3, "early recognition beats FFT baseline", Some(120.0), s, Err(e.clone()));
            report.line(4, "complexity-convergence correlation", Some(120.0), s, Err(e));
        }
    }

    let (o, s) = timed(attention_equivalence);
    report.line(5, "attention equivalence", Some(120.0), s, o);
    let (o, s) = timed(near_linear_speedup);
    report.line(6, "near-linear speedup", Some(300.0), s, o);
    let (o, s) = timed(optimizer_optimality);
    report.line(7, "threshold optimizer optimality", Some(60.0), s, o);
    let (o, s) = timed(eps_to_v_order);
    report.line(8, "eps to v transform order", Some(30.0), s, o);
    let (o, s) = timed(end_to_end_quality);
    report.line(9, "end-to-end quality under freezing", Some(300.0), s, o);
    let (o, s) = timed(memory_accounting);
    report.line(10, "memory accounting", None, s, o);

    println!("{} of 10 criteria passed", 10 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
