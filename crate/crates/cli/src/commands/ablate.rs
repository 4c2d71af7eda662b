//! Random block freezing against convergence-aware plans at matched cost.
//!
//! Both arms freeze the same number of blocks at the static level, so their
//! token-step budgets are identical; the convergence-aware arm picks the
//! lowest-scoring blocks after warm-up.

use jano_core::runtime::{relative_l2, LevelSelection, PipelineOutput, PlanSource};
use jano_core::scheduler::{build_step_plan, estimate_cost};
use jano_core::{BlockGrid, Level, LevelMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::run::pipeline_run;
use super::{full_run, linear_fit, scene_cases, Context, SceneCase};
use crate::config::RunConfig;
use crate::error::Result;
use crate::output::{Manifest, OutputDir};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub scene: usize,
    pub ratio: f64,
    /// `random` or `convergence`.
    pub arm: &'static str,
    /// Fraction of blocks at the static level.
    pub frozen_fraction: f64,
    /// Query-side token steps relative to the full run.
    pub token_fraction: f64,
    pub modeled_speedup: f64,
    pub relative_l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTiming {
    pub scene: usize,
    pub ratio: f64,
    pub arm: &'static str,
    pub millis: f64,
    pub full_millis: f64,
    pub measured_speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioSummary {
    pub ratio: f64,
    pub mean_random_error: f64,
    pub mean_convergence_error: f64,
    /// Scenes where the convergence-aware arm is no worse than random.
    pub convergence_no_worse: usize,
    pub scenes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateSummary {
    pub experiment: String,
    pub ratios: Vec<RatioSummary>,
    /// True when the convergence-aware arm is no worse on every scene and
    /// ratio.
    pub convergence_never_worse: bool,
    /// Linear fit of token fraction on frozen fraction (random arm).
    pub flops_fit_slope: f64,
    pub flops_fit_r_squared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateTimingSummary {
    /// Linear fit of measured time fraction on token fraction.
    pub time_fit_slope: f64,
    pub time_fit_r_squared: f64,
}

/// `round(ratio * blocks)` blocks chosen at random become static.
pub fn random_levels(blocks: usize, ratio: f64, seed: u64) -> LevelMap {
    let frozen = (ratio * blocks as f64).round() as usize;
    let mut ids: Vec<usize> = (0..blocks).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut levels = vec![Level::Active; blocks];
    for &b in &ids[..frozen.min(blocks)] {
        levels[b] = Level::Static;
    }
    LevelMap { levels }
}

struct Arm {
    row: AblationRow,
    millis: f64,
}

fn arm(
    case: &SceneCase,
    ratio: f64,
    name: &'static str,
    out: &PipelineOutput,
    full: &PipelineOutput,
    grid: &BlockGrid,
) -> Result<Arm> {
    let cost = estimate_cost(&out.plan, grid)?;
    let [l1, _, _] = out.levels.counts();
    Ok(Arm {
        row: AblationRow {
            scene: case.index,
            ratio,
            arm: name,
            frozen_fraction: l1 as f64 / grid.len() as f64,
            token_fraction: cost.fraction,
            modeled_speedup: 1.0 / cost.fraction,
            relative_l2: relative_l2(&out.latent, &full.latent),
        },
        millis: out.wall_millis,
    })
}

/// Both arms at every ratio for one scene, plus the reference wall time.
pub fn ablate_scene(case: &SceneCase, cfg: &RunConfig) -> Result<(Vec<AblationRow>, Vec<AblationTiming>)> {
    let full = full_run(case, cfg)?;
    let grid = BlockGrid::new(case.clean.shape().volume_dims(), cfg.analyzer.block)?;
    let sched = cfg.schedule_config();
    let (mut rows, mut timing) = (Vec::new(), Vec::new());
    for (ri, &ratio) in cfg.ablate.ratios.iter().enumerate() {
        let levels = random_levels(grid.len(), ratio, case.seed.wrapping_mul(31).wrapping_add(ri as u64));
        let plan = build_step_plan(&levels, &sched)?;
        let frozen = levels.counts()[0];
        let random = pipeline_run(case, cfg, PlanSource::Fixed { plan, levels })?;
        let aware = pipeline_run(
            case,
            cfg,
            PlanSource::Analyze {
                analyzer: cfg.analyzer_config(),
                schedule: sched,
                selection: LevelSelection::FreezeLowest(frozen),
            },
        )?;
        for (name, out) in [("random", &random), ("convergence", &aware)] {
            let a = arm(case, ratio, name, out, &full, &grid)?;
            timing.push(AblationTiming {
                scene: case.index,
                ratio,
                arm: name,
                millis: a.millis,
                full_millis: full.wall_millis,
                measured_speedup: full.wall_millis / a.millis,
            });
            rows.push(a.row);
        }
    }
    Ok((rows, timing))
}

pub fn summarize(experiment: &str, ratios: &[f64], rows: &[AblationRow]) -> AblateSummary {
    let per_ratio: Vec<RatioSummary> = ratios
        .iter()
        .map(|&ratio| {
            let pick = |arm: &str| -> Vec<&AblationRow> {
                rows.iter().filter(|r| r.ratio == ratio && r.arm == arm).collect()
            };
            let (random, aware) = (pick("random"), pick("convergence"));
            let mean = |v: &[&AblationRow]| v.iter().map(|r| r.relative_l2).sum::<f64>() / v.len().max(1) as f64;
            RatioSummary {
                ratio,
                mean_random_error: mean(&random),
                mean_convergence_error: mean(&aware),
                convergence_no_worse: random
                    .iter()
                    .zip(&aware)
                    .filter(|(r, a)| a.relative_l2 <= r.relative_l2)
                    .count(),
                scenes: random.len(),
            }
        })
        .collect();
    let random: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == "random").collect();
    let x: Vec<f64> = random.iter().map(|r| r.frozen_fraction).collect();
    let y: Vec<f64> = random.iter().map(|r| r.token_fraction).collect();
    let (_, slope, r2) = linear_fit(&x, &y).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    AblateSummary {
        experiment: experiment.to_string(),
        convergence_never_worse: per_ratio.iter().all(|r| r.convergence_no_worse == r.scenes),
        ratios: per_ratio,
        flops_fit_slope: slope,
        flops_fit_r_squared: r2,
    }
}

pub fn cmd_ablate(ctx: &Context) -> Result<Manifest> {
    let cfg = &ctx.config;
    let cases = scene_cases(cfg)?;
    let results = ctx.par_map(&cases, |_, case| ablate_scene(case, cfg))?;
    let rows: Vec<AblationRow> = results.iter().flat_map(|r| r.0.iter().cloned()).collect();
    let timing: Vec<AblationTiming> = results.iter().flat_map(|r| r.1.iter().cloned()).collect();
    let summary = summarize(&cfg.experiment, &cfg.ablate.ratios, &rows);

    let tx: Vec<f64> = rows.iter().map(|r| r.token_fraction).collect();
    let ty: Vec<f64> = timing.iter().map(|t| t.millis / t.full_millis).collect();
    let (_, time_slope, time_r2) = linear_fit(&tx, &ty).unwrap_or((f64::NAN, f64::NAN, f64::NAN));

    let mut out = OutputDir::create(&ctx.out)?;
    out.write_csv("ablation.csv", &rows)?;
    out.write_timing_csv("timing.csv", &timing)?;
    out.write_json("summary.json", &summary, true)?;
    out.write_json(
        "timing_summary.json",
        &AblateTimingSummary {
            time_fit_slope: time_slope,
            time_fit_r_squared: time_r2,
        },
        false,
    )?;
    out.finish(&cfg.experiment, "ablate")
}
