//! Full pipeline per scene against an all-active reference.

use jano_core::runtime::{
    relative_l2, run_pipeline, LevelSelection, MemoryRow, PipelineConfig, PipelineOutput, PlanSource,
};
use jano_core::scheduler::estimate_cost;
use jano_core::{BlockGrid, Level, LevelMap, StepPlan};
use serde::Serialize;

use super::{full_run, scene_cases, scene_dir, Context, SceneCase};
use crate::config::{Preset, RunConfig};
use crate::error::Result;
use crate::output::{Manifest, OutputDir};

/// Ledger totals must match the measured loop time this closely.
pub const LEDGER_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Serialize)]
pub struct PlanRow {
    pub scene: usize,
    pub step: usize,
    pub phase: &'static str,
    pub active_blocks: usize,
    pub active_tokens: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub scene: usize,
    pub block: usize,
    pub raw: f64,
    pub score: f64,
    pub level: u8,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub scene: usize,
    /// `full` for the reference run, `pipeline` otherwise.
    pub arm: &'static str,
    pub step: usize,
    pub phase: &'static str,
    pub level: u8,
    pub tokens: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryCsvRow {
    pub scene: usize,
    pub layer: usize,
    pub level: u8,
    pub rows: usize,
    pub bytes: u64,
}

/// Reproducible per-scene results.
#[derive(Debug, Clone, Serialize)]
pub struct SceneResult {
    pub scene: usize,
    pub token_steps: u64,
    pub full_token_steps: u64,
    pub token_fraction: f64,
    /// `1 / token_fraction`: the speedup implied by query-side work.
    pub modeled_speedup: f64,
    pub relative_l2: f64,
    pub static_blocks: usize,
    pub moderate_blocks: usize,
    pub active_blocks: usize,
    pub cache_bytes: u64,
}

/// Wall-clock results; these differ between reruns.
#[derive(Debug, Clone, Serialize)]
pub struct SceneTiming {
    pub scene: usize,
    pub full_millis: f64,
    pub pipeline_millis: f64,
    pub measured_speedup: f64,
    pub ledger_millis: f64,
    pub ledger_error: f64,
    pub ledger_consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub experiment: String,
    pub scenes: Vec<SceneResult>,
    pub mean_token_fraction: f64,
    pub max_relative_l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingSummary {
    pub scenes: Vec<SceneTiming>,
    pub mean_measured_speedup: f64,
    pub all_ledgers_consistent: bool,
}

pub fn plan_source(cfg: &RunConfig, grid: &BlockGrid) -> PlanSource {
    match cfg.schedule.preset {
        Preset::AllActive => PlanSource::Fixed {
            plan: StepPlan::all_active(grid.len(), cfg.steps),
            levels: LevelMap::uniform(grid.len(), Level::Active),
        },
        _ => PlanSource::Analyze {
            analyzer: cfg.analyzer_config(),
            schedule: cfg.schedule_config(),
            selection: cfg.schedule.budget.map_or(LevelSelection::Thresholds, LevelSelection::Budget),
        },
    }
}

pub fn pipeline_run(case: &SceneCase, cfg: &RunConfig, source: PlanSource) -> Result<PipelineOutput> {
    let pc = PipelineConfig {
        steps: cfg.steps,
        block: cfg.analyzer.block,
    };
    let mut model = case.model(cfg)?;
    Ok(run_pipeline(model.as_mut(), &case.x0(), source, &pc)?)
}

/// Everything `run` records for one scene.
#[derive(Debug, Clone)]
pub struct SceneRun {
    pub result: SceneResult,
    pub timing: SceneTiming,
    pub full: PipelineOutput,
    pub pipeline: PipelineOutput,
}

pub fn run_scene(case: &SceneCase, cfg: &RunConfig) -> Result<SceneRun> {
    let full = full_run(case, cfg)?;
    let grid = BlockGrid::new(case.clean.shape().volume_dims(), cfg.analyzer.block)?;
    let pipeline = pipeline_run(case, cfg, plan_source(cfg, &grid))?;
    let cost = estimate_cost(&pipeline.plan, &grid)?;
    let [l1, l2, l3] = pipeline.levels.counts();
    let ledger = pipeline.state.ledger.total_millis();
    let ledger_error = (ledger - pipeline.wall_millis).abs() / pipeline.wall_millis.max(f64::MIN_POSITIVE);
    Ok(SceneRun {
        result: SceneResult {
            scene: case.index,
            token_steps: pipeline.state.token_steps,
            full_token_steps: full.state.token_steps,
            token_fraction: cost.fraction,
            modeled_speedup: 1.0 / cost.fraction,
            relative_l2: relative_l2(&pipeline.latent, &full.latent),
            static_blocks: l1,
            moderate_blocks: l2,
            active_blocks: l3,
            cache_bytes: pipeline.state.cache_bytes,
        },
        timing: SceneTiming {
            scene: case.index,
            full_millis: full.wall_millis,
            pipeline_millis: pipeline.wall_millis,
            measured_speedup: full.wall_millis / pipeline.wall_millis,
            ledger_millis: ledger,
            ledger_error,
            ledger_consistent: ledger_error <= LEDGER_TOLERANCE,
        },
        full,
        pipeline,
    })
}

fn timing_rows<'a>(scene: usize, arm: &'static str, out: &'a PipelineOutput) -> impl Iterator<Item = TimingRow> + 'a {
    out.state.ledger.entries.iter().map(move |e| TimingRow {
        scene,
        arm,
        step: e.step,
        phase: e.phase,
        level: e.level,
        tokens: e.tokens,
        millis: e.millis,
    })
}

pub fn cmd_run(ctx: &Context) -> Result<Manifest> {
    let cfg = &ctx.config;
    let cases = scene_cases(cfg)?;
    let runs = ctx.par_map(&cases, |_, case| run_scene(case, cfg))?;

    let mut out = OutputDir::create(&ctx.out)?;
    let (mut plans, mut levels, mut timing, mut memory) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (case, r) in cases.iter().zip(&runs) {
        let p = &r.pipeline;
        out.write_latent(&format!("{}/final.jlat", scene_dir(case.index)), &p.latent)?;
        let grid = BlockGrid::new(case.clean.shape().volume_dims(), cfg.analyzer.block)?;
        for (i, s) in p.plan.steps.iter().enumerate() {
            plans.push(PlanRow {
                scene: case.index,
                step: i + 1,
                phase: s.phase.name(),
                active_blocks: s.active_blocks.len(),
                active_tokens: p.plan.active_tokens(i + 1, &grid).len(),
            });
        }
        for (b, l) in p.levels.levels.iter().enumerate() {
            levels.push(LevelRow {
                scene: case.index,
                block: b,
                raw: p.map.as_ref().map_or(f64::NAN, |m| m.raw[b]),
                score: p.map.as_ref().map_or(f64::NAN, |m| m.normalized[b]),
                level: l.as_u8(),
            });
        }
        timing.extend(timing_rows(case.index, "full", &r.full));
        timing.extend(timing_rows(case.index, "pipeline", p));
        if let Some(m) = &p.memory {
            memory.extend(m.rows.iter().map(|&MemoryRow { layer, level, rows, bytes }| MemoryCsvRow {
                scene: case.index,
                layer,
                level,
                rows,
                bytes,
            }));
        }
    }
    let scenes: Vec<SceneResult> = runs.iter().map(|r| r.result.clone()).collect();
    let timings: Vec<SceneTiming> = runs.iter().map(|r| r.timing.clone()).collect();
    let n = scenes.len().max(1) as f64;
    out.write_csv("plan.csv", &plans)?;
    out.write_csv("levels.csv", &levels)?;
    out.write_csv("scenes.csv", &scenes)?;
    if !memory.is_empty() {
        out.write_csv("memory.csv", &memory)?;
    }
    out.write_timing_csv("timing.csv", &timing)?;
    out.write_json(
        "summary.json",
        &RunSummary {
            experiment: cfg.experiment.clone(),
            mean_token_fraction: scenes.iter().map(|s| s.token_fraction).sum::<f64>() / n,
            max_relative_l2: scenes.iter().map(|s| s.relative_l2).fold(0.0, f64::max),
            scenes,
        },
        true,
    )?;
    out.write_json(
        "timing_summary.json",
        &TimingSummary {
            mean_measured_speedup: timings.iter().map(|t| t.measured_speedup).sum::<f64>() / n,
            all_ledgers_consistent: timings.iter().all(|t| t.ledger_consistent),
            scenes: timings,
        },
        false,
    )?;
    out.finish(&cfg.experiment, "run")
}
