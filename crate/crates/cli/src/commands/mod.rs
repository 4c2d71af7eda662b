//! Experiment commands. Each one computes per-scene results on a worker
//! pool, then writes every table and the manifest from the calling thread.

pub mod ablate;
pub mod analyze;
pub mod constancy;
pub mod run;
pub mod simulate;

use std::path::{Path, PathBuf};

use jano_core::runtime::{run_pipeline, CachedDiT, OracleField, PipelineConfig, PipelineOutput, VelocityModel};
use jano_core::synth::{gaussian_latent, oracle_rollout, render_scene, synth_trajectory, SceneField};
use jano_core::{DenoisingRun, LatentTensor, Level, LevelMap, SceneSpec, StepPlan, ToyDiT};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::config::{ModelKind, RunConfig, TrajectoryKind};
use crate::error::{CliError, Result};

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "JANO_WORKERS";

/// Everything a command needs besides its own config sections.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(config: RunConfig, out: Option<&Path>, workers: usize) -> Result<Self> {
        let out = match (out, &config.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => o.clone(),
            (None, None) => return Err(CliError::config("output_dir", "no --out given and no `output_dir` in config")),
        };
        Ok(Self { config, out, workers })
    }

    pub fn pool(&self) -> Result<ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::Invariant(format!("worker pool: {e}")))
    }

    /// Maps `f` over `items` on the worker pool, keeping input order.
    pub fn par_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> Result<R> + Sync + Send,
    {
        let pool = self.pool()?;
        pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}

/// Worker count: `JANO_WORKERS` when set, else the flag, else all cores.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(WORKERS_ENV, format!("`{v}` is not a worker count")))?,
        ),
        Err(_) => None,
    };
    let n = from_env
        .or(flag)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::config("workers", "must be at least 1"));
    }
    Ok(n)
}

/// One scene with its noise, ready for any command.
#[derive(Debug, Clone)]
pub struct SceneCase {
    pub index: usize,
    pub spec: SceneSpec,
    pub clean: LatentTensor,
    pub field: SceneField,
    pub seed: u64,
}

impl SceneCase {
    pub fn new(cfg: &RunConfig, index: usize, spec: SceneSpec) -> Result<Self> {
        let clean = render_scene(&spec)?;
        let field = SceneField::from_spec(&spec)?;
        Ok(Self {
            index,
            spec,
            clean,
            field,
            seed: cfg.scene_seed(index),
        })
    }

    pub fn x0(&self) -> LatentTensor {
        gaussian_latent(self.clean.shape(), self.seed)
    }

    /// Reference trajectory of the configured kind.
    pub fn trajectory(&self, cfg: &RunConfig) -> Result<DenoisingRun> {
        Ok(match cfg.trajectory {
            TrajectoryKind::Rollout => oracle_rollout(&self.field, cfg.steps, self.seed)?,
            TrajectoryKind::Interpolated => synth_trajectory(&self.clean, cfg.steps, self.seed)?,
        })
    }

    pub fn model(&self, cfg: &RunConfig) -> Result<Box<dyn VelocityModel + Send>> {
        Ok(match cfg.model.kind {
            ModelKind::Oracle => Box::new(OracleField {
                field: self.field.clone(),
            }),
            ModelKind::Dit => Box::new(CachedDiT::new(ToyDiT::new(cfg.model_config(), self.clean.shape().channels)?)),
        })
    }
}

pub fn scene_cases(cfg: &RunConfig) -> Result<Vec<SceneCase>> {
    cfg.scene_specs()?
        .into_iter()
        .enumerate()
        .map(|(i, s)| SceneCase::new(cfg, i, s))
        .collect()
}

pub fn scene_dir(index: usize) -> String {
    format!("scene_{index:02}")
}

/// Every block computed at every step, with the given model.
pub fn full_run(case: &SceneCase, cfg: &RunConfig) -> Result<PipelineOutput> {
    let pc = PipelineConfig {
        steps: cfg.steps,
        block: cfg.analyzer.block,
    };
    let x0 = case.x0();
    let grid = jano_core::BlockGrid::new(x0.shape().volume_dims(), pc.block)?;
    let source = jano_core::runtime::PlanSource::Fixed {
        plan: StepPlan::all_active(grid.len(), cfg.steps),
        levels: LevelMap::uniform(grid.len(), Level::Active),
    };
    let mut model = case.model(cfg)?;
    Ok(run_pipeline(model.as_mut(), &x0, source, &pc)?)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((a, b, r2))
}
