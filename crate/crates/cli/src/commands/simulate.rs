//! Renders scenes and persists their denoising trajectories.

use std::path::Path;

use jano_core::latents::load_latent;
use jano_core::{DenoisingRun, LatentTensor};
use serde::Serialize;

use super::{scene_cases, scene_dir, Context};
use crate::error::{CliError, Result};
use crate::output::{Manifest, OutputDir};

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub scene: usize,
    pub step: usize,
    pub t: f64,
    /// Mean absolute change from the previous step's latent.
    pub mean_abs_change: f64,
}

#[derive(Debug, Clone, Serialize)]
struct SimulateSummary<'a> {
    experiment: &'a str,
    scenes: usize,
    steps: usize,
    shape: [usize; 4],
}

pub fn step_file(step: usize) -> String {
    format!("step_{step:03}.jlat")
}

fn mean_abs_change(a: &LatentTensor, b: &LatentTensor) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum::<f64>()
        / n
}

/// Writes `scene_XX/{scene.json, clean.jlat, step_000.jlat ..}` per scene,
/// where step 0 is the starting noise.
pub fn cmd_simulate(ctx: &Context) -> Result<Manifest> {
    let cfg = &ctx.config;
    let cases = scene_cases(cfg)?;
    let mut out = OutputDir::create(&ctx.out)?;
    let mut rows = Vec::new();
    let mut shape = [0; 4];
    // Bounded batches keep at most `workers` trajectories in memory.
    for batch in cases.chunks(ctx.workers) {
        let runs = ctx.par_map(batch, |_, case| case.trajectory(cfg))?;
        for (case, run) in batch.iter().zip(runs) {
            let dir = scene_dir(case.index);
            out.write_json(&format!("{dir}/scene.json"), &case.spec, true)?;
            out.write_latent(&format!("{dir}/clean.jlat"), &case.clean)?;
            out.write_latent(&format!("{dir}/{}", step_file(0)), run.x0())?;
            let mut prev = run.x0().clone();
            for k in 1..=run.steps() {
                let lat = run.latent(k)?;
                out.write_latent(&format!("{dir}/{}", step_file(k)), &lat)?;
                rows.push(TrajectoryRow {
                    scene: case.index,
                    step: k,
                    t: run.time(k),
                    mean_abs_change: mean_abs_change(&lat, &prev),
                });
                prev = lat;
            }
            let s = run.shape();
            shape = [s.channels, s.frames, s.height, s.width];
        }
    }
    out.write_csv("trajectory.csv", &rows)?;
    out.write_json(
        "summary.json",
        &SimulateSummary {
            experiment: &cfg.experiment,
            scenes: cases.len(),
            steps: cfg.steps,
            shape,
        },
        true,
    )?;
    out.finish(&cfg.experiment, "simulate")
}

/// Loads one scene's trajectory written by [`cmd_simulate`].
pub fn load_run(dir: &Path, steps: usize) -> Result<DenoisingRun> {
    let load = |k: usize| {
        let p = dir.join(step_file(k));
        if !p.exists() {
            return Err(CliError::config("--run", format!("missing trajectory file {}", p.display())));
        }
        Ok(load_latent(&p)?)
    };
    let x0 = load(0)?;
    let latents = (1..=steps).map(load).collect::<Result<Vec<_>>>()?;
    Ok(DenoisingRun::from_recorded(x0, latents)?)
}
