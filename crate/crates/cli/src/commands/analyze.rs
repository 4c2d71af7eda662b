//! Complexity maps against both ground truths, per scene and suite-wide.

use std::path::Path;

use jano_core::analyzer::{
    complexity_map, fft_ground_truth, ground_truth_maps, permutation_p_value, quantile_levels, rank_correlation,
    recognition_accuracy, EQUAL_THIRDS,
};
use jano_core::{AnalyzerConfig, BlockGrid, DenoisingRun};
use serde::Serialize;

use super::simulate::load_run;
use super::{median, scene_cases, scene_dir, Context};
use crate::error::Result;
use crate::output::{Manifest, OutputDir};

/// Shuffles used for every permutation p-value.
pub const PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct BlockRow {
    pub scene: usize,
    pub block: usize,
    pub frame0: usize,
    pub row0: usize,
    pub col0: usize,
    pub raw: f64,
    pub score: f64,
    pub fft_truth: f64,
    pub convergence_truth: f64,
    /// FFT ratio of the warm-up latent, the baseline predictor.
    pub baseline: f64,
    pub level: u8,
    pub fft_level: u8,
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneRow {
    pub scene: usize,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub pearson_fft: f64,
    pub spearman_fft: f64,
    pub pearson_convergence: f64,
    pub spearman_convergence: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CorrelationRow {
    /// `fft` or `convergence`.
    pub truth: &'static str,
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub p_value: f64,
    pub shuffles: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub experiment: String,
    pub warmup: usize,
    pub scenes: usize,
    pub median_accuracy: f64,
    pub median_baseline_accuracy: f64,
    /// Scenes where the analyzer is strictly more accurate than the baseline.
    pub scenes_beating_baseline: usize,
    pub correlations: Vec<CorrelationRow>,
}

#[derive(Debug, Clone)]
pub struct SceneAnalysis {
    pub blocks: Vec<BlockRow>,
    pub row: SceneRow,
}

pub fn analyze_scene(index: usize, run: &DenoisingRun, cfg: &AnalyzerConfig) -> Result<SceneAnalysis> {
    let grid = BlockGrid::new(run.shape().volume_dims(), cfg.block)?;
    let map = complexity_map(run, cfg)?;
    let truth = ground_truth_maps(run, &grid)?;
    let baseline = fft_ground_truth(&run.latent(cfg.warmup)?, &grid)?;
    let levels = quantile_levels(&map.normalized, EQUAL_THIRDS)?;
    let fft_levels = quantile_levels(&truth.fft, EQUAL_THIRDS)?;
    let c_fft = rank_correlation(&map.normalized, &truth.fft)?;
    let c_conv = rank_correlation(&map.normalized, &truth.convergence)?;
    let blocks = (0..grid.len())
        .map(|b| {
            let [(f0, _), (h0, _), (w0, _)] = grid.extent(b);
            BlockRow {
                scene: index,
                block: b,
                frame0: f0,
                row0: h0,
                col0: w0,
                raw: map.raw[b],
                score: map.normalized[b],
                fft_truth: truth.fft[b],
                convergence_truth: truth.convergence[b],
                baseline: baseline[b],
                level: levels[b],
                fft_level: fft_levels[b],
            }
        })
        .collect();
    Ok(SceneAnalysis {
        blocks,
        row: SceneRow {
            scene: index,
            accuracy: recognition_accuracy(&map.normalized, &truth.fft, EQUAL_THIRDS)?,
            baseline_accuracy: recognition_accuracy(&baseline, &truth.fft, EQUAL_THIRDS)?,
            pearson_fft: c_fft.pearson,
            spearman_fft: c_fft.spearman,
            pearson_convergence: c_conv.pearson,
            spearman_convergence: c_conv.spearman,
        },
    })
}

/// Pooled correlation of every block score with one ground truth.
pub fn suite_correlation(truth: &'static str, scores: &[f64], reference: &[f64], seed: u64) -> Result<CorrelationRow> {
    let c = rank_correlation(scores, reference)?;
    Ok(CorrelationRow {
        truth,
        n: scores.len(),
        pearson: c.pearson,
        spearman: c.spearman,
        p_value: permutation_p_value(scores, reference, PERMUTATIONS, seed)?,
        shuffles: PERMUTATIONS,
    })
}

/// Analyzes every configured scene. With `run_dir`, trajectories come from
/// a previous `simulate` output instead of being regenerated.
pub fn cmd_analyze(ctx: &Context, run_dir: Option<&Path>) -> Result<Manifest> {
    let cfg = &ctx.config;
    let acfg = cfg.analyzer_config();
    let cases = scene_cases(cfg)?;
    let results = ctx.par_map(&cases, |_, case| {
        let run = match run_dir {
            Some(d) => load_run(&d.join(scene_dir(case.index)), cfg.steps)?,
            None => case.trajectory(cfg)?,
        };
        analyze_scene(case.index, &run, &acfg)
    })?;

    let blocks: Vec<BlockRow> = results.iter().flat_map(|r| r.blocks.iter().cloned()).collect();
    let scenes: Vec<SceneRow> = results.iter().map(|r| r.row.clone()).collect();
    let scores: Vec<f64> = blocks.iter().map(|b| b.score).collect();
    let fft: Vec<f64> = blocks.iter().map(|b| b.fft_truth).collect();
    let conv: Vec<f64> = blocks.iter().map(|b| b.convergence_truth).collect();
    let correlations = vec![
        suite_correlation("fft", &scores, &fft, cfg.seed)?,
        suite_correlation("convergence", &scores, &conv, cfg.seed.wrapping_add(1))?,
    ];
    let acc: Vec<f64> = scenes.iter().map(|s| s.accuracy).collect();
    let base: Vec<f64> = scenes.iter().map(|s| s.baseline_accuracy).collect();
    let summary = AnalyzeSummary {
        experiment: cfg.experiment.clone(),
        warmup: acfg.warmup,
        scenes: scenes.len(),
        median_accuracy: median(&acc),
        median_baseline_accuracy: median(&base),
        scenes_beating_baseline: scenes.iter().filter(|s| s.accuracy > s.baseline_accuracy).count(),
        correlations: correlations.clone(),
    };

    let mut out = OutputDir::create(&ctx.out)?;
    out.write_csv("blocks.csv", &blocks)?;
    out.write_csv("scenes.csv", &scenes)?;
    out.write_csv("correlation.csv", &correlations)?;
    out.write_json("summary.json", &summary, true)?;
    out.finish(&cfg.experiment, "analyze")
}
