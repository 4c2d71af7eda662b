//! Run configuration, read from TOML and validated before any work starts.

use std::path::{Path, PathBuf};

use jano_core::analyzer::default_warmup;
use jano_core::synth::{standard_suite, static_heavy_suite};
use jano_core::{AnalyzerConfig, BlockSize, ModelConfig, ScheduleConfig, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Identifier copied into every report.
    pub experiment: String,
    /// Denoising steps `T`.
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scenes: Option<ScenesConfig>,
    #[serde(default)]
    pub trajectory: TrajectoryKind,
    #[serde(default)]
    pub analyzer: AnalyzerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub constancy: ConstancySection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Standard,
    StaticHeavy,
}

/// Either a built-in suite or an explicit list of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenesConfig {
    #[serde(default)]
    pub suite: Option<SuiteKind>,
    #[serde(default)]
    pub count: Option<usize>,
    /// Seed for suite generation; defaults to the run seed.
    #[serde(default)]
    pub suite_seed: Option<u64>,
    #[serde(default)]
    pub custom: Vec<SceneSpec>,
}

/// How warm-up and reference trajectories are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Euler integration of the closed-form scene velocity.
    #[default]
    Rollout,
    /// Straight-line interpolation between noise and the clean scene.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzerSection {
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default = "default_omega_t")]
    pub omega_t: f64,
    #[serde(default = "default_omega_s")]
    pub omega_s: f64,
    #[serde(default = "default_block")]
    pub block: BlockSize,
}

fn default_omega_t() -> f64 {
    0.7
}

fn default_omega_s() -> f64 {
    0.3
}

fn default_block() -> BlockSize {
    BlockSize::new(2, 8, 8)
}

impl Default for AnalyzerSection {
    fn default() -> Self {
        Self {
            warmup: None,
            omega_t: default_omega_t(),
            omega_s: default_omega_s(),
            block: default_block(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    #[serde(rename = "wan_1_3b")]
    Wan13b,
    Flux,
    /// Every block computed at every step.
    AllActive,
}

/// A preset plus optional per-field overrides.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub preset: Preset,
    pub warmup: Option<usize>,
    pub cooldown: Option<usize>,
    pub static_threshold: Option<f64>,
    pub static_interval: Option<usize>,
    pub moderate_threshold: Option<f64>,
    pub moderate_interval: Option<usize>,
    /// Token-step budget as a fraction of the full run; when set, the
    /// thresholds are fitted to it instead of taken from the preset.
    pub budget: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Closed-form scene velocity; cheap and exact.
    #[default]
    Oracle,
    /// The toy transformer with the level-partitioned KV cache.
    Dit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Weight seed; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_layers() -> usize {
    2
}

fn default_d_model() -> usize {
    64
}

fn default_heads() -> usize {
    4
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Oracle,
            layers: default_layers(),
            d_model: default_d_model(),
            heads: default_heads(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Fractions of blocks frozen by the random arm.
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
}

fn default_ratios() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75]
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { ratios: default_ratios() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstancySection {
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Pairs drawn per pair kind.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Distance between the two mixture means.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Per-coordinate variance of each component.
    #[serde(default = "default_variance")]
    pub variance: f64,
    /// Profile times; defaults to 0, 0.05, ..., 0.9.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
}

fn default_dim() -> usize {
    8
}

fn default_pairs() -> usize {
    200
}

fn default_separation() -> f64 {
    200.0
}

fn default_variance() -> f64 {
    1e-4
}

impl Default for ConstancySection {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            pairs: default_pairs(),
            separation: default_separation(),
            variance: default_variance(),
            times: None,
        }
    }
}

impl ConstancySection {
    pub fn time_grid(&self) -> Vec<f64> {
        self.times
            .clone()
            .unwrap_or_else(|| (0..=18).map(|i| i as f64 * 0.05).collect())
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<document>", e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().message())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experiment.trim().is_empty() {
            return Err(CliError::config("experiment", "must not be empty"));
        }
        if self.steps < 2 {
            return Err(CliError::config("steps", "need at least 2 denoising steps"));
        }
        if let Some(s) = &self.scenes {
            match (s.suite, s.custom.is_empty()) {
                (Some(_), false) => {
                    return Err(CliError::config("scenes", "give either `suite` or `custom`, not both"));
                }
                (None, true) => return Err(CliError::config("scenes", "needs `suite` or `custom` scenes")),
                (None, false) if s.count.is_some() || s.suite_seed.is_some() => {
                    return Err(CliError::config("scenes", "`count` and `suite_seed` only apply to suites"));
                }
                _ => {}
            }
            if s.count == Some(0) {
                return Err(CliError::config("scenes.count", "must be positive"));
            }
            for (i, spec) in s.custom.iter().enumerate() {
                spec.ownership()
                    .map_err(|e| CliError::config(format!("scenes.custom[{i}]"), e.to_string()))?;
            }
        }
        self.analyzer_config()
            .validate()
            .map_err(|e| CliError::config("analyzer", e.to_string()))?;
        let sched = self.schedule_config();
        sched.validate().map_err(|e| CliError::config("schedule", e.to_string()))?;
        if self.analyzer_config().warmup > sched.warmup && self.schedule.preset != Preset::AllActive {
            return Err(CliError::config(
                "analyzer.warmup",
                format!("exceeds the schedule warm-up of {} steps", sched.warmup),
            ));
        }
        if let Some(b) = self.schedule.budget {
            if !(b > 0.0 && b <= 1.0) {
                return Err(CliError::config("schedule.budget", "must lie in (0, 1]"));
            }
        }
        self.model_config()
            .validate()
            .map_err(|e| CliError::config("model", e.to_string()))?;
        for (i, &r) in self.ablate.ratios.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(CliError::config(format!("ablate.ratios[{i}]"), "must lie in [0, 1]"));
            }
        }
        let c = &self.constancy;
        if c.dim == 0 || c.pairs == 0 {
            return Err(CliError::config("constancy", "`dim` and `pairs` must be positive"));
        }
        if !(c.separation > 0.0) || !(c.variance > 0.0) {
            return Err(CliError::config("constancy", "`separation` and `variance` must be positive"));
        }
        if c.time_grid().iter().any(|t| !(0.0..=0.9).contains(t)) {
            return Err(CliError::config("constancy.times", "times must lie in [0, 0.9]"));
        }
        Ok(())
    }

    pub fn analyzer_config(&self) -> AnalyzerConfig {
        let a = &self.analyzer;
        AnalyzerConfig {
            warmup: a.warmup.unwrap_or_else(|| default_warmup(self.steps).max(2)),
            omega_t: a.omega_t,
            omega_s: a.omega_s,
            block: a.block,
        }
    }

    /// The preset for `steps`, with every override applied.
    pub fn schedule_config(&self) -> ScheduleConfig {
        let s = &self.schedule;
        let base = match s.preset {
            Preset::Wan13b | Preset::AllActive => ScheduleConfig::wan_1_3b(self.steps),
            Preset::Flux => ScheduleConfig::flux(self.steps),
        };
        ScheduleConfig {
            steps: self.steps,
            warmup: s.warmup.unwrap_or(base.warmup),
            cooldown: s.cooldown.unwrap_or(base.cooldown),
            static_threshold: s.static_threshold.unwrap_or(base.static_threshold),
            static_interval: s.static_interval.unwrap_or(base.static_interval),
            moderate_threshold: s.moderate_threshold.unwrap_or(base.moderate_threshold),
            moderate_interval: s.moderate_interval.unwrap_or(base.moderate_interval),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::new(m.layers, m.d_model, m.heads, m.seed.unwrap_or(self.seed))
    }

    /// The scenes to run, or a config error naming `scenes` when absent.
    pub fn scene_specs(&self) -> Result<Vec<SceneSpec>> {
        let s = self
            .scenes
            .as_ref()
            .ok_or_else(|| CliError::config("scenes", "missing field `scenes`, required by this command"))?;
        Ok(match s.suite {
            Some(kind) => {
                let count = s.count.unwrap_or(20);
                let seed = s.suite_seed.unwrap_or(self.seed);
                match kind {
                    SuiteKind::Standard => standard_suite(count, seed),
                    SuiteKind::StaticHeavy => static_heavy_suite(count, seed),
                }
            }
            None => s.custom.clone(),
        })
    }

    /// Noise seed for scene `i`.
    pub fn scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }
}
