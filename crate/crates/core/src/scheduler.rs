//! Convergence levels, threshold search under a compute budget, and the
//! three-phase step plan.

use serde::{Deserialize, Serialize};

use crate::analyzer::ComplexityMap;
use crate::error::{invalid, Error, Result};
use crate::latents::BlockGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Static = 1,
    Moderate = 2,
    Active = 3,
}

impl Level {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    pub levels: Vec<Level>,
}

impl LevelMap {
    pub fn uniform(n: usize, level: Level) -> Self {
        Self { levels: vec![level; n] }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Block counts for levels 1, 2 and 3.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for l in &self.levels {
            c[l.as_u8() as usize - 1] += 1;
        }
        c
    }
}

/// Default terminal all-active band: `max(2, ceil(0.04 * steps))`.
pub fn default_cooldown(steps: usize) -> usize {
    ((steps as f64 * 0.04).ceil() as usize).max(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub warmup: usize,
    pub cooldown: usize,
    pub static_threshold: f64,
    pub static_interval: usize,
    pub moderate_threshold: f64,
    pub moderate_interval: usize,
}

impl ScheduleConfig {
    /// Settings tuned for a 1.3B-parameter video model.
    pub fn wan_1_3b(steps: usize) -> Self {
        Self {
            steps,
            warmup: 6,
            cooldown: default_cooldown(steps),
            static_threshold: 0.4,
            static_interval: 6,
            moderate_threshold: 0.6,
            moderate_interval: 4,
        }
    }

    /// Settings tuned for an image model.
    pub fn flux(steps: usize) -> Self {
        Self {
            steps,
            warmup: 7,
            cooldown: default_cooldown(steps),
            static_threshold: 0.1,
            static_interval: 8,
            moderate_threshold: 0.5,
            moderate_interval: 5,
        }
    }

    pub fn with_thresholds(self, static_threshold: f64, moderate_threshold: f64) -> Self {
        Self {
            static_threshold,
            moderate_threshold,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_thresholds(self.static_threshold, self.moderate_threshold)?;
        if self.static_interval == 0 || self.moderate_interval == 0 {
            return Err(invalid("update intervals must be at least 1"));
        }
        if self.warmup + self.cooldown >= self.steps {
            return Err(invalid(format!(
                "warm-up ({}) plus cool-down ({}) must be shorter than {} steps",
                self.warmup, self.cooldown, self.steps
            )));
        }
        Ok(())
    }

    /// Number of times a level is computed in the interleaved phase.
    pub fn interleaved_updates(&self, level: Level) -> usize {
        let n = self.steps - self.warmup - self.cooldown;
        match level {
            Level::Active => n,
            Level::Moderate => n.div_ceil(self.moderate_interval),
            Level::Static => n.div_ceil(self.static_interval),
        }
    }

    /// Steps on which a block of `level` is computed, over the whole run.
    pub fn active_steps(&self, level: Level) -> usize {
        self.warmup + self.cooldown + self.interleaved_updates(level)
    }
}

fn check_thresholds(s: f64, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&m) || s > m {
        return Err(invalid(format!(
            "thresholds must satisfy 0 <= static ({s}) <= moderate ({m}) <= 1"
        )));
    }
    Ok(())
}

/// Level rule on raw normalized scores; ties go to the lower level.
pub fn classify_scores(scores: &[f64], static_threshold: f64, moderate_threshold: f64) -> Result<LevelMap> {
    check_thresholds(static_threshold, moderate_threshold)?;
    Ok(LevelMap {
        levels: scores
            .iter()
            .map(|&s| {
                if s <= static_threshold {
                    Level::Static
                } else if s <= moderate_threshold {
                    Level::Moderate
                } else {
                    Level::Active
                }
            })
            .collect(),
    })
}

pub fn classify_levels(map: &ComplexityMap, cfg: &ScheduleConfig) -> Result<LevelMap> {
    classify_scores(&map.normalized, cfg.static_threshold, cfg.moderate_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Interleaved,
    Cooldown,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Interleaved => "interleaved",
            Phase::Cooldown => "cooldown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedStep {
    pub phase: Phase,
    /// Ascending block ids computed on this step.
    pub active_blocks: Vec<usize>,
}

/// Per-step active block sets for steps `1..=T` (stored at index `k - 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub num_blocks: usize,
    pub steps: Vec<PlannedStep>,
}

impl StepPlan {
    pub fn all_active(num_blocks: usize, steps: usize) -> Self {
        Self {
            num_blocks,
            steps: (0..steps)
                .map(|_| PlannedStep {
                    phase: Phase::Warmup,
                    active_blocks: (0..num_blocks).collect(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step `k`, 1-based.
    pub fn step(&self, k: usize) -> &PlannedStep {
        &self.steps[k - 1]
    }

    pub fn is_full(&self, k: usize) -> bool {
        self.step(k).active_blocks.len() == self.num_blocks
    }

    /// Sorted token ids of the blocks active on step `k`.
    pub fn active_tokens(&self, k: usize, grid: &BlockGrid) -> Vec<usize> {
        let mut out: Vec<usize> = self.step(k).active_blocks.iter().flat_map(|&b| grid.tokens(b)).collect();
        out.sort_unstable();
        out
    }
}

/// Compiles the warm-up / interleaved / cool-down plan.
pub fn build_step_plan(levels: &LevelMap, cfg: &ScheduleConfig) -> Result<StepPlan> {
    cfg.validate()?;
    let t = cfg.steps;
    let n = levels.len();
    let steps = (1..=t)
        .map(|k| {
            if k <= cfg.warmup {
                return PlannedStep { phase: Phase::Warmup, active_blocks: (0..n).collect() };
            }
            if k > t - cfg.cooldown {
                return PlannedStep { phase: Phase::Cooldown, active_blocks: (0..n).collect() };
            }
            let offset = k - cfg.warmup - 1;
            let on_static = offset % cfg.static_interval == 0;
            let on_moderate = offset % cfg.moderate_interval == 0;
            let active_blocks = levels
                .levels
                .iter()
                .enumerate()
                .filter(|(_, l)| match l {
                    Level::Active => true,
                    Level::Moderate => on_moderate,
                    Level::Static => on_static,
                })
                .map(|(b, _)| b)
                .collect();
            PlannedStep { phase: Phase::Interleaved, active_blocks }
        })
        .collect();
    Ok(StepPlan { num_blocks: n, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    /// Sum over steps of the number of computed tokens.
    pub token_steps: u64,
    /// Query-key pairs per layer: active queries times full key length.
    pub attention_pairs_per_layer: u64,
    /// `token_steps / (steps * tokens)`.
    pub fraction: f64,
}

pub fn estimate_cost(plan: &StepPlan, grid: &BlockGrid) -> Result<CostEstimate> {
    if plan.num_blocks != grid.len() {
        return Err(invalid(format!(
            "plan covers {} blocks, grid has {}",
            plan.num_blocks,
            grid.len()
        )));
    }
    let sizes = grid.token_counts();
    let total = grid.num_tokens() as u64;
    let mut token_steps = 0u64;
    for step in &plan.steps {
        token_steps += step.active_blocks.iter().map(|&b| sizes[b] as u64).sum::<u64>();
    }
    let full = plan.len() as u64 * total;
    Ok(CostEstimate {
        token_steps,
        attention_pairs_per_layer: token_steps * total,
        fraction: if full == 0 { 0.0 } else { token_steps as f64 / full as f64 },
    })
}

/// Closed-form cost fraction of a level assignment, without building a plan.
pub fn level_cost_fraction(levels: &LevelMap, grid: &BlockGrid, cfg: &ScheduleConfig) -> f64 {
    let sizes = grid.token_counts();
    let steps: u64 = levels
        .levels
        .iter()
        .zip(&sizes)
        .map(|(l, &n)| (cfg.active_steps(*l) * n) as u64)
        .sum();
    steps as f64 / (cfg.steps * grid.num_tokens()) as f64
}

/// Candidate thresholds: zero plus the nearest-rank quantiles of `scores`
/// at 0.05, 0.10, ..., 1.0, deduplicated and ascending.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = vec![0.0];
    if n > 0 {
        for i in 1..=20 {
            let q = i as f64 * 0.05;
            let idx = ((n as f64 * q - 1e-9).ceil() as usize).clamp(1, n) - 1;
            out.push(sorted[idx].clamp(0.0, 1.0));
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub static_threshold: f64,
    pub moderate_threshold: f64,
    pub cost: f64,
    pub counts: [usize; 3],
}

/// True when `a` is preferred over `b`: more active blocks, then more
/// moderate blocks, then a lower static threshold, then a lower moderate one.
pub fn prefer(a: &ThresholdChoice, b: &ThresholdChoice) -> bool {
    (b.counts[2], b.counts[1], a.static_threshold, a.moderate_threshold)
        .partial_cmp(&(a.counts[2], a.counts[1], b.static_threshold, b.moderate_threshold))
        == Some(std::cmp::Ordering::Less)
}

/// Picks the threshold pair from the quantile grid that keeps the most
/// blocks active while the plan's token-step fraction stays within `budget`.
pub fn optimize_thresholds(map: &ComplexityMap, budget: f64, cfg: &ScheduleConfig) -> Result<ThresholdChoice> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(invalid(format!("budget {budget} must lie in (0, 1]")));
    }
    cfg.validate()?;
    let cands = threshold_candidates(&map.normalized);
    let mut best: Option<ThresholdChoice> = None;
    let mut min_cost = f64::INFINITY;
    for (i, &s) in cands.iter().enumerate() {
        for &m in &cands[i..] {
            let levels = classify_scores(&map.normalized, s, m)?;
            let plan = build_step_plan(&levels, cfg)?;
            let cost = estimate_cost(&plan, &map.grid)?.fraction;
            min_cost = min_cost.min(cost);
            if cost > budget + 1e-12 {
                continue;
            }
            let cand = ThresholdChoice {
                static_threshold: s,
                moderate_threshold: m,
                cost,
                counts: levels.counts(),
            };
            if best.as_ref().is_none_or(|b| prefer(&cand, b)) {
                best = Some(cand);
            }
        }
    }
    best.ok_or(Error::BudgetInfeasible { budget, min_cost })
}
