//! The warm-up / interleaved / cool-down sampling loop.

use std::time::Instant;

use serde::Serialize;

use crate::analyzer::{complexity_from_latents, AnalyzerConfig, ComplexityMap};
use crate::error::{invalid, Error, Result};
use crate::latents::{BlockGrid, BlockSize, LatentTensor, TokenMatrix};
use crate::scheduler::{
    build_step_plan, classify_levels, optimize_thresholds, Level, LevelMap, Phase, ScheduleConfig, StepPlan,
};
use crate::synth::{step_time, SceneField};

use super::cache::{cache_memory_report, masked_forward, KVCacheStore, MemoryReport};
use super::model::ToyDiT;

/// Anything that predicts per-token velocities and can be run token-sparse.
pub trait VelocityModel {
    /// Called once per run, before the first step.
    fn begin(&mut self, num_tokens: usize) -> Result<()>;
    /// Declares which tokens are cached at which level from now on.
    fn assign_levels(&mut self, token_levels: &[Level]) -> Result<()>;
    fn full_velocity(&mut self, tokens: &TokenMatrix, t: f64) -> Result<TokenMatrix>;
    /// Velocities for `ids`; `active_tokens` holds those rows in order.
    fn active_velocity(&mut self, active_tokens: &TokenMatrix, ids: &[usize], t: f64) -> Result<TokenMatrix>;
    /// Notifies the model that tokens of `level` were recomputed on `step`.
    fn refreshed(&mut self, _level: Level, _step: usize) {}
    fn memory(&self) -> Option<MemoryReport> {
        None
    }
}

/// The toy transformer with its level-partitioned cache.
#[derive(Debug, Clone)]
pub struct CachedDiT {
    pub model: ToyDiT,
    pub cache: KVCacheStore,
}

impl CachedDiT {
    pub fn new(model: ToyDiT) -> Self {
        let cache = KVCacheStore::for_model(&model, 0);
        Self { model, cache }
    }
}

impl VelocityModel for CachedDiT {
    fn begin(&mut self, num_tokens: usize) -> Result<()> {
        self.cache = KVCacheStore::for_model(&self.model, num_tokens);
        Ok(())
    }

    fn assign_levels(&mut self, token_levels: &[Level]) -> Result<()> {
        self.cache.assign(token_levels)
    }

    fn full_velocity(&mut self, tokens: &TokenMatrix, t: f64) -> Result<TokenMatrix> {
        let ids: Vec<usize> = (0..tokens.rows).collect();
        masked_forward(&self.model, tokens, &ids, &mut self.cache, t)
    }

    fn active_velocity(&mut self, active_tokens: &TokenMatrix, ids: &[usize], t: f64) -> Result<TokenMatrix> {
        masked_forward(&self.model, active_tokens, ids, &mut self.cache, t)
    }

    fn refreshed(&mut self, level: Level, step: usize) {
        self.cache.mark_refresh(level, step);
    }

    fn memory(&self) -> Option<MemoryReport> {
        Some(cache_memory_report(&self.cache))
    }
}

/// Closed-form scene velocity; each token's velocity depends only on itself.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub field: SceneField,
}

impl VelocityModel for OracleField {
    fn begin(&mut self, num_tokens: usize) -> Result<()> {
        if num_tokens != self.field.shape.cells() {
            return Err(invalid("token count does not match the scene field"));
        }
        Ok(())
    }

    fn assign_levels(&mut self, _token_levels: &[Level]) -> Result<()> {
        Ok(())
    }

    fn full_velocity(&mut self, tokens: &TokenMatrix, t: f64) -> Result<TokenMatrix> {
        Ok(self.field.velocity(tokens, t))
    }

    fn active_velocity(&mut self, active_tokens: &TokenMatrix, ids: &[usize], t: f64) -> Result<TokenMatrix> {
        Ok(self.field.rows_velocity(ids, active_tokens, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingEntry {
    pub step: usize,
    /// `warmup`, `analysis`, `interleaved` or `cooldown`.
    pub phase: &'static str,
    /// 0 when the row is not attributed to a single level.
    pub level: u8,
    pub tokens: usize,
    pub millis: f64,
}

/// Wall time per step, phase and level. Step time is split across levels in
/// proportion to their computed tokens.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TimingLedger {
    pub entries: Vec<TimingEntry>,
}

impl TimingLedger {
    pub fn total_millis(&self) -> f64 {
        self.entries.iter().map(|e| e.millis).sum()
    }

    pub fn phase_millis(&self, phase: &str) -> f64 {
        self.entries.iter().filter(|e| e.phase == phase).map(|e| e.millis).sum()
    }

    pub fn steps_covered(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.iter().map(|e| e.step).collect();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub tokens: TokenMatrix,
    pub velocity: TokenMatrix,
    pub has_velocity: Vec<bool>,
    pub step: usize,
    pub ledger: TimingLedger,
    pub cache_bytes: u64,
    pub token_steps: u64,
}

impl PipelineState {
    pub fn new(tokens: TokenMatrix) -> Self {
        let velocity = TokenMatrix::zeros(tokens.rows, tokens.cols);
        let has_velocity = vec![false; tokens.rows];
        Self {
            tokens,
            velocity,
            has_velocity,
            step: 0,
            ledger: TimingLedger::default(),
            cache_bytes: 0,
            token_steps: 0,
        }
    }

    /// Applies fresh velocities to the listed tokens and remembers them.
    pub fn advance_active(&mut self, ids: &[usize], v: &TokenMatrix, dt: f32) {
        for (r, &id) in ids.iter().enumerate() {
            let src = v.row(r);
            self.velocity.row_mut(id).copy_from_slice(src);
            for (x, vv) in self.tokens.row_mut(id).iter_mut().zip(src) {
                *x += dt * vv;
            }
            self.has_velocity[id] = true;
        }
    }
}

/// Moves frozen tokens along their most recent velocity: `x += dt * v`.
pub fn advance_frozen(state: &mut PipelineState, frozen_ids: &[usize], dt: f32) -> Result<()> {
    if let Some(&id) = frozen_ids.iter().find(|&&id| !state.has_velocity.get(id).copied().unwrap_or(false)) {
        return Err(Error::InvalidState(format!("frozen token {id} has no computed velocity")));
    }
    for &id in frozen_ids {
        let (x, v) = (id * state.tokens.cols, id * state.tokens.cols + state.tokens.cols);
        for j in x..v {
            state.tokens.data[j] += dt * state.velocity.data[j];
        }
    }
    Ok(())
}

/// Where the step plan comes from.
#[derive(Debug, Clone)]
pub enum PlanSource {
    /// A precomputed plan and the levels that decide cache placement.
    Fixed { plan: StepPlan, levels: LevelMap },
    /// Analyze the warm-up latents, then assign levels per `selection`.
    Analyze {
        analyzer: AnalyzerConfig,
        schedule: ScheduleConfig,
        selection: LevelSelection,
    },
}

/// How an analyzed complexity map becomes levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelSelection {
    /// The schedule's own thresholds.
    Thresholds,
    /// Thresholds fitted to a token-step budget (fraction of the full run).
    Budget(f64),
    /// The given number of lowest-scoring blocks become static and the
    /// rest active; ties go to the lower block id.
    FreezeLowest(usize),
}

/// Static for the `count` lowest scores, active otherwise.
pub fn freeze_lowest(scores: &[f64], count: usize) -> LevelMap {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut levels = vec![Level::Active; scores.len()];
    for &b in order.iter().take(count) {
        levels[b] = Level::Static;
    }
    LevelMap { levels }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub steps: usize,
    pub block: BlockSize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub latent: LatentTensor,
    pub state: PipelineState,
    pub plan: StepPlan,
    pub levels: LevelMap,
    pub map: Option<ComplexityMap>,
    pub memory: Option<MemoryReport>,
    /// Wall time of the whole loop, for checking the ledger against.
    pub wall_millis: f64,
}

fn block_token_levels(levels: &LevelMap, grid: &BlockGrid) -> Vec<Level> {
    let mut out = vec![Level::Active; grid.num_tokens()];
    for (b, toks) in grid.token_index_map().into_iter().enumerate() {
        for t in toks {
            out[t] = levels.levels[b];
        }
    }
    out
}

fn warmup_len(plan: &StepPlan) -> usize {
    plan.steps.iter().take_while(|s| s.phase == Phase::Warmup).count()
}

/// Samples from `x0` with the three-phase schedule.
///
/// Step `k` evaluates the model at `t = min((k - 1) / T, 1 - eps)` and moves
/// every token by `dt = 1 / T`: computed tokens with their new velocity,
/// frozen tokens with their last one.
pub fn run_pipeline(
    model: &mut dyn VelocityModel,
    x0: &LatentTensor,
    source: PlanSource,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let shape = x0.shape();
    let grid = BlockGrid::new(shape.volume_dims(), cfg.block)?;
    let n = grid.num_tokens();
    let steps = cfg.steps;
    let (mut plan, mut levels, warmup) = match &source {
        PlanSource::Fixed { plan, levels } => {
            if plan.len() != steps || plan.num_blocks != grid.len() || levels.len() != grid.len() {
                return Err(invalid(format!(
                    "plan ({} steps, {} blocks) does not match the run ({} steps, {} blocks)",
                    plan.len(),
                    plan.num_blocks,
                    steps,
                    grid.len()
                )));
            }
            (Some(plan.clone()), Some(levels.clone()), warmup_len(plan))
        }
        PlanSource::Analyze { analyzer, schedule, .. } => {
            schedule.validate()?;
            analyzer.validate()?;
            if schedule.steps != steps {
                return Err(invalid("schedule step count differs from the run"));
            }
            if analyzer.warmup > schedule.warmup {
                return Err(invalid(format!(
                    "analyzer needs {} warm-up steps but the schedule has {}",
                    analyzer.warmup, schedule.warmup
                )));
            }
            if analyzer.block != cfg.block {
                return Err(invalid("analyzer and pipeline block sizes differ"));
            }
            (None, None, schedule.warmup)
        }
    };

    model.begin(n)?;
    let dt = 1.0 / steps as f32;
    let mut state = PipelineState::new(x0.to_tokens());
    let mut recorded: Vec<LatentTensor> = Vec::new();
    let mut map = None;
    let all_ids: Vec<usize> = (0..n).collect();
    let loop_start = Instant::now();
    let mut token_level = vec![Level::Active; n];

    for k in 1..=steps {
        let t = step_time(k - 1, steps);
        let by_level = plan.is_some() && k > warmup;
        let start = Instant::now();
        // Everything allocated for the step is dropped inside this block, so
        // the step's ledger time includes freeing it.
        let (phase, counts) = {
            let (phase, active_ids) = match &plan {
                Some(p) if k > warmup => {
                    let s = p.step(k);
                    let ids = if s.active_blocks.len() == grid.len() { all_ids.clone() } else { p.active_tokens(k, &grid) };
                    (s.phase, ids)
                }
                _ => (Phase::Warmup, all_ids.clone()),
            };
            let v = if active_ids.len() == n {
                model.full_velocity(&state.tokens, t)?
            } else {
                model.active_velocity(&state.tokens.gather(&active_ids), &active_ids, t)?
            };
            if !v.all_finite() {
                return Err(Error::Numeric { step: k, detail: "non-finite velocity".into() });
            }
            state.advance_active(&active_ids, &v, dt);
            if active_ids.len() < n {
                let mut on = vec![false; n];
                for &i in &active_ids {
                    on[i] = true;
                }
                let frozen: Vec<usize> = (0..n).filter(|&i| !on[i]).collect();
                advance_frozen(&mut state, &frozen, dt)?;
            }
            state.token_steps += active_ids.len() as u64;
            let mut counts = [0usize; 3];
            for &i in &active_ids {
                counts[token_level[i].as_u8() as usize - 1] += 1;
            }
            if by_level {
                for level in [Level::Static, Level::Moderate] {
                    let members = token_level.iter().filter(|&&l| l == level).count();
                    if members > 0 && counts[level.as_u8() as usize - 1] == members {
                        model.refreshed(level, k);
                    }
                }
            }
            if plan.is_none() {
                recorded.push(LatentTensor::from_tokens(shape, &state.tokens)?);
            }
            (phase, counts)
        };
        let millis = start.elapsed().as_secs_f64() * 1e3;
        record_step(&mut state.ledger, k, phase, counts, by_level, millis);
        state.step = k;

        if k == warmup {
            let start = Instant::now();
            if let PlanSource::Analyze { analyzer, schedule, selection } = &source {
                let m = complexity_from_latents(&recorded, analyzer)?;
                let (lv, sched) = match *selection {
                    LevelSelection::Thresholds => (classify_levels(&m, schedule)?, *schedule),
                    LevelSelection::Budget(b) => {
                        let c = optimize_thresholds(&m, b, schedule)?;
                        let sched = schedule.with_thresholds(c.static_threshold, c.moderate_threshold);
                        (classify_levels(&m, &sched)?, sched)
                    }
                    LevelSelection::FreezeLowest(n) => {
                        if n > m.len() {
                            return Err(invalid(format!("cannot freeze {n} of {} blocks", m.len())));
                        }
                        (freeze_lowest(&m.normalized, n), *schedule)
                    }
                };
                plan = Some(build_step_plan(&lv, &sched)?);
                levels = Some(lv);
                map = Some(m);
                recorded.clear();
            }
            let lv = levels.as_ref().expect("levels known after warm-up");
            token_level = block_token_levels(lv, &grid);
            model.assign_levels(&token_level)?;
            state.ledger.entries.push(TimingEntry {
                step: k,
                phase: "analysis",
                level: 0,
                tokens: 0,
                millis: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let wall_millis = loop_start.elapsed().as_secs_f64() * 1e3;
    let memory = model.memory();
    state.cache_bytes = memory.as_ref().map_or(0, |m| m.total_bytes);
    let plan = match plan {
        Some(p) => p,
        // Warm-up covered the whole run.
        None => StepPlan::all_active(grid.len(), steps),
    };
    let levels = levels.unwrap_or_else(|| LevelMap::uniform(grid.len(), Level::Active));
    Ok(PipelineOutput {
        latent: LatentTensor::from_tokens(shape, &state.tokens)?,
        state,
        plan,
        levels,
        map,
        memory,
        wall_millis,
    })
}

fn record_step(ledger: &mut TimingLedger, step: usize, phase: Phase, counts: [usize; 3], by_level: bool, millis: f64) {
    let tokens: usize = counts.iter().sum();
    if !by_level {
        ledger.entries.push(TimingEntry { step, phase: phase.name(), level: 0, tokens, millis });
        return;
    }
    let total = tokens.max(1) as f64;
    for (li, &c) in counts.iter().enumerate() {
        if c > 0 {
            ledger.entries.push(TimingEntry {
                step,
                phase: phase.name(),
                level: li as u8 + 1,
                tokens: c,
                millis: millis * c as f64 / total,
            });
        }
    }
}

/// Plain dense Euler loop with the same time grid as [`run_pipeline`].
pub fn integrate_full<F>(mut velocity: F, x0: &LatentTensor, steps: usize) -> Result<LatentTensor>
where
    F: FnMut(&TokenMatrix, f64) -> Result<TokenMatrix>,
{
    if steps == 0 {
        return Err(invalid("need at least one step"));
    }
    let dt = 1.0 / steps as f32;
    let mut x = x0.to_tokens();
    for k in 1..=steps {
        let v = velocity(&x, step_time(k - 1, steps))?;
        if !v.all_finite() {
            return Err(Error::Numeric { step: k, detail: "non-finite velocity".into() });
        }
        for (xi, vi) in x.data.iter_mut().zip(&v.data) {
            *xi += dt * vi;
        }
    }
    LatentTensor::from_tokens(x0.shape(), &x)
}

/// `||a - b|| / ||b||` over all elements.
pub fn relative_l2(a: &LatentTensor, b: &LatentTensor) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        num += f64::from(x - y).powi(2);
        den += f64::from(*y).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
