//! Velocity-difference profiles for pairs of straight paths.

use jano_core::flow::{latent_distance, oracle_velocity, velocity_constancy_profile, Component, PathPair};
use jano_core::MixtureTarget;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::Context;
use crate::config::ConstancySection;
use crate::error::Result;
use crate::output::{Manifest, OutputDir};

/// Constancy is judged on profile times up to this value.
pub const CONSTANCY_HORIZON: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Both paths end at the same point.
    PointMass,
    /// Both endpoints drawn from the same mixture component.
    SameComponent,
    /// Endpoints drawn from different components.
    CrossComponent,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub kind: PairKind,
    pub pair: usize,
    pub t: f64,
    /// `||vA - vB||` at time `t`.
    pub distance: f64,
    /// Distance minus the separation of the two noise samples.
    pub excess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstancySummary {
    pub experiment: String,
    pub pairs: usize,
    /// Largest `max - min` over any point-mass profile.
    pub point_mass_max_spread: f64,
    /// Largest `|excess|` over any point-mass profile point.
    pub point_mass_max_excess: f64,
    /// Largest std/mean over t <= 0.5 among same-component profiles.
    pub same_component_max_cv: f64,
    /// Share of trials whose cross-component distance at t = 0.5 exceeds
    /// the paired same-component distance.
    pub cross_exceeds_fraction: f64,
    /// Share of cross-component profiles passing [`grows_monotonically`]
    /// over t <= 0.5.
    pub cross_monotone_fraction: f64,
    /// Set when every cross-component profile grows monotonically.
    pub cross_monotone_growth: bool,
}

/// Two components at `+-separation / 2` along the first axis.
pub fn two_component_target(dim: usize, separation: f64, variance: f64) -> Result<MixtureTarget> {
    let mean = |sign: f64| {
        let mut m = vec![0.0; dim];
        m[0] = sign * separation / 2.0;
        m
    };
    Ok(MixtureTarget::new(vec![
        Component {
            weight: 0.5,
            mean: mean(1.0),
            variance,
        },
        Component {
            weight: 0.5,
            mean: mean(-1.0),
            variance,
        },
    ])?)
}

fn normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw(rng: &mut ChaCha8Rng, c: &Component) -> Vec<f64> {
    let sd = c.variance.sqrt();
    c.mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Population std over mean of the profile points with `t <= horizon`.
pub fn coefficient_of_variation(grid: &[f64], profile: &[f64], horizon: f64) -> f64 {
    let v: Vec<f64> = grid
        .iter()
        .zip(profile)
        .filter(|(t, _)| **t <= horizon + 1e-12)
        .map(|(_, d)| *d)
        .collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Relative slack allowed below the running maximum.
pub const MONOTONE_SLACK: f64 = 1e-3;

/// Growth test: ends above its start and never falls more than
/// [`MONOTONE_SLACK`] below its running maximum. Separated components are
/// identified within the first grid step, after which the profile is flat
/// up to small drifts, so strict monotonicity would be decided by noise.
pub fn grows_monotonically(profile: &[f64]) -> bool {
    let mut peak = f64::NEG_INFINITY;
    for &d in profile {
        if d < peak * (1.0 - MONOTONE_SLACK) {
            return false;
        }
        peak = peak.max(d);
    }
    matches!((profile.first(), profile.last()), (Some(a), Some(b)) if b > a)
}

#[derive(Debug, Clone)]
pub struct ConstancyResult {
    pub rows: Vec<ProfileRow>,
    pub summary: ConstancySummary,
}

/// Draws `pairs` pairs of each kind and profiles them on the time grid.
pub fn constancy_experiment(experiment: &str, c: &ConstancySection, seed: u64) -> Result<ConstancyResult> {
    let grid = c.time_grid();
    let mixture = two_component_target(c.dim, c.separation, c.variance)?;
    let [plus, minus] = [&mixture.components()[0], &mixture.components()[1]];
    let point = MixtureTarget::point_mass(plus.mean.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = grid
        .iter()
        .position(|t| (t - CONSTANCY_HORIZON).abs() < 1e-9)
        .unwrap_or(grid.len() - 1);

    let mut rows = Vec::new();
    let (mut pm_spread, mut pm_excess, mut max_cv) = (0.0f64, 0.0f64, 0.0f64);
    let (mut exceeds, mut monotone_count) = (0usize, 0usize);
    for pair in 0..c.pairs {
        let (x0a, x0b) = (normal(&mut rng, c.dim), normal(&mut rng, c.dim));
        let (same_a, same_b) = (draw(&mut rng, plus), draw(&mut rng, plus));
        let cross_b = draw(&mut rng, minus);
        let mut profiles = Vec::with_capacity(3);
        for (kind, target, x1a, x1b) in [
            (PairKind::PointMass, &point, &plus.mean, &plus.mean),
            (PairKind::SameComponent, &mixture, &same_a, &same_b),
            (PairKind::CrossComponent, &mixture, &same_a, &cross_b),
        ] {
            let a = PathPair { x0: &x0a, x1: x1a };
            let b = PathPair { x0: &x0b, x1: x1b };
            let profile = velocity_constancy_profile(target, a, b, &grid)?;
            for (&t, &d) in grid.iter().zip(&profile) {
                let xa = jano_core::flow::interpolate(&x0a, x1a, t)?;
                let xb = jano_core::flow::interpolate(&x0b, x1b, t)?;
                let excess = latent_distance(
                    &oracle_velocity(target, &xa, t)?,
                    &oracle_velocity(target, &xb, t)?,
                    &x0a,
                    &x0b,
                )?;
                if kind == PairKind::PointMass {
                    pm_excess = pm_excess.max(excess.abs());
                }
                rows.push(ProfileRow {
                    kind,
                    pair,
                    t,
                    distance: d,
                    excess,
                });
            }
            profiles.push(profile);
        }
        let (pm, same, cross) = (&profiles[0], &profiles[1], &profiles[2]);
        let (lo, hi) = pm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &d| (l.min(d), h.max(d)));
        pm_spread = pm_spread.max(hi - lo);
        max_cv = max_cv.max(coefficient_of_variation(&grid, same, CONSTANCY_HORIZON));
        if cross[half] > same[half] {
            exceeds += 1;
        }
        if grows_monotonically(&cross[..=half]) {
            monotone_count += 1;
        }
    }
    let n = c.pairs as f64;
    Ok(ConstancyResult {
        rows,
        summary: ConstancySummary {
            experiment: experiment.to_string(),
            pairs: c.pairs,
            point_mass_max_spread: pm_spread,
            point_mass_max_excess: pm_excess,
            same_component_max_cv: max_cv,
            cross_exceeds_fraction: exceeds as f64 / n,
            cross_monotone_fraction: monotone_count as f64 / n,
            cross_monotone_growth: monotone_count == c.pairs,
        },
    })
}

pub fn cmd_constancy(ctx: &Context) -> Result<Manifest> {
    let cfg = &ctx.config;
    let result = constancy_experiment(&cfg.experiment, &cfg.constancy, cfg.seed)?;
    let mut out = OutputDir::create(&ctx.out)?;
    out.write_csv("profiles.csv", &result.rows)?;
    out.write_json("summary.json", &result.summary, true)?;
    out.finish(&cfg.experiment, "constancy")
}
