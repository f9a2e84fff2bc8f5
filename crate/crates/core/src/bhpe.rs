//! Blind Hamiltonian parameter estimation with two time-interval grids.
//!
//! One tomography pass fixes `Jxy·τ/ħ` only up to a multiple of π and
//! `Jz·τ/ħ` up to a multiple of 2π, which leaves a regular grid of candidate
//! values inside the prior range. Repeating the pass at a second interval
//! whose ratio to the first is `(n + 1/2)/n` (n being the number of grid
//! steps spanned) makes the two grids coincide only at the true value; the
//! estimate is the mean of the closest pair of candidates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bqpt::{part_one, part_two, Budget, ProtocolEnsembles};
use crate::error::{Error, Result};
use crate::flags::Flags;
use crate::heisenberg::KnownPhysics;
use crate::source::MeasurementSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// `Ĵ(k) = (ħ/τ)(−base + kπ)`
    XY,
    /// `Ĵ(k) = (ħ/τ)(base + 2kπ + extra)`
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub tau: f64,
    pub k_min: i64,
    pub k_max: i64,
    pub base_angle: f64,
    pub kind: GridKind,
    pub hbar: f64,
}

impl GridSpec {
    pub fn new(
        tau: f64,
        k_min: i64,
        k_max: i64,
        base_angle: f64,
        kind: GridKind,
        hbar: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!(
                "grid interval must be positive, got {tau}"
            )));
        }
        if k_min > k_max {
            return Err(Error::Domain(format!(
                "empty index range {k_min}..={k_max}"
            )));
        }
        Ok(GridSpec {
            tau,
            k_min,
            k_max,
            base_angle,
            kind,
            hbar,
        })
    }

    /// Spacing between consecutive candidates, joules.
    pub fn step(&self) -> f64 {
        grid_step(self.kind, self.tau, self.hbar)
    }
}

pub fn grid_step(kind: GridKind, tau: f64, hbar: f64) -> f64 {
    match kind {
        GridKind::XY => hbar * PI / tau,
        GridKind::Z => 2.0 * hbar * PI / tau,
    }
}

/// `τ_b = τ_a·(k_max − k_min + 1/2)/(k_max − k_min)`.
pub fn companion_interval(tau_a: f64, k_min: i64, k_max: i64) -> Result<f64> {
    if k_max == k_min {
        return Err(Error::DivisionByZero("k_max = k_min in interval ratio"));
    }
    let n = (k_max - k_min) as f64;
    Ok(tau_a * (n + 0.5) / n)
}

/// Tightest XY indices whose candidates can land in `[lo, hi]` (joules) for
/// some base angle in [−π/2, π/2].
pub fn xy_k_bounds(tau: f64, lo: f64, hi: f64, hbar: f64) -> Result<(i64, i64)> {
    let scale = tau / (hbar * PI);
    let k_min = (lo * scale - 0.5).ceil() as i64;
    let k_max = (hi * scale + 0.5).floor() as i64;
    if k_min > k_max {
        return Err(Error::EmptyRange { lo, hi });
    }
    Ok((k_min, k_max))
}

/// Tightest Z indices for `[lo, hi]` given `extra = (Ĵxy + GB)τ/ħ` and a base
/// angle in (−π, π].
pub fn z_k_bounds(tau: f64, lo: f64, hi: f64, extra_phase: f64, hbar: f64) -> Result<(i64, i64)> {
    let s = tau / hbar;
    let k_min = ((lo * s - extra_phase - PI) / (2.0 * PI)).ceil() as i64;
    let k_max = ((hi * s - extra_phase + PI) / (2.0 * PI)).floor() as i64;
    if k_min > k_max {
        return Err(Error::EmptyRange { lo, hi });
    }
    Ok((k_min, k_max))
}

pub fn grid_candidates(g: &GridSpec, extra_phase: f64) -> Vec<f64> {
    let f = g.hbar / g.tau;
    (g.k_min..=g.k_max)
        .map(|k| match g.kind {
            GridKind::XY => f * (-g.base_angle + k as f64 * PI),
            GridKind::Z => f * (g.base_angle + 2.0 * k as f64 * PI + extra_phase),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPair {
    pub value: f64,
    pub gap: f64,
    pub first: f64,
    pub second: f64,
}

/// Mean of the in-range pair (one candidate from each grid) with the smallest
/// difference. Equal gaps go to the lower mean.
pub fn closest_pair_estimate(
    grid1: &[f64],
    grid2: &[f64],
    lo: f64,
    hi: f64,
) -> Result<ClosestPair> {
    let inside = |x: &&f64| (lo..=hi).contains(*x);
    let mut best: Option<ClosestPair> = None;
    for &a in grid1.iter().filter(inside) {
        for &b in grid2.iter().filter(inside) {
            let gap = (a - b).abs();
            let value = 0.5 * (a + b);
            let better = match best {
                None => true,
                Some(p) => gap < p.gap || (gap == p.gap && value < p.value),
            };
            if better {
                best = Some(ClosestPair {
                    value,
                    gap,
                    first: a,
                    second: b,
                });
            }
        }
    }
    best.ok_or(Error::EmptyRange { lo, hi })
}

/// Half the smallest nonzero distance between wrong candidate pairs of two
/// grids built with [`companion_interval`]: `step₁/(2(2n + 1))`.
pub fn suspicious_gap(step1: f64, k_min: i64, k_max: i64) -> f64 {
    let n = (k_max - k_min) as f64;
    step1 / (2.0 * (2.0 * n + 1.0))
}

/// Splits an estimation error into a whole number of grid steps and the
/// remaining fraction of a step.
pub fn determination_offset(error: f64, step: f64) -> (i64, f64) {
    let k = (error / step).round();
    (k as i64, error / step - k)
}

/// RMSE over the estimates divided by the (positive) true value.
pub fn nrmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimates"));
    }
    if !(truth > 0.0) {
        return Err(Error::Domain(format!(
            "true value must be positive, got {truth}"
        )));
    }
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64;
    Ok(mse.sqrt() / truth)
}

/// Estimation protocol with everything the estimator may know.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BhpeConfig {
    pub known: KnownPhysics,
    pub tau11: f64,
    pub tau21: f64,
    /// Prior range for Jxy, joules.
    pub jxy_prior: [f64; 2],
    /// Prior range for Jz, joules.
    pub jz_prior: [f64; 2],
    pub ensembles: ProtocolEnsembles,
    pub budget: Budget,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JxyEstimate {
    pub jxy_hat: f64,
    pub tau12: f64,
    pub bounds: [(i64, i64); 2],
    pub pair: ClosestPair,
    pub flags: Flags,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JzEstimate {
    pub jz_hat: f64,
    pub tau22: f64,
    pub bounds: [(i64, i64); 2],
    pub pair: ClosestPair,
    pub flags: Flags,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianEstimate {
    pub jxy_hat: f64,
    /// `None` when the run was rejected.
    pub jz_hat: Option<f64>,
    pub flags: Flags,
}

fn xy_grid<S: MeasurementSource + ?Sized>(
    source: &mut S,
    cfg: &BhpeConfig,
    prefix: &str,
    tau: f64,
) -> Result<(Vec<f64>, (i64, i64), Flags)> {
    let h = cfg.known.hbar;
    let one = part_one(source, prefix, tau, &cfg.ensembles, &cfg.budget)?;
    let (k_min, k_max) = xy_k_bounds(tau, cfg.jxy_prior[0], cfg.jxy_prior[1], h)?;
    let g = GridSpec::new(tau, k_min, k_max, one.delta_ed_hat, GridKind::XY, h)?;
    Ok((grid_candidates(&g, 0.0), (k_min, k_max), one.flags))
}

pub fn estimate_jxy<S: MeasurementSource + ?Sized>(
    source: &mut S,
    cfg: &BhpeConfig,
) -> Result<JxyEstimate> {
    let (g1, b1, f1) = xy_grid(source, cfg, "t11", cfg.tau11)?;
    let tau12 = companion_interval(cfg.tau11, b1.0, b1.1)?;
    let (g2, b2, f2) = xy_grid(source, cfg, "t12", tau12)?;
    let pair = closest_pair_estimate(&g1, &g2, cfg.jxy_prior[0], cfg.jxy_prior[1])?;
    let mut flags = f1 | f2;
    let step = grid_step(GridKind::XY, cfg.tau11, cfg.known.hbar);
    if pair.gap > suspicious_gap(step, b1.0, b1.1) {
        flags |= Flags::LARGE_GAP_JXY;
    }
    Ok(JxyEstimate {
        jxy_hat: pair.value,
        tau12,
        bounds: [b1, b2],
        pair,
        flags,
    })
}

fn z_grid<S: MeasurementSource + ?Sized>(
    source: &mut S,
    cfg: &BhpeConfig,
    prefix: &str,
    tau: f64,
    jxy_hat: f64,
) -> Result<(Vec<f64>, (i64, i64))> {
    let h = cfg.known.hbar;
    let jxy_phase = jxy_hat * tau / h;
    let gb_phase = cfg.known.zeeman_phase(tau);
    let fit = part_two(
        source,
        prefix,
        tau,
        &cfg.ensembles,
        &cfg.budget,
        jxy_phase,
        gb_phase,
    )?;
    let extra = jxy_phase + gb_phase;
    let (k_min, k_max) = z_k_bounds(tau, cfg.jz_prior[0], cfg.jz_prior[1], extra, h)?;
    let g = GridSpec::new(tau, k_min, k_max, fit.delta_phi10d_hat, GridKind::Z, h)?;
    Ok((grid_candidates(&g, extra), (k_min, k_max)))
}

/// Second interval pair. An unresolvable x-basis phase rejects the run
/// instead of failing it.
pub fn estimate_jz<S: MeasurementSource + ?Sized>(
    source: &mut S,
    cfg: &BhpeConfig,
    jxy_hat: f64,
) -> Result<Option<JzEstimate>> {
    let first = match z_grid(source, cfg, "t21", cfg.tau21, jxy_hat) {
        Err(Error::IndeterminatePhase { .. }) => return Ok(None),
        r => r?,
    };
    let (g1, b1) = first;
    let tau22 = companion_interval(cfg.tau21, b1.0, b1.1)?;
    let (g2, b2) = match z_grid(source, cfg, "t22", tau22, jxy_hat) {
        Err(Error::IndeterminatePhase { .. }) => return Ok(None),
        r => r?,
    };
    let pair = closest_pair_estimate(&g1, &g2, cfg.jz_prior[0], cfg.jz_prior[1])?;
    let mut flags = Flags::empty();
    let step = grid_step(GridKind::Z, cfg.tau21, cfg.known.hbar);
    if pair.gap > suspicious_gap(step, b1.0, b1.1) {
        flags |= Flags::LARGE_GAP_JZ;
    }
    Ok(Some(JzEstimate {
        jz_hat: pair.value,
        tau22,
        bounds: [b1, b2],
        pair,
        flags,
    }))
}

pub fn estimate_hamiltonian<S: MeasurementSource + ?Sized>(
    source: &mut S,
    cfg: &BhpeConfig,
) -> Result<HamiltonianEstimate> {
    let xy = estimate_jxy(source, cfg)?;
    let z = estimate_jz(source, cfg, xy.jxy_hat)?;
    let mut flags = xy.flags;
    match z {
        Some(z) => {
            flags |= z.flags;
            Ok(HamiltonianEstimate {
                jxy_hat: xy.jxy_hat,
                jz_hat: Some(z.jz_hat),
                flags,
            })
        }
        None => Ok(HamiltonianEstimate {
            jxy_hat: xy.jxy_hat,
            jz_hat: None,
            flags: flags | Flags::JZ_REJECTED,
        }),
    }
}
