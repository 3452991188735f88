//! The locking construction: constant schedule, a smooth distance to a
//! periodic orbit, the perturbation `G = F̄ - eps g + h + beta`, and a
//! brute-force check that its maximizing orbit is the target.

use std::f64::consts::TAU;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{circle_dist, DynamicsError, ExpandingMap, PeriodicOrbit};
use crate::lax::EffectiveObservable;
use crate::maxsearch::{maximize_among, orbit_average, MaxSearchError};
use crate::observables::{CircleFunction, DomainError, Observable, SAMPLE_GRID};

/// Smallest smoothing width attempted before giving up.
pub const MIN_ETA: f64 = 1e-9;
/// Sampled Lipschitz constants of `g` at or above this are flagged.
pub const LIP_FLAG: f64 = 1.95;
const BISECTION_STEPS: usize = 24;
/// Fraction of `Gamma1` the sampled error may use, leaving room for the
/// error between grid points.
const ERROR_MARGIN: f64 = 0.95;

#[derive(Debug, Error)]
pub enum LockingError {
    #[error("smoothing width fell below {MIN_ETA} without meeting the error bound {gamma1}")]
    TargetUnreachable { gamma1: f64 },
    #[error("perturbation too large: sup {sup} (limit {sup_limit}), Lipschitz {lip} (limit 1)")]
    PerturbationTooLarge { sup: f64, sup_limit: f64, lip: f64 },
    #[error("constant schedule infeasible: {}", reasons.join("; "))]
    Infeasible { reasons: Vec<String> },
    #[error("max_period {max_period} is below the target period {period}")]
    PeriodTooSmall { max_period: usize, period: usize },
    #[error(transparent)]
    Search(#[from] MaxSearchError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Inputs of the constant schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    /// Jump budget.
    pub m: usize,
    /// Period of the target orbit.
    pub p: usize,
    pub delta: f64,
    pub lip_fbar: f64,
    pub lambda: f64,
    pub lip_t: f64,
    pub gamma_delta: f64,
    pub e0: f64,
    /// Penalty weight; `sqrt(delta)` when absent.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockingConstants {
    pub m: usize,
    pub p: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub lip_fbar: f64,
    pub lambda: f64,
    pub lip_t: f64,
    pub gamma_delta: f64,
    pub e0: f64,
    pub k: f64,
    pub rho: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub big_gamma1: f64,
    pub big_gamma2: f64,
    pub a: f64,
    pub b: f64,
    /// `2K delta + K rho - eps gamma3`, the middle of the chain for `-a`.
    pub chain_a_mid: f64,
    /// `-K delta`, the middle of the chain for `-b`.
    pub chain_b_mid: f64,
    pub feasible: bool,
    pub reasons: Vec<String>,
}

pub fn compute_constants(inp: &ScheduleInputs) -> LockingConstants {
    let ScheduleInputs {
        m,
        p,
        delta,
        lip_fbar,
        lambda,
        lip_t,
        gamma_delta,
        e0,
        epsilon,
    } = *inp;
    let eps = epsilon.unwrap_or_else(|| delta.sqrt());
    let pf = p as f64;
    let one_minus = 1.0 - lambda;
    let k = (m as f64 * lip_fbar / (one_minus * one_minus)).max((lip_fbar + 3.0) / one_minus);
    let rho = 3.0 * k * delta / eps;
    let gamma2 = gamma_delta - 2.0 * delta / one_minus;
    let gamma3 = gamma2 / lip_t - lambda * rho;
    let g1 = rho / (12.0 * pf);
    let g2 = k * delta / (4.0 * pf);
    let a = eps * gamma3 - k * delta - k * rho - 2.0 * pf * eps * g1 - 2.0 * pf * g2;
    let b = eps * rho - k * delta / pf - 2.0 * eps * g1 - 2.0 * g2;

    let mut reasons = Vec::new();
    let mut need = |ok: bool, msg: String| {
        if !ok {
            reasons.push(msg);
        }
    };
    need(a > 0.0, format!("a = {a:e} is not positive"));
    need(b > 0.0, format!("b = {b:e} is not positive"));
    need(
        rho <= e0 / 10.0,
        format!("rho = {rho:e} exceeds e0/10 = {:e}", e0 / 10.0),
    );
    need(
        gamma3 >= 10.0 * delta,
        format!("gamma3 = {gamma3:e} is below 10 delta = {:e}", 10.0 * delta),
    );
    need(g1 < 1.0, format!("Gamma1 = {g1:e} is not below 1"));
    need(g2 < 1.0, format!("Gamma2 = {g2:e} is not below 1"));
    need(gamma2 > 0.0, format!("gamma2 = {gamma2:e} is not positive"));
    LockingConstants {
        m,
        p,
        delta,
        epsilon: eps,
        lip_fbar,
        lambda,
        lip_t,
        gamma_delta,
        e0,
        k,
        rho,
        gamma2,
        gamma3,
        big_gamma1: g1,
        big_gamma2: g2,
        a,
        b,
        chain_a_mid: 2.0 * k * delta + k * rho - eps * gamma3,
        chain_b_mid: -k * delta,
        feasible: reasons.is_empty(),
        reasons,
    }
}

/// Smooth stand-in for the distance to a periodic orbit:
/// `g(x) = -eta log sum_i exp(-phi(x - y_i) / eta)` with
/// `phi(t) = arccos(cos(2 pi eta) cos(2 pi t)) / (2 pi) - eta`.
///
/// `phi` is the hypotenuse of a spherical right triangle with legs
/// `2 pi t` and `2 pi eta`, so it is smooth, 1-Lipschitz and within `2 eta`
/// of `d(t, 0)`. The soft-min costs at most `eta log p` more, so
/// `d(x, O) - eta (2 + log p) <= g(x) <= d(x, O)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothBump {
    pub target: PeriodicOrbit,
    pub eta: f64,
    pub achieved_sup_error: f64,
    pub achieved_lip: f64,
    /// Set when the sampled Lipschitz constant is in `[1.95, 2)`.
    pub lip_flagged: bool,
}

impl SmoothBump {
    /// The bump for a fixed width, with its certificate fields sampled.
    pub fn with_eta(target: &PeriodicOrbit, eta: f64) -> Self {
        let mut bump = SmoothBump {
            target: target.clone(),
            eta,
            achieved_sup_error: 0.0,
            achieved_lip: 0.0,
            lip_flagged: false,
        };
        let (err, lip) = bump.sample_certificate();
        bump.achieved_sup_error = err;
        bump.achieved_lip = lip;
        bump.lip_flagged = lip >= LIP_FLAG;
        bump
    }

    pub fn eval(&self, x: f64) -> f64 {
        let eta = self.eta;
        let c = (TAU * eta).cos();
        let phis: Vec<f64> = self
            .target
            .points
            .iter()
            .map(|&y| (c * (TAU * (x - y)).cos()).clamp(-1.0, 1.0).acos() / TAU - eta)
            .collect();
        let lo = phis.iter().copied().fold(f64::INFINITY, f64::min);
        let s: f64 = phis.iter().map(|&f| (-(f - lo) / eta).exp()).sum();
        lo - eta * s.ln()
    }

    /// Sampled `sup |g - d(., O)|` and Lipschitz constant on the grid,
    /// together with the orbit points and the midpoints between them.
    fn sample_certificate(&self) -> (f64, f64) {
        let n = SAMPLE_GRID;
        let h = 1.0 / n as f64;
        let vals: Vec<f64> = (0..n).into_par_iter().map(|i| self.eval(i as f64 * h)).collect();
        let mut err = (0..n)
            .into_par_iter()
            .map(|i| (vals[i] - self.target.distance_to(i as f64 * h)).abs())
            .reduce(|| 0.0, f64::max);
        let mut sorted = self.target.points.clone();
        sorted.sort_by(f64::total_cmp);
        for (i, &y) in sorted.iter().enumerate() {
            let next = if i + 1 < sorted.len() {
                sorted[i + 1]
            } else {
                sorted[0] + 1.0
            };
            for x in [y, 0.5 * (y + next)] {
                err = err.max((self.eval(x) - self.target.distance_to(x)).abs());
            }
        }
        let lip = (0..n).map(|i| (vals[(i + 1) % n] - vals[i]).abs()).fold(0.0, f64::max) * n as f64;
        (err, lip)
    }
}

/// Widest smoothing whose sampled error stays below `Gamma1`, found by
/// bisection above the analytically safe width `Gamma1 / (2 + log p)`.
pub fn smooth_distance(target: &PeriodicOrbit, gamma1: f64) -> Result<SmoothBump, LockingError> {
    let safe = 0.9 * gamma1 / (2.0 + (target.period as f64).ln());
    if !(safe >= MIN_ETA) {
        return Err(LockingError::TargetUnreachable { gamma1 });
    }
    let ok = |b: &SmoothBump| b.achieved_sup_error < ERROR_MARGIN * gamma1;
    let mut best = SmoothBump::with_eta(target, safe);
    if !ok(&best) {
        return Err(LockingError::TargetUnreachable { gamma1 });
    }
    let (mut lo, mut hi) = (safe, gamma1);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let cand = SmoothBump::with_eta(target, mid);
        if ok(&cand) {
            lo = mid;
            best = cand;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-3 * lo {
            break;
        }
    }
    Ok(best)
}

/// `G1 = F̄ - eps g + h` and its normalization `G = G1 + beta`.
#[derive(Debug, Clone)]
pub struct LockingPerturbation {
    pub base: EffectiveObservable,
    pub orbit: PeriodicOrbit,
    pub epsilon: f64,
    pub g: SmoothBump,
    pub h: Option<Observable>,
    pub beta: f64,
    pub max_period: usize,
    /// The schedule was infeasible and the caller chose to proceed.
    pub override_used: bool,
    pub constants: LockingConstants,
}

impl LockingPerturbation {
    pub fn g1(&self, x: f64) -> f64 {
        let h = self.h.as_ref().map_or(0.0, |h| h.eval(x));
        self.base.eval(x) - self.epsilon * self.g.eval(x) + h
    }

    pub fn g_normalized(&self, x: f64) -> f64 {
        self.g1(x) + self.beta
    }

    pub fn g1_observable(&self) -> Observable {
        Observable::custom(Arc::new(G1Fn(self.clone())))
    }
}

#[derive(Debug)]
struct G1Fn(LockingPerturbation);

impl CircleFunction for G1Fn {
    fn value(&self, x: f64) -> f64 {
        self.0.g1(x)
    }
    fn describe(&self) -> String {
        format!("fbar[{}] - {}*g + h", self.0.base.obs, self.0.epsilon)
    }
}

/// Assemble the perturbation for `orbit` and compute `beta` as minus the
/// best orbit average of `G1` over periods up to `max_period`.
pub fn locking_perturbation(
    map: &ExpandingMap,
    eff: &EffectiveObservable,
    orbit: &PeriodicOrbit,
    consts: &LockingConstants,
    h: Option<Observable>,
    max_period: usize,
    allow_infeasible: bool,
) -> Result<LockingPerturbation, LockingError> {
    if !consts.feasible && !allow_infeasible {
        return Err(LockingError::Infeasible {
            reasons: consts.reasons.clone(),
        });
    }
    if let Some(h) = &h {
        if !(h.sup_bound < consts.big_gamma2 && h.lip_bound < 1.0) {
            return Err(LockingError::PerturbationTooLarge {
                sup: h.sup_bound,
                sup_limit: consts.big_gamma2,
                lip: h.lip_bound,
            });
        }
    }
    if max_period < orbit.period {
        return Err(LockingError::PeriodTooSmall {
            max_period,
            period: orbit.period,
        });
    }
    let g = smooth_distance(orbit, consts.big_gamma1)?;
    let mut pert = LockingPerturbation {
        base: eff.clone(),
        orbit: orbit.clone(),
        epsilon: consts.epsilon,
        g,
        h,
        beta: 0.0,
        max_period,
        override_used: !consts.feasible,
        constants: consts.clone(),
    };
    let orbits = map.prime_orbits(max_period)?;
    let best = best_average(&pert, &orbits);
    pert.beta = -best;
    Ok(pert)
}

fn best_average(pert: &LockingPerturbation, orbits: &[PeriodicOrbit]) -> f64 {
    orbits
        .par_iter()
        .map(|o| o.points.iter().map(|&x| pert.g1(x)).sum::<f64>() / o.period as f64)
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockingVerdict {
    pub locked: bool,
    #[serde(with = "crate::numfmt")]
    pub margin: f64,
    pub argmax_orbits: Vec<PeriodicOrbit>,
    pub target_average: f64,
    pub max_period: usize,
}

/// Whether the unique maximizing orbit of `G1` up to `max_period` is the
/// target; the margin is the runner-up gap.
pub fn verify_locking(
    map: &ExpandingMap,
    pert: &LockingPerturbation,
    max_period: usize,
    tie_tol: f64,
) -> Result<LockingVerdict, LockingError> {
    if max_period < pert.orbit.period {
        return Err(LockingError::PeriodTooSmall {
            max_period,
            period: pert.orbit.period,
        });
    }
    let orbits = map.prime_orbits(max_period)?;
    let obs = pert.g1_observable();
    let res = maximize_among(&orbits, &obs, max_period, tie_tol)?;
    let locked = res.argmax_orbits.len() == 1
        && res.argmax_orbits[0].same_orbit(&pert.orbit, 1e-9)
        && res.runner_up_gap > tie_tol;
    Ok(LockingVerdict {
        locked,
        margin: res.runner_up_gap,
        target_average: orbit_average(&obs, &pert.orbit)?,
        argmax_orbits: res.argmax_orbits,
        max_period,
    })
}

/// Grid points farther than `rho` from the target where `G > -b + slack`.
pub fn far_point_violations(pert: &LockingPerturbation, n: usize, slack: f64) -> Vec<(f64, f64)> {
    let c = &pert.constants;
    (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let x = i as f64 / n as f64;
            if pert.orbit.distance_to(x) <= c.rho {
                return None;
            }
            let gx = pert.g_normalized(x);
            (gx > -c.b + slack).then_some((x, gx))
        })
        .collect()
}

/// Largest value of `G` on the grid.
pub fn grid_sup(pert: &LockingPerturbation, n: usize) -> f64 {
    (0..n)
        .into_par_iter()
        .map(|i| pert.g_normalized(i as f64 / n as f64))
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Smallest distance from the non-tracking preimages of points within
/// `rho` of the orbit back to the orbit, over `samples` random points per
/// orbit point.
pub fn second_preimage_separation(
    map: &ExpandingMap,
    orbit: &PeriodicOrbit,
    rho: f64,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> f64 {
    let mut worst = f64::INFINITY;
    let p = orbit.period;
    for k in 0..p {
        let yk = orbit.points[k];
        let prev = orbit.points[(k + p - 1) % p];
        for _ in 0..samples {
            let z = crate::dynamics::wrap(yk + rng.gen_range(-rho..=rho));
            let pre = map.inverse_branches(z);
            let tracking = pre
                .iter()
                .enumerate()
                .min_by(|a, b| circle_dist(*a.1, prev).total_cmp(&circle_dist(*b.1, prev)))
                .map(|(i, _)| i)
                .unwrap();
            for (i, &w) in pre.iter().enumerate() {
                if i != tracking {
                    worst = worst.min(orbit.distance_to(w));
                }
            }
        }
    }
    worst
}
