//! Entropy diagnostics: partition entropy of empirical measures, return
//! times to small balls, and the periodic approximation schedule with its
//! zero-entropy perturbation.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{circle_dist, DynamicsError, ExpandingMap, MapKind, OrbitSeed, PeriodicOrbit};
use crate::locking::{smooth_distance, LockingError, SmoothBump};
use crate::observables::{CircleFunction, DomainError, Observable};

/// Occupied cells at the deepest level may not exceed `N / e^2`.
pub const OCCUPANCY_FACTOR: f64 = 0.135_335_283_236_612_7;
pub const MAX_RETURN_LENGTH: usize = 10_000_000;
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("{occupied} occupied cells at depth {depth} exceed N/e^2 for N = {samples}")]
    InsufficientSamples {
        depth: usize,
        occupied: usize,
        samples: usize,
    },
    #[error("depth {depth} is too fine for degree {k}")]
    DepthTooLarge { depth: usize, k: u32 },
    #[error("no samples")]
    Empty,
    #[error("orbit length {0} exceeds {MAX_RETURN_LENGTH}")]
    TooLong(usize),
    #[error("theta must lie in (0, 1), got {0}")]
    BadTheta(f64),
    #[error("period {0} is not in the schedule")]
    MissingPeriod(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Locking(#[from] LockingError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// The depth-`n` refinement of the partition into monotone branches; for
/// linear maps its cells are the k-adic intervals `[j/k^n, (j+1)/k^n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkovPartition {
    pub map: ExpandingMap,
    pub depth: usize,
}

impl MarkovPartition {
    pub fn new(map: ExpandingMap, depth: usize) -> Result<Self, EntropyError> {
        let bits = depth as f64 * (map.degree() as f64).log2();
        if bits > 74.0 {
            return Err(EntropyError::DepthTooLarge { depth, k: map.degree() });
        }
        Ok(Self { map, depth })
    }

    pub fn cell_count(&self) -> u128 {
        (self.map.degree() as u128).pow(self.depth as u32)
    }

    /// Index of the cell containing `x`: its first `depth` itinerary digits
    /// read as a base-k number.
    pub fn cell_of(&self, x: f64) -> u128 {
        let k = self.map.degree() as u128;
        let x = crate::dynamics::wrap(x);
        if self.map.is_linear() {
            // exact floor(x k^depth) from the binary expansion of x
            if x == 0.0 {
                return 0;
            }
            let bits = x.to_bits();
            let exp = ((bits >> 52) & 0x7ff) as i64;
            let (mant, e) = if exp == 0 {
                (bits & ((1 << 52) - 1), -1074)
            } else {
                ((bits & ((1 << 52) - 1)) | (1 << 52), exp - 1075)
            };
            let scaled = mant as u128 * self.cell_count();
            let shift = (-e) as u32;
            if shift >= 128 {
                0
            } else {
                scaled >> shift
            }
        } else {
            let mut idx = 0u128;
            let mut y = x;
            for _ in 0..self.depth {
                idx = idx * k + self.map.branch_index(y) as u128;
                y = self.map.evaluate(y);
            }
            idx
        }
    }

    pub fn diameter(&self) -> f64 {
        match self.map.kind {
            MapKind::Linear { k } => (k as f64).powi(-(self.depth as i32)),
            MapKind::Perturbed { .. } => self.map.lambda.powi(self.depth as i32 - 1) * self.map.e0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthEntropy {
    pub depth: usize,
    /// `H_k / k`.
    pub rate: f64,
    pub occupied: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub per_depth: Vec<DepthEntropy>,
    /// Minimum of the per-depth rates.
    pub value: f64,
    pub sample_size: usize,
}

/// Plug-in entropy of the empirical measure of `samples` on the partitions
/// of depth `1..=max_depth`.
pub fn partition_entropy(
    map: &ExpandingMap,
    samples: &[f64],
    max_depth: usize,
) -> Result<EntropyEstimate, EntropyError> {
    if samples.is_empty() {
        return Err(EntropyError::Empty);
    }
    let part = MarkovPartition::new(*map, max_depth)?;
    let mut cells: Vec<u128> = samples.par_iter().map(|&x| part.cell_of(x)).collect();
    cells.par_sort_unstable();
    let n = samples.len();
    let k = map.degree() as u128;
    let per_depth: Vec<DepthEntropy> = (1..=max_depth)
        .into_par_iter()
        .map(|depth| {
            let div = k.pow((max_depth - depth) as u32);
            let mut h = 0.0;
            let mut occupied = 0;
            let mut run = 0usize;
            let mut prev = None;
            let mut flush = |run: usize| {
                if run > 0 {
                    let p = run as f64 / n as f64;
                    h -= p * p.ln();
                }
            };
            for &c in &cells {
                let cell = c / div;
                if prev == Some(cell) {
                    run += 1;
                } else {
                    flush(run);
                    occupied += 1;
                    run = 1;
                    prev = Some(cell);
                }
            }
            flush(run);
            DepthEntropy {
                depth,
                rate: (h / depth as f64).max(0.0),
                occupied,
            }
        })
        .collect();
    let deepest = per_depth.last().map_or(0, |d| d.occupied);
    if deepest as f64 > n as f64 * OCCUPANCY_FACTOR {
        return Err(EntropyError::InsufficientSamples {
            depth: max_depth,
            occupied: deepest,
            samples: n,
        });
    }
    let value = per_depth.iter().map(|d| d.rate).fold(f64::INFINITY, f64::min);
    Ok(EntropyEstimate {
        per_depth,
        value,
        sample_size: n,
    })
}

/// Deepest level whose expected number of occupied cells for uniform
/// samples stays within the occupancy rule.
pub fn uniform_depth(k: u32, samples: usize) -> usize {
    let n = samples as f64;
    let mut depth = 1;
    loop {
        let cells = (k as f64).powi(depth as i32 + 1);
        let expected = cells * (1.0 - (-n / cells).exp());
        if expected > n * OCCUPANCY_FACTOR {
            return depth;
        }
        depth += 1;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnStatistics {
    pub w: f64,
    pub radius: f64,
    pub q_factor: f64,
    pub n: i32,
    pub n0: i32,
    pub length: usize,
    pub return_times: Vec<usize>,
    /// Smallest gap between consecutive returns; absent with fewer than two.
    pub min_gap: Option<usize>,
    /// `sqrt(2)^(N - N0 - 1)`.
    pub gap_bound: f64,
    /// `log sqrt(2) |log lambda| / log Q`.
    pub entropy_bound: f64,
    /// Whether the observed gaps respect the gap bound; a diagnostic only.
    pub gap_bound_holds: Option<bool>,
}

/// Times `t < length` with `d(T^t q, w) <= Q^(-N) / 2`.
#[allow(clippy::too_many_arguments)]
pub fn return_times(
    map: &ExpandingMap,
    q: &OrbitSeed,
    w: f64,
    q_factor: f64,
    n: i32,
    n0: i32,
    length: usize,
) -> Result<ReturnStatistics, EntropyError> {
    if length > MAX_RETURN_LENGTH {
        return Err(EntropyError::TooLong(length));
    }
    let radius = 0.5 * q_factor.powi(-n);
    let return_times: Vec<usize> = map
        .orbit_iter(q)
        .take(length)
        .enumerate()
        .filter(|(_, x)| circle_dist(*x, w) <= radius)
        .map(|(t, _)| t)
        .collect();
    let min_gap = return_times.windows(2).map(|p| p[1] - p[0]).min();
    let gap_bound = 2f64.sqrt().powi(n - n0 - 1);
    Ok(ReturnStatistics {
        w,
        radius,
        q_factor,
        n,
        n0,
        length,
        gap_bound_holds: min_gap.map(|g| g as f64 >= gap_bound),
        min_gap,
        gap_bound,
        entropy_bound: 2f64.sqrt().ln() * map.lambda.ln().abs() / q_factor.ln(),
        return_times,
    })
}

/// Both sides of `sum -a_i log a_i <= 1 + A log n`, with `0 log 0 = 0`.
pub fn shannon_bound_check(a: &[f64]) -> (f64, f64) {
    let lhs = a.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    let total: f64 = a.iter().sum();
    (lhs, 1.0 + total * (a.len() as f64).ln())
}

/// Points of a compact target set, kept sorted for nearest-point queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSet {
    points: Vec<f64>,
}

impl TargetSet {
    pub fn new(points: &[f64]) -> Result<Self, EntropyError> {
        if points.is_empty() {
            return Err(EntropyError::Empty);
        }
        let mut points: Vec<f64> = points.iter().map(|&x| crate::dynamics::wrap(x)).collect();
        points.sort_by(f64::total_cmp);
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn distance(&self, x: f64) -> f64 {
        let x = crate::dynamics::wrap(x);
        let n = self.points.len();
        let i = self.points.partition_point(|&p| p < x);
        let a = self.points[i % n];
        let b = self.points[(i + n - 1) % n];
        circle_dist(x, a).min(circle_dist(x, b))
    }
}

/// Orbit sample of the point whose binary digits are the mechanical word
/// of slope `omega`: `b_i = floor((i + 1) omega) - floor(i omega)`.
pub fn sturmian_sample(omega: f64, count: usize) -> Vec<f64> {
    const DIGITS: usize = 60;
    let bits: Vec<u8> = (0..count + DIGITS)
        .map(|i| (((i + 1) as f64 * omega).floor() - (i as f64 * omega).floor()) as u8)
        .collect();
    (0..count)
        .map(|j| {
            bits[j..j + DIGITS]
                .iter()
                .rev()
                .fold(0.0, |acc, &b| (acc + b as f64) * 0.5)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproximationStep {
    pub n: usize,
    pub orbit: PeriodicOrbit,
    pub dist: f64,
    /// `log_theta(dist)`; infinite when `dist = 0`.
    #[serde(with = "crate::numfmt")]
    pub r: f64,
    /// `floor(r / 2)`; absent when `r` is infinite.
    pub m: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproximationSchedule {
    pub theta: f64,
    /// `theta < min(e0, lambda, e0 / Lip T)`.
    pub theta_admissible: bool,
    pub target: TargetSet,
    pub per_n: Vec<ApproximationStep>,
    /// Largest `(-alpha - int f dnu) / int d(x, K) dnu` over the enumerated
    /// orbits: a lower estimate of the constant, present when `f` is given.
    pub c_estimate: Option<f64>,
}

impl ApproximationSchedule {
    pub fn step(&self, n: usize) -> Option<&ApproximationStep> {
        self.per_n.iter().find(|s| s.n == n)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EntropyError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "period", "representative", "dist", "r", "m"])?;
        for s in &self.per_n {
            w.write_record([
                s.n.to_string(),
                s.orbit.period.to_string(),
                s.orbit.representative().to_string(),
                s.dist.to_string(),
                s.r.to_string(),
                s.m.map(|m| m.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// For each `n <= max_period`, the prime orbit of period at most `n`
/// closest on average to the target set.
pub fn periodic_approximation(
    map: &ExpandingMap,
    target: &TargetSet,
    max_period: usize,
    theta: f64,
    maximizing: Option<(&Observable, f64)>,
) -> Result<ApproximationSchedule, EntropyError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(EntropyError::BadTheta(theta));
    }
    let orbits = map.prime_orbits(max_period)?;
    let dists: Vec<f64> = orbits
        .par_iter()
        .map(|o| o.points.iter().map(|&x| target.distance(x)).sum::<f64>() / o.period as f64)
        .collect();
    let mut per_n = Vec::with_capacity(max_period);
    let mut best: Option<usize> = None;
    let mut idx = 0;
    for n in 1..=max_period {
        while idx < orbits.len() && orbits[idx].period <= n {
            if best.is_none_or(|b| dists[idx] < dists[b]) {
                best = Some(idx);
            }
            idx += 1;
        }
        let Some(b) = best else { continue };
        let dist = dists[b];
        let r = if dist > 0.0 {
            dist.ln() / theta.ln()
        } else {
            f64::INFINITY
        };
        per_n.push(ApproximationStep {
            n,
            orbit: orbits[b].clone(),
            dist,
            r,
            m: r.is_finite().then(|| (r / 2.0).floor() as i64),
        });
    }
    let c_estimate = match maximizing {
        Some((f, alpha)) => {
            let vals: Vec<f64> = orbits
                .par_iter()
                .zip(&dists)
                .filter(|(_, &d)| d > 0.0)
                .map(|(o, &d)| {
                    let avg = crate::maxsearch::orbit_average(f, o)?;
                    Ok((-alpha - avg) / d)
                })
                .collect::<Result<_, DomainError>>()?;
            vals.into_iter().reduce(f64::max)
        }
        None => None,
    };
    let e0 = map.e0;
    Ok(ApproximationSchedule {
        theta,
        theta_admissible: theta < e0.min(map.lambda).min(e0 / map.lip_t),
        target: target.clone(),
        per_n,
        c_estimate,
    })
}

/// `f_n = f - beta * g_n`, where `g_n` is a smooth distance to the support
/// of the `n`-th approximating orbit.
#[derive(Debug, Clone)]
pub struct ZeroEntropyPerturbation {
    pub observable: Observable,
    pub bump: SmoothBump,
    /// Error allowed between `g_n` and the distance.
    pub budget: f64,
    /// The budget is `gamma theta^(m + r/2)`, or `gamma theta^n` when the
    /// orbit lies in the target (`r` infinite).
    pub budget_fallback: bool,
    pub beta: f64,
}

#[derive(Debug)]
struct BumpFn(SmoothBump);

impl CircleFunction for BumpFn {
    fn value(&self, x: f64) -> f64 {
        self.0.eval(x)
    }
    fn describe(&self) -> String {
        format!("smooth distance to a period-{} orbit", self.0.target.period)
    }
}

pub fn zero_entropy_perturbation(
    f: &Observable,
    sched: &ApproximationSchedule,
    n: usize,
    beta: f64,
    gamma: f64,
) -> Result<ZeroEntropyPerturbation, EntropyError> {
    let step = sched.step(n).ok_or(EntropyError::MissingPeriod(n))?;
    let (budget, budget_fallback) = match step.m {
        Some(m) => (gamma * sched.theta.powf(m as f64 + 0.5 * step.r), false),
        None => (gamma * sched.theta.powi(n as i32), true),
    };
    let bump = smooth_distance(&step.orbit, budget)?;
    let observable = if beta == 0.0 {
        f.clone()
    } else {
        Observable::combination(
            vec![
                (1.0, f.clone()),
                (-beta, Observable::custom(Arc::new(BumpFn(bump.clone())))),
            ],
            0.0,
        )
    };
    Ok(ZeroEntropyPerturbation {
        observable,
        bump,
        budget,
        budget_fallback,
        beta,
    })
}

/// Grid points of the dynamical ball `V(w, L, eps)` and the largest
/// distance from `w` among them.
pub fn dynamical_ball_scan(map: &ExpandingMap, w: f64, l: usize, eps: f64, grid: usize) -> (usize, f64) {
    let wt: Vec<f64> = map.forward_orbit(&OrbitSeed::Float(w), l + 1);
    (0..grid)
        .into_par_iter()
        .filter_map(|i| {
            let x = i as f64 / grid as f64;
            let mut y = x;
            for &target in &wt {
                if circle_dist(y, target) >= eps {
                    return None;
                }
                y = map.evaluate(y);
            }
            Some(circle_dist(x, w))
        })
        .fold(|| (0, 0.0f64), |(c, m), d| (c + 1, m.max(d)))
        .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)))
}
