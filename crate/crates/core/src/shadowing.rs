//! Pseudo-orbits, shadowing by backward inverse-branch composition,
//! recurrence mining along a forward orbit, and calibrating pre-orbits.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{circle_dist, circle_dist_exact, ExpandingMap, OrbitSeed, PeriodicOrbit, Rational};
use crate::lax::EffectiveObservable;

/// Defects at or below this count as exact steps.
pub const JUMP_TOL: f64 = 1e-12;
/// Two preimages within this margin of each other count as a tie.
pub const TIE_TOL: f64 = 1e-12;
pub const DEFAULT_FILTER_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_RESULTS: usize = 64;
pub const MAX_MINING_LENGTH: usize = 1_000_000;

// A few ulps: forward iteration multiplies any residual by up to Lip(T)^p.
const FIXED_POINT_TOL: f64 = 4.0 * f64::EPSILON;
const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("pseudo-orbit has no points")]
    Empty,
    #[error("delta {delta} is not below (1 - lambda) e0 = {limit}")]
    DeltaTooLarge { delta: f64, limit: f64 },
    #[error("max_jumps must be 1 or 2, got {0}")]
    BadJumps(usize),
    #[error("orbit length {0} exceeds {MAX_MINING_LENGTH}")]
    TooLong(usize),
    #[error("depth must be at least 1")]
    BadDepth,
    #[error("pseudo-orbit csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOrbit {
    pub points: Vec<f64>,
    /// Rational points, when known, for exact shadowing under linear maps.
    #[serde(skip)]
    pub exact: Option<Vec<Rational>>,
    /// `defects[i] = d(T(x_i), x_{i+1})`, cyclic when periodic.
    pub defects: Vec<f64>,
    pub delta: f64,
    pub jumps: Vec<usize>,
    pub periodic: bool,
    /// Minimum pairwise distance; infinite for a single point.
    #[serde(with = "crate::numfmt")]
    pub gamma: f64,
}

impl PseudoOrbit {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `gamma / delta`, infinite when `delta = 0`.
    pub fn ratio(&self) -> f64 {
        if self.delta == 0.0 {
            f64::INFINITY
        } else {
            self.gamma / self.delta
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ShadowError> {
        let mut out = out;
        let io = |e: std::io::Error| ShadowError::Csv(e.to_string());
        writeln!(out, "# delta={}", self.delta).map_err(io)?;
        let jumps: Vec<String> = self.jumps.iter().map(|j| j.to_string()).collect();
        writeln!(out, "# jumps={}", jumps.join(" ")).map_err(io)?;
        writeln!(out, "# gamma={}", self.gamma).map_err(io)?;
        writeln!(out, "# periodic={}", self.periodic).map_err(io)?;
        writeln!(out, "idx,x,defect").map_err(io)?;
        for (i, x) in self.points.iter().enumerate() {
            let d = self.defects.get(i).map(|d| d.to_string()).unwrap_or_default();
            writeln!(out, "{i},{x},{d}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Points and periodic flag from a pseudo-orbit CSV. Defects are ignored
/// and recomputed by [`validate_pseudo_orbit`]; a `periodic` header line
/// sets the flag.
pub fn read_pseudo_orbit_csv<R: BufRead>(input: R) -> Result<(Vec<String>, Option<bool>), ShadowError> {
    let mut points = Vec::new();
    let mut periodic = None;
    let mut seen_columns = false;
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ShadowError::Csv(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(("periodic", v)) = rest.trim().split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                periodic = Some(v == "true");
            }
            continue;
        }
        if !seen_columns {
            if !line.starts_with("idx,x") {
                return Err(ShadowError::Csv(format!(
                    "line {}: expected header idx,x,defect",
                    lineno + 1
                )));
            }
            seen_columns = true;
            continue;
        }
        let x = line
            .split(',')
            .nth(1)
            .ok_or_else(|| ShadowError::Csv(format!("line {}: missing x", lineno + 1)))?;
        points.push(x.trim().to_string());
    }
    Ok((points, periodic))
}

/// Measure defects, jumps and gamma of a point sequence.
pub fn validate_pseudo_orbit(map: &ExpandingMap, points: &[f64], periodic: bool) -> PseudoOrbit {
    let n = points.len();
    let steps = if periodic { n } else { n.saturating_sub(1) };
    let defects: Vec<f64> = (0..steps)
        .map(|i| circle_dist(map.evaluate(points[i]), points[(i + 1) % n]))
        .collect();
    finish(points.to_vec(), None, defects, periodic)
}

/// As [`validate_pseudo_orbit`], measuring defects exactly when the map is
/// linear.
pub fn validate_exact(map: &ExpandingMap, points: &[Rational], periodic: bool) -> PseudoOrbit {
    let floats: Vec<f64> = points.iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect();
    if !map.is_linear() {
        return validate_pseudo_orbit(map, &floats, periodic);
    }
    let n = points.len();
    let steps = if periodic { n } else { n.saturating_sub(1) };
    let defects: Vec<f64> = (0..steps)
        .map(|i| {
            let img = map.evaluate_exact(points[i]).expect("linear map");
            circle_dist_exact(img, points[(i + 1) % n]).to_f64().unwrap_or(f64::NAN)
        })
        .collect();
    finish(floats, Some(points.to_vec()), defects, periodic)
}

fn finish(points: Vec<f64>, exact: Option<Vec<Rational>>, defects: Vec<f64>, periodic: bool) -> PseudoOrbit {
    let delta = defects.iter().copied().fold(0.0, f64::max);
    let jumps = defects
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > JUMP_TOL)
        .map(|(i, _)| i)
        .collect();
    PseudoOrbit {
        gamma: min_pairwise_distance(&points),
        points,
        exact,
        defects,
        delta,
        jumps,
        periodic,
    }
}

/// Smallest circle distance between two entries, by sorting.
pub fn min_pairwise_distance(points: &[f64]) -> f64 {
    if points.len() < 2 {
        return f64::INFINITY;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = circle_dist(sorted[0], sorted[sorted.len() - 1]);
    for w in sorted.windows(2) {
        best = best.min(circle_dist(w[0], w[1]));
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowResult {
    pub point: f64,
    /// Exact shadowing point for periodic input under a linear map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_point: Option<String>,
    pub orbit: Option<PeriodicOrbit>,
    /// `T^i(y)` for each index of the pseudo-orbit.
    pub trajectory: Vec<f64>,
    /// Inverse branch used at each step.
    pub branches: Vec<usize>,
    pub achieved_bound: f64,
    /// `delta / (1 - lambda)`.
    pub bound: f64,
    pub sweeps: usize,
}

fn nearest_preimage(map: &ExpandingMap, w: f64, target: f64) -> (usize, f64) {
    let mut best = (0, map.inverse_branch(0, w));
    let mut best_d = circle_dist(best.1, target);
    for j in 1..map.branch_count {
        let y = map.inverse_branch(j, w);
        let d = circle_dist(y, target);
        if d < best_d {
            best = (j, y);
            best_d = d;
        }
    }
    best
}

/// Pull `end` back along the pseudo-orbit, at each index taking the
/// preimage nearest the pseudo-orbit point.
fn pull_back(map: &ExpandingMap, points: &[f64], end: f64) -> (Vec<f64>, Vec<usize>) {
    let n = points.len();
    let mut traj = vec![0.0; n];
    let mut branches = vec![0; n];
    let mut w = end;
    for i in (0..n).rev() {
        let (j, y) = nearest_preimage(map, w, points[i]);
        traj[i] = y;
        branches[i] = j;
        w = y;
    }
    (traj, branches)
}

/// A true orbit within `delta / (1 - lambda)` of the pseudo-orbit; a
/// periodic orbit of the same period when the input is periodic.
pub fn shadow(map: &ExpandingMap, po: &PseudoOrbit) -> Result<ShadowResult, ShadowError> {
    if po.points.is_empty() {
        return Err(ShadowError::Empty);
    }
    let limit = (1.0 - map.lambda) * map.e0;
    if !(po.delta < limit) {
        return Err(ShadowError::DeltaTooLarge { delta: po.delta, limit });
    }
    let bound = po.delta / (1.0 - map.lambda);
    let n = po.len();
    if !po.periodic {
        let mut traj = vec![0.0; n];
        let mut branches = vec![0; n];
        traj[n - 1] = po.points[n - 1];
        let mut w = traj[n - 1];
        for i in (0..n - 1).rev() {
            let (j, y) = nearest_preimage(map, w, po.points[i]);
            traj[i] = y;
            branches[i] = j;
            w = y;
        }
        let achieved_bound = max_distance(&traj, &po.points);
        return Ok(ShadowResult {
            point: traj[0],
            exact_point: None,
            orbit: None,
            trajectory: traj,
            branches,
            achieved_bound,
            bound,
            sweeps: 1,
        });
    }

    // Iterate the composed contraction S_{b_0} o ... o S_{b_{n-1}}, whose
    // branches are re-chosen each sweep, to its fixed point.
    let mut y = po.points[0];
    let mut sweeps = 0;
    let (mut traj, mut branches) = pull_back(map, &po.points, y);
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let (t, b) = pull_back(map, &po.points, y);
        let moved = circle_dist(t[0], y);
        y = t[0];
        traj = t;
        branches = b;
        if moved < FIXED_POINT_TOL {
            break;
        }
    }

    if let Some(exact_y) = exact_periodic_point(map, y, n) {
        let mut pts = vec![exact_y];
        for _ in 1..n {
            pts.push(map.evaluate_exact(*pts.last().unwrap()).unwrap());
        }
        let k = Rational::from_integer(map.degree() as i64);
        let branches: Vec<usize> = pts.iter().map(|&p| (p * k).floor().to_integer() as usize).collect();
        let achieved_bound = match &po.exact {
            Some(xs) => pts
                .iter()
                .zip(xs)
                .map(|(a, b)| circle_dist_exact(*a, *b).to_f64().unwrap_or(f64::NAN))
                .fold(0.0, f64::max),
            None => max_distance(&pts.iter().map(|r| r.to_f64().unwrap()).collect::<Vec<_>>(), &po.points),
        };
        let trajectory: Vec<f64> = pts.iter().map(|r| r.to_f64().unwrap()).collect();
        let orbit = PeriodicOrbit::from_exact_point(map, exact_y);
        return Ok(ShadowResult {
            point: trajectory[0],
            exact_point: Some(format!("{}/{}", exact_y.numer(), exact_y.denom())),
            orbit,
            trajectory,
            branches,
            achieved_bound,
            bound,
            sweeps,
        });
    }

    let achieved_bound = max_distance(&traj, &po.points);
    let orbit = Some(prime_cycle(map, &traj));
    Ok(ShadowResult {
        point: y,
        exact_point: None,
        orbit,
        trajectory: traj,
        branches,
        achieved_bound,
        bound,
        sweeps,
    })
}

/// The point of period dividing `n` nearest `y`, for linear maps. Every such
/// point is `j / (k^n - 1)`, so rounding is exact once `y` is converged.
fn exact_periodic_point(map: &ExpandingMap, y: f64, n: usize) -> Option<Rational> {
    if !map.is_linear() {
        return None;
    }
    let den = (map.degree() as i64)
        .checked_pow(u32::try_from(n).ok()?)?
        .checked_sub(1)?;
    // the float fixed point is good to about 1e-14; the spacing must dominate
    if den as f64 > 1e11 {
        return None;
    }
    let j = (y * den as f64).round() as i64 % den;
    Some(Rational::new(j, den))
}

/// The periodic point with the given branch sequence:
/// `y = sum b_i k^(p-1-i) / (k^p - 1)`. `None` on overflow.
pub fn exact_from_branches(map: &ExpandingMap, branches: &[usize]) -> Option<Rational> {
    let k = map.degree() as i64;
    let p = u32::try_from(branches.len()).ok()?;
    let den = k.checked_pow(p)?.checked_sub(1)?;
    let mut num: i64 = 0;
    for &b in branches {
        num = num.checked_mul(k)?.checked_add(b as i64)?;
    }
    Some(Rational::new(num % den, den))
}

/// Reduce a cycle that repeats a shorter block to its prime orbit.
fn prime_cycle(map: &ExpandingMap, cycle: &[f64]) -> PeriodicOrbit {
    let n = cycle.len();
    for p in 1..=n {
        if n.is_multiple_of(p) && (p..n).all(|i| circle_dist(cycle[i], cycle[i % p]) < 1e-10) {
            return PeriodicOrbit::from_cycle(cycle[..p].to_vec(), map.kind);
        }
    }
    PeriodicOrbit::from_cycle(cycle.to_vec(), map.kind)
}

fn max_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| circle_dist(*x, *y)).fold(0.0, f64::max)
}

/// A closed pseudo-orbit cut from a forward orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recurrence {
    /// Index ranges `[start, end)` of the forward orbit that were spliced.
    pub segments: Vec<(usize, usize)>,
    pub orbit: PseudoOrbit,
    #[serde(with = "crate::numfmt")]
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningReport {
    pub length: usize,
    pub delta: f64,
    pub max_jumps: usize,
    /// `|F̄| <= filter_tol` was required at every point, when set.
    pub filter_tol: Option<f64>,
    pub recurrences: Vec<Recurrence>,
}

/// Closed pseudo-orbits made of pieces of the forward orbit of `seed`.
///
/// Each index `i` contributes its first `delta`-return `j`, giving the one-jump
/// segment `[i, j)`. With `max_jumps = 2`, pairs of such segments are also
/// spliced when each one ends within `delta` of the other's start. Results
/// are deduplicated as point sets, sorted by `gamma / delta` descending and
/// truncated to `max_results`.
pub fn mine_recurrences(
    map: &ExpandingMap,
    seed: &OrbitSeed,
    length: usize,
    delta: f64,
    max_jumps: usize,
    filter: Option<(&EffectiveObservable, f64)>,
    max_results: usize,
) -> Result<MiningReport, ShadowError> {
    if !(1..=2).contains(&max_jumps) {
        return Err(ShadowError::BadJumps(max_jumps));
    }
    if length > MAX_MINING_LENGTH {
        return Err(ShadowError::TooLong(length));
    }
    let xs = map.forward_orbit(seed, length);
    let exact = match seed {
        OrbitSeed::Exact(r) => map.forward_orbit_exact(*r, length),
        OrbitSeed::Float(_) => None,
    };
    let allowed: Vec<bool> = match filter {
        Some((eff, tol)) => xs.par_iter().map(|&x| eff.eval(x).abs() <= tol).collect(),
        None => vec![true; xs.len()],
    };
    let returns = first_returns(&xs, delta);
    let usable = |s: usize, e: usize| allowed[s..e].iter().all(|&a| a);

    let mut candidates: Vec<Vec<(usize, usize)>> = returns
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|j| (i, j)))
        .filter(|&(i, j)| usable(i, j))
        .map(|seg| vec![seg])
        .collect();

    if max_jumps == 2 {
        let singles: Vec<(usize, usize)> = candidates.iter().map(|c| c[0]).collect();
        candidates.extend(splice_pairs(&xs, &singles, delta));
    }

    let mut seen = HashSet::new();
    let mut out: Vec<Recurrence> = Vec::new();
    let built: Vec<Recurrence> = candidates
        .par_iter()
        .map(|segs| {
            let orbit = match &exact {
                Some(ex) => {
                    let pts: Vec<Rational> = segs.iter().flat_map(|&(s, e)| ex[s..e].iter().copied()).collect();
                    validate_exact(map, &pts, true)
                }
                None => {
                    let pts: Vec<f64> = segs.iter().flat_map(|&(s, e)| xs[s..e].iter().copied()).collect();
                    validate_pseudo_orbit(map, &pts, true)
                }
            };
            Recurrence {
                segments: segs.clone(),
                ratio: orbit.ratio(),
                orbit,
            }
        })
        .collect();
    for r in built {
        let mut key: Vec<u64> = r.orbit.points.iter().map(|x| x.to_bits()).collect();
        key.sort_unstable();
        if r.orbit.delta <= delta && seen.insert(key) {
            out.push(r);
        }
    }
    out.sort_by(|a, b| {
        b.ratio
            .total_cmp(&a.ratio)
            .then(a.orbit.len().cmp(&b.orbit.len()))
            .then(a.segments.cmp(&b.segments))
    });
    out.truncate(max_results);
    Ok(MiningReport {
        length,
        delta,
        max_jumps,
        filter_tol: filter.map(|(_, t)| t),
        recurrences: out,
    })
}

/// For each index, the first later index whose point is within `delta`.
fn first_returns(xs: &[f64], delta: f64) -> Vec<Option<usize>> {
    let cells = ((1.0 / delta).floor() as usize).clamp(1, 1 << 22);
    let cell_of = |x: f64| ((x * cells as f64) as usize).min(cells - 1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (i, &x) in xs.iter().enumerate() {
        buckets[cell_of(x)].push(i);
    }
    let neighbours = |c: usize| -> Vec<usize> {
        let mut v = vec![(c + cells - 1) % cells, c, (c + 1) % cells];
        v.sort_unstable();
        v.dedup();
        v
    };
    (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let x = xs[i];
            let mut best: Option<usize> = None;
            for c in neighbours(cell_of(x)) {
                let b = &buckets[c];
                let from = b.partition_point(|&j| j <= i);
                for &j in &b[from..] {
                    if best.is_some_and(|bj| j >= bj) {
                        break;
                    }
                    if circle_dist(xs[j], x) <= delta {
                        best = Some(j);
                        break;
                    }
                }
            }
            best
        })
        .collect()
}

/// Two-jump splices: segments `A = [a, a')` and `B = [b, b')` with disjoint
/// index ranges, `d(x_a', x_b) <= delta` and `d(x_b', x_a) <= delta`.
fn splice_pairs(xs: &[f64], singles: &[(usize, usize)], delta: f64) -> Vec<Vec<(usize, usize)>> {
    const MAX_SPLICES: usize = 4096;
    let mut by_start: Vec<(f64, usize)> = singles.iter().enumerate().map(|(n, &(s, _))| (xs[s], n)).collect();
    by_start.sort_by(|a, b| a.0.total_cmp(&b.0));
    let starts: Vec<f64> = by_start.iter().map(|p| p.0).collect();
    let mut out = Vec::new();
    for &(a, a_end) in singles {
        if a_end >= xs.len() {
            continue;
        }
        let target = xs[a_end];
        // candidate B starts within delta of x_{a_end}
        let lo = starts.partition_point(|&s| s < target - delta);
        let hi = starts.partition_point(|&s| s <= target + delta);
        for &(_, nb) in &by_start[lo..hi] {
            let (b, b_end) = singles[nb];
            let disjoint = a_end <= b || b_end <= a;
            if disjoint && b_end < xs.len() && circle_dist(xs[b_end], xs[a]) <= delta {
                out.push(vec![(a, a_end), (b, b_end)]);
                if out.len() >= MAX_SPLICES {
                    return out;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreOrbit {
    /// `z_0, z_{-1}, ..., z_{-depth}`.
    pub points: Vec<f64>,
    /// `|u(z_{-k}) - u(z_{-k-1}) - alpha - F(z_{-k-1})|` for each step.
    pub residuals: Vec<f64>,
    /// Steps at which two preimages tied and the smaller was taken.
    pub ties: Vec<usize>,
}

/// Follow the maximizing preimage of the Lax operator backward from `z`.
pub fn calibrating_preorbit(
    map: &ExpandingMap,
    eff: &EffectiveObservable,
    z: f64,
    depth: usize,
) -> Result<PreOrbit, ShadowError> {
    if depth == 0 {
        return Err(ShadowError::BadDepth);
    }
    let score = |w: f64| eff.obs.eval(w) + eff.u.eval(w);
    let mut points = vec![crate::dynamics::wrap(z)];
    let mut residuals = Vec::with_capacity(depth);
    let mut ties = Vec::new();
    for step in 0..depth {
        let cur = *points.last().unwrap();
        let mut pre: Vec<(f64, f64)> = map.inverse_branches(cur).into_iter().map(|w| (w, score(w))).collect();
        pre.sort_by(|a, b| a.0.total_cmp(&b.0));
        let top = pre.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<&(f64, f64)> = pre.iter().filter(|p| top - p.1 <= TIE_TOL).collect();
        if winners.len() > 1 {
            ties.push(step);
        }
        let (w, s) = *winners[0];
        residuals.push((eff.u.eval(cur) - s - eff.alpha).abs());
        points.push(w);
    }
    Ok(PreOrbit {
        points,
        residuals,
        ties,
    })
}
