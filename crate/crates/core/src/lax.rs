//! Lax operator on a uniform grid, calibrated sub-actions by normalized
//! max-plus power iteration, and the effective observable.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{wrap, ExpandingMap};
use crate::maxsearch::{orbit_average, MaximizationResult};
use crate::observables::{DomainError, Observable};

pub const DEFAULT_GRID: usize = 1 << 14;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

const PAR_MIN_LEN: usize = 1 << 10;

#[derive(Debug, Error)]
pub enum LaxError {
    #[error("grid size {0} is not a power of two >= 2")]
    BadGrid(usize),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no convergence after {} iterations (last step {last_step:e})", result.iterations)]
    NoConvergence {
        result: Box<SubActionResult>,
        last_step: f64,
    },
    #[error("grid csv: {0}")]
    Csv(String),
}

/// Values at `i / n`, interpolated linearly with wraparound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self, LaxError> {
        let n = values.len();
        if n < 2 || !n.is_power_of_two() {
            return Err(LaxError::BadGrid(n));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Result<Self, LaxError> {
        Self::new(vec![0.0; n])
    }

    pub fn sample(n: usize, f: impl Fn(f64) -> f64 + Sync) -> Result<Self, LaxError> {
        let h = 1.0 / n as f64;
        Self::new((0..n).into_par_iter().map(|i| f(i as f64 * h)).collect())
    }

    pub fn grid_point(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    /// Cell index and offset in `[0, 1)` for the point `x`.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        locate(self.n, x)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        interp(&self.values, i, t)
    }

    /// `max |v[i+1] - v[i]| * n`, cyclically.
    pub fn lipschitz(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| (self.values[(i + 1) % n] - self.values[i]).abs())
            .fold(0.0, f64::max)
            * n as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn shifted(&self, c: f64) -> GridFunction {
        GridFunction {
            n: self.n,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// CSV with `# key=value` header lines followed by `i,x,value` rows.
    pub fn write_csv<W: Write>(&self, header: &[(&str, String)], out: W) -> Result<(), LaxError> {
        let mut out = out;
        let io = |e: std::io::Error| LaxError::Csv(e.to_string());
        for (k, v) in header {
            writeln!(out, "# {k}={v}").map_err(io)?;
        }
        writeln!(out, "i,x,value").map_err(io)?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{},{v}", self.grid_point(i)).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Inverse of [`GridFunction::write_csv`]; returns the header pairs too.
    pub fn read_csv<R: BufRead>(input: R) -> Result<(Self, Vec<(String, String)>), LaxError> {
        let bad = |m: String| LaxError::Csv(m);
        let mut header = Vec::new();
        let mut values = Vec::new();
        let mut seen_columns = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    header.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            if !seen_columns {
                if line != "i,x,value" {
                    return Err(bad(format!("line {}: expected header i,x,value", lineno + 1)));
                }
                seen_columns = true;
                continue;
            }
            let mut parts = line.split(',');
            let i: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad index", lineno + 1)))?;
            let v: f64 = parts
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad value", lineno + 1)))?;
            if i != values.len() {
                return Err(bad(format!("line {}: index {i} out of sequence", lineno + 1)));
            }
            values.push(v);
        }
        Ok((Self::new(values)?, header))
    }
}

#[inline]
fn locate(n: usize, x: f64) -> (usize, f64) {
    let t = wrap(x) * n as f64;
    let i = (t.floor() as usize).min(n - 1);
    (i, t - i as f64)
}

#[inline]
fn interp(v: &[f64], i: usize, t: f64) -> f64 {
    if t == 0.0 {
        v[i]
    } else {
        let j = if i + 1 == v.len() { 0 } else { i + 1 };
        v[i] + t * (v[j] - v[i])
    }
}

/// Preimages of every grid point with the observable evaluated there, so
/// that one application of the operator is a pass over flat arrays.
#[derive(Debug, Clone)]
pub struct LaxKernel {
    pub n: usize,
    pub branches: usize,
    cell: Vec<u32>,
    offset: Vec<f64>,
    fval: Vec<f64>,
}

impl LaxKernel {
    pub fn new(map: &ExpandingMap, obs: &Observable, n: usize) -> Result<Self, LaxError> {
        if n < 2 || !n.is_power_of_two() {
            return Err(LaxError::BadGrid(n));
        }
        let k = map.branch_count;
        let rows: Vec<Vec<(u32, f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = i as f64 / n as f64;
                (0..k)
                    .map(|j| {
                        let y = map.inverse_branch(j, x);
                        let (c, t) = locate(n, y);
                        Ok((c as u32, t, obs.try_eval(y)?))
                    })
                    .collect::<Result<Vec<_>, DomainError>>()
            })
            .collect::<Result<_, _>>()?;
        let mut cell = Vec::with_capacity(n * k);
        let mut offset = Vec::with_capacity(n * k);
        let mut fval = Vec::with_capacity(n * k);
        for row in rows {
            for (c, t, f) in row {
                cell.push(c);
                offset.push(t);
                fval.push(f);
            }
        }
        Ok(Self {
            n,
            branches: k,
            cell,
            offset,
            fval,
        })
    }

    /// `max_j F(S_j x_i) + u(S_j x_i)` for every grid point.
    pub fn max_plus(&self, u: &GridFunction) -> Vec<f64> {
        assert_eq!(u.n, self.n, "grid size mismatch");
        let k = self.branches;
        (0..self.n)
            .into_par_iter()
            .with_min_len(PAR_MIN_LEN)
            .map(|i| {
                let mut best = f64::NEG_INFINITY;
                for s in i * k..(i + 1) * k {
                    let v = self.fval[s] + interp(&u.values, self.cell[s] as usize, self.offset[s]);
                    best = best.max(v);
                }
                best
            })
            .collect()
    }

    /// `L_F(u)` for the given `alpha`.
    pub fn apply(&self, u: &GridFunction, alpha: f64) -> GridFunction {
        let values = self.max_plus(u).into_iter().map(|v| v + alpha).collect();
        GridFunction { n: self.n, values }
    }
}

/// One application of the Lax operator with a fixed `alpha`.
pub fn apply_lax(map: &ExpandingMap, obs: &Observable, u: &GridFunction, alpha: f64) -> Result<GridFunction, LaxError> {
    Ok(LaxKernel::new(map, obs, u.n)?.apply(u, alpha))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubActionResult {
    pub u: GridFunction,
    pub alpha_est: f64,
    /// `sup |L_F(u) - u|` with `alpha = alpha_est`.
    pub residual: f64,
    pub iterations: usize,
    pub lip_u: f64,
    pub converged: bool,
}

/// Weight kept on the previous iterate. Without it the iteration cycles
/// whenever the maximizing orbit has period above one.
pub const DAMPING: f64 = 0.5;

/// Normalized damped iteration `u <- D u + (1 - D) M(u) - c` from `u = 0`,
/// with `c` chosen so that `max u = 0`. Fixed points are exactly the
/// normalized solutions of `M(u) = u - alpha`.
pub fn solve_subaction(
    map: &ExpandingMap,
    obs: &Observable,
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SubActionResult, LaxError> {
    if !(tol > 0.0) {
        return Err(LaxError::BadTolerance(tol));
    }
    let kernel = LaxKernel::new(map, obs, n)?;
    let mut u = GridFunction::zeros(n)?;
    let mut defect = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let m = kernel.max_plus(&u);
        let blended: Vec<f64> = m
            .iter()
            .zip(&u.values)
            .map(|(mv, uv)| DAMPING * uv + (1.0 - DAMPING) * mv)
            .collect();
        let c = blended.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let next = GridFunction {
            n,
            values: blended.into_iter().map(|v| v - c).collect(),
        };
        // a step of size s means M(u) - u is within s / (1 - D) of constant
        defect = next.sup_distance(&u) / (1.0 - DAMPING);
        u = next;
        iterations += 1;
        if defect < tol {
            break;
        }
    }
    let m = kernel.max_plus(&u);
    let diffs: Vec<f64> = m.iter().zip(&u.values).map(|(mv, uv)| mv - uv).collect();
    let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha_est = -0.5 * (hi + lo);
    let residual = 0.5 * (hi - lo);
    let result = SubActionResult {
        lip_u: u.lipschitz(),
        u,
        alpha_est,
        residual,
        iterations,
        converged: defect < tol,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(LaxError::NoConvergence {
            result: Box::new(result),
            last_step: defect,
        })
    }
}

/// `F + u - u o T + alpha`, sampled on the grid and evaluable anywhere.
#[derive(Debug, Clone)]
pub struct EffectiveObservable {
    pub fbar: GridFunction,
    pub obs: Observable,
    pub u: GridFunction,
    pub alpha: f64,
    pub map: ExpandingMap,
    pub sup_violation: f64,
}

impl EffectiveObservable {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.obs.eval(x) + self.u.eval(x) - self.u.eval(self.map.evaluate(x)) + self.alpha
    }

    /// Replace `alpha`, e.g. to inject a deliberate error.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        effective_from_parts(&self.map, &self.obs, &self.u, alpha)
    }
}

pub fn effective_observable(obs: &Observable, sub: &SubActionResult, map: &ExpandingMap) -> EffectiveObservable {
    effective_from_parts(map, obs, &sub.u, sub.alpha_est)
}

fn effective_from_parts(map: &ExpandingMap, obs: &Observable, u: &GridFunction, alpha: f64) -> EffectiveObservable {
    let n = u.n;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| {
            let x = i as f64 / n as f64;
            obs.eval(x) + u.values[i] - u.eval(map.evaluate(x)) + alpha
        })
        .collect();
    let fbar = GridFunction { n, values };
    EffectiveObservable {
        sup_violation: fbar.max(),
        fbar,
        obs: obs.clone(),
        u: u.clone(),
        alpha,
        map: *map,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubActionReport {
    pub tol: f64,
    pub sup_violation: CheckItem,
    pub orbit_averages: Vec<CheckItem>,
    pub alpha_agreement: CheckItem,
    pub passed: bool,
}

/// Check that the effective observable is nonpositive, vanishes on average
/// along each maximizing orbit, and carries the brute-force alpha.
pub fn verify_subaction(eff: &EffectiveObservable, max_result: &MaximizationResult, tol: f64) -> SubActionReport {
    let sup_violation = CheckItem {
        name: "sup_violation".into(),
        value: eff.sup_violation,
        passed: eff.sup_violation <= tol,
    };
    let fbar_obs = Observable::custom(std::sync::Arc::new(FbarFn(eff.clone())));
    let orbit_averages: Vec<CheckItem> = max_result
        .argmax_orbits
        .iter()
        .map(|o| {
            let avg = orbit_average(&fbar_obs, o).unwrap_or(f64::NAN);
            let label = o
                .exact_strings()
                .unwrap_or_else(|| o.points.iter().map(|p| p.to_string()).collect())
                .join(",");
            CheckItem {
                name: format!("orbit_average[{label}]"),
                value: avg,
                passed: avg.abs() <= tol,
            }
        })
        .collect();
    let gap = (eff.alpha - max_result.alpha).abs();
    let alpha_agreement = CheckItem {
        name: "alpha_agreement".into(),
        value: gap,
        passed: gap <= tol,
    };
    let passed = sup_violation.passed && alpha_agreement.passed && orbit_averages.iter().all(|c| c.passed);
    SubActionReport {
        tol,
        sup_violation,
        orbit_averages,
        alpha_agreement,
        passed,
    }
}

/// The effective observable as a plain circle function.
#[derive(Debug)]
pub struct FbarFn(pub EffectiveObservable);

impl crate::observables::CircleFunction for FbarFn {
    fn value(&self, x: f64) -> f64 {
        self.0.eval(x)
    }
    fn describe(&self) -> String {
        format!("fbar[{}]", self.0.obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxsearch::{maximize_over_orbits, DEFAULT_TIE_TOL};
    use crate::observables::parse_observable;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn doubling() -> ExpandingMap {
        ExpandingMap::linear(2).unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = GridFunction::sample(8, |x| (TAU * x).sin()).unwrap();
        for i in 0..8 {
            assert_eq!(g.eval(g.grid_point(i)), g.values[i]);
        }
        assert_eq!(g.eval(1.0 + 0.25), g.values[2]);
        let mid = g.eval(15.0 / 16.0);
        assert!((mid - 0.5 * g.values[7]).abs() < 1e-15);
        assert!(GridFunction::zeros(12).is_err());
    }

    #[test]
    fn lax_trivial_examples() {
        let map = doubling();
        let u = GridFunction::zeros(64).unwrap();
        let out = apply_lax(&map, &Observable::constant(3.0), &u, -3.0).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        let out = apply_lax(&map, &Observable::constant(0.0), &u, 0.0).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_subaction() {
        let map = doubling();
        let r = solve_subaction(&map, &Observable::constant(5.0), 1 << 10, 1e-10, 100).unwrap();
        assert_eq!(r.alpha_est, -5.0);
        assert!(r.u.values.iter().all(|&v| v == 0.0));
        assert!(r.residual < 1e-12);
        let eff = effective_observable(&Observable::constant(5.0), &r, &map);
        assert!(eff.fbar.values.iter().all(|&v| v == 0.0));
        assert_eq!(eff.sup_violation, 0.0);
    }

    #[test]
    fn zero_observable_verifies_exactly() {
        let map = doubling();
        let f = Observable::constant(0.0);
        let r = solve_subaction(&map, &f, 1 << 8, 1e-10, 10).unwrap();
        let eff = effective_observable(&f, &r, &map);
        let m = maximize_over_orbits(&map, &f, 3, DEFAULT_TIE_TOL).unwrap();
        let rep = verify_subaction(&eff, &m, 1e-12);
        assert!(rep.passed);
        assert_eq!(rep.sup_violation.value, 0.0);
        assert!(rep.orbit_averages.iter().all(|c| c.value == 0.0));
        assert_eq!(rep.alpha_agreement.value, 0.0);
    }

    #[test]
    fn cosine_subactions_match_brute_force() {
        let map = doubling();
        for (text, alpha) in [("cos(2*pi*x)", -1.0), ("cos(2*pi*(x-0.5))", -0.5)] {
            let f = parse_observable(text).unwrap();
            let r = solve_subaction(&map, &f, DEFAULT_GRID, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert!((r.alpha_est - alpha).abs() < 1e-6, "{text}: {}", r.alpha_est);
            assert!(r.residual < 1e-6);
            let bound = map.lambda * f.lip_bound / (1.0 - map.lambda) + 2.0 * f.lip_bound / r.u.n as f64;
            assert!(r.lip_u <= bound, "{text}: lip {} > {bound}", r.lip_u);
            let out = apply_lax(&map, &f, &r.u, r.alpha_est).unwrap();
            assert!(out.sup_distance(&r.u) < 1e-6);

            let eff = effective_observable(&f, &r, &map);
            assert!(eff.sup_violation <= 1e-5, "{text}: {}", eff.sup_violation);
            let m = maximize_over_orbits(&map, &f, 12, DEFAULT_TIE_TOL).unwrap();
            for o in &m.argmax_orbits {
                for &x in &o.points {
                    assert!(eff.eval(x) >= -1e-5, "{text}: fbar({x}) = {}", eff.eval(x));
                }
            }
            let rep = verify_subaction(&eff, &m, 1e-5);
            assert!(rep.passed, "{rep:?}");

            let wrong = eff.with_alpha(eff.alpha + 0.1);
            let rep = verify_subaction(&wrong, &m, 1e-5);
            assert!(!rep.sup_violation.passed);
            assert!((rep.sup_violation.value - 0.1).abs() < 1e-5);
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = GridFunction::sample(16, |x| (TAU * x).cos() / 3.0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&[("n", "16".into()), ("map", "linear:k=2".into())], &mut buf)
            .unwrap();
        let (back, header) = GridFunction::read_csv(&buf[..]).unwrap();
        assert_eq!(back, g);
        assert_eq!(header[1], ("map".to_string(), "linear:k=2".to_string()));
    }

    fn random_pl(n: usize, seeds: &[f64]) -> GridFunction {
        GridFunction::new((0..n).map(|i| seeds[i % seeds.len()] * ((i * 7 % 13) as f64)).collect()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lax_is_monotone_and_equivariant(
            a in prop::collection::vec(-1.0f64..1.0, 1..8),
            d in prop::collection::vec(0.0f64..1.0, 1..8),
            c in -3.0f64..3.0,
        ) {
            let map = doubling();
            let f = parse_observable("cos(2*pi*x) + 0.3*cos(4*pi*x)").unwrap();
            let kernel = LaxKernel::new(&map, &f, 256).unwrap();
            let u = random_pl(256, &a);
            let v = GridFunction::new(
                u.values.iter().enumerate().map(|(i, x)| x + d[i % d.len()]).collect(),
            ).unwrap();
            let lu = kernel.apply(&u, -0.7);
            let lv = kernel.apply(&v, -0.7);
            for (x, y) in lu.values.iter().zip(&lv.values) {
                prop_assert!(x <= y);
            }
            let shifted = kernel.apply(&u.shifted(c), -0.7);
            let expect = lu.shifted(c);
            for (x, y) in shifted.values.iter().zip(&expect.values) {
                prop_assert!((x - y).abs() <= 1e-13);
            }
        }

        #[test]
        fn lax_contracts_lipschitz_constants(
            a in prop::collection::vec(-1.0f64..1.0, 1..8),
            log_n in 6u32..12,
        ) {
            let map = doubling();
            let n = 1usize << log_n;
            let f = Observable::cosine(0.2);
            let u = random_pl(n, &a);
            let lu = apply_lax(&map, &f, &u, 0.0).unwrap();
            let s = 2.0 * std::f64::consts::PI + u.lipschitz();
            prop_assert!(lu.lipschitz() <= map.lambda * s + 2.0 * s / n as f64 + 1e-9);
        }
    }
}
