//! Orbit averages, brute-force search for maximizing periodic orbits, and
//! the theta sweep of the cosine family.

use std::io::Write;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, ExpandingMap, MapKind, PeriodicOrbit, Rational};
use crate::observables::{DomainError, Observable};

pub const DEFAULT_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MaxSearchError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("rotation numbers need the doubling map, got {0}")]
    UnsupportedMap(MapKind),
    #[error("theta grid must be sorted inside [0, 1)")]
    BadThetaGrid,
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaximizationResult {
    pub alpha: f64,
    pub argmax_orbits: Vec<PeriodicOrbit>,
    /// Best average minus the best average outside the tie class. Infinite
    /// when a single orbit was searched, zero when every orbit ties.
    #[serde(with = "crate::numfmt")]
    pub runner_up_gap: f64,
    pub max_period_searched: usize,
    pub tie_tol: f64,
    pub orbits_searched: usize,
}

impl MaximizationResult {
    pub fn is_unique(&self) -> bool {
        self.argmax_orbits.len() == 1 && self.runner_up_gap > self.tie_tol
    }
}

/// Mean of `obs` over the points of `orbit`.
pub fn orbit_average(obs: &Observable, orbit: &PeriodicOrbit) -> Result<f64, DomainError> {
    let mut sum = 0.0;
    for &x in &orbit.points {
        sum += obs.try_eval(x)?;
    }
    Ok(sum / orbit.period as f64)
}

/// Search every prime orbit of period at most `max_period`.
pub fn maximize_over_orbits(
    map: &ExpandingMap,
    obs: &Observable,
    max_period: usize,
    tie_tol: f64,
) -> Result<MaximizationResult, MaxSearchError> {
    let orbits = map.prime_orbits(max_period)?;
    maximize_among(&orbits, obs, max_period, tie_tol)
}

/// Maximize over a precomputed candidate list (already in canonical order).
pub fn maximize_among(
    orbits: &[PeriodicOrbit],
    obs: &Observable,
    max_period: usize,
    tie_tol: f64,
) -> Result<MaximizationResult, MaxSearchError> {
    let averages: Vec<f64> = orbits
        .par_iter()
        .map(|o| orbit_average(obs, o))
        .collect::<Result<_, _>>()?;
    let best = averages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut argmax = Vec::new();
    let mut runner_up = f64::NEG_INFINITY;
    for (o, &avg) in orbits.iter().zip(&averages) {
        if best - avg <= tie_tol {
            argmax.push(o.clone());
        } else {
            runner_up = runner_up.max(avg);
        }
    }
    let runner_up_gap = if runner_up > f64::NEG_INFINITY {
        best - runner_up
    } else if argmax.len() == 1 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(MaximizationResult {
        alpha: -best,
        argmax_orbits: argmax,
        runner_up_gap,
        max_period_searched: max_period,
        tie_tol,
        orbits_searched: orbits.len(),
    })
}

/// Frequency of points in `[1/2, 1)`, i.e. of the symbol 1 in the binary
/// itinerary.
pub fn rotation_number(orbit: &PeriodicOrbit) -> Result<Rational, MaxSearchError> {
    if orbit.map != (MapKind::Linear { k: 2 }) {
        return Err(MaxSearchError::UnsupportedMap(orbit.map));
    }
    let half = Rational::new(1, 2);
    let ones = match &orbit.exact {
        Some(pts) => pts.iter().filter(|&&r| r >= half).count(),
        None => orbit.points.iter().filter(|&&x| x >= 0.5).count(),
    };
    Ok(Ratio::new(ones as i64, orbit.period as i64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub period: usize,
    pub rotation_num: i64,
    pub rotation_den: i64,
    pub alpha: f64,
    #[serde(with = "crate::numfmt")]
    pub runner_up_gap: f64,
}

/// Maximize `cos(2 pi (x - theta))` for each theta of the grid.
pub fn theta_sweep(
    map: &ExpandingMap,
    theta_grid: &[f64],
    max_period: usize,
    tie_tol: f64,
) -> Result<Vec<SweepRow>, MaxSearchError> {
    if map.kind != (MapKind::Linear { k: 2 }) {
        return Err(MaxSearchError::UnsupportedMap(map.kind));
    }
    if theta_grid.iter().any(|t| !(0.0..1.0).contains(t)) || theta_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MaxSearchError::BadThetaGrid);
    }
    let orbits = map.prime_orbits(max_period)?;
    theta_grid
        .iter()
        .map(|&theta| {
            let res = maximize_among(&orbits, &Observable::cosine(theta), max_period, tie_tol)?;
            let first = &res.argmax_orbits[0];
            let rho = rotation_number(first)?;
            Ok(SweepRow {
                theta,
                period: first.period,
                rotation_num: *rho.numer(),
                rotation_den: *rho.denom(),
                alpha: res.alpha,
                runner_up_gap: res.runner_up_gap,
            })
        })
        .collect()
}

/// `count` evenly spaced values from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), MaxSearchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::parse_observable;

    fn doubling() -> ExpandingMap {
        ExpandingMap::linear(2).unwrap()
    }

    fn exact_orbit(p: i64, q: i64) -> PeriodicOrbit {
        PeriodicOrbit::from_exact_point(&doubling(), Rational::new(p, q)).unwrap()
    }

    /// Straight brute force: average of cos(2 pi (x - theta)) at every
    /// rational j / (2^p - 1), orbit by orbit, in f64 with no shared code.
    fn oracle_best(theta: f64, max_p: u32) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for p in 1..=max_p {
            let m = (1u64 << p) - 1;
            for j in 0..m {
                let mut x = j;
                let mut sum = 0.0;
                for _ in 0..p {
                    sum += (std::f64::consts::TAU * (x as f64 / m as f64 - theta)).cos();
                    x = (2 * x) % m;
                }
                best = best.max(sum / p as f64);
            }
        }
        best
    }

    #[test]
    fn orbit_average_examples() {
        let f = Observable::cosine(0.0);
        assert_eq!(orbit_average(&f, &exact_orbit(0, 1)).unwrap(), 1.0);
        let g = Observable::cosine(0.5);
        let two = exact_orbit(1, 3);
        assert!((orbit_average(&g, &two).unwrap() - 0.5).abs() < 1e-15);
        let c = Observable::constant(2.5);
        assert_eq!(orbit_average(&c, &exact_orbit(1, 7)).unwrap(), 2.5);
    }

    #[test]
    fn maximize_examples() {
        let map = doubling();
        let r = maximize_over_orbits(&map, &Observable::cosine(0.0), 12, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(r.argmax_orbits.len(), 1);
        assert_eq!(r.argmax_orbits[0].exact_strings().unwrap(), vec!["0/1"]);
        assert_eq!(r.alpha, -1.0);
        assert!(r.is_unique());

        let r = maximize_over_orbits(&map, &Observable::cosine(0.5), 12, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(r.argmax_orbits[0].exact_strings().unwrap(), vec!["1/3", "2/3"]);
        assert!((r.alpha + 0.5).abs() < 1e-12);
        assert!((r.alpha + oracle_best(0.5, 12)).abs() < 1e-12);
        assert!(r.is_unique());

        let r = maximize_over_orbits(&map, &Observable::constant(0.0), 3, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(r.argmax_orbits.len(), 4);
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.runner_up_gap, 0.0);
    }

    #[test]
    fn period_three_competitors() {
        let g = Observable::cosine(0.5);
        for (p, q) in [(1, 7), (3, 7)] {
            let avg = orbit_average(&g, &exact_orbit(p, q)).unwrap();
            assert!(avg < 0.5, "{p}/{q}: {avg}");
        }
    }

    #[test]
    fn agrees_with_oracle_on_random_thetas() {
        let map = doubling();
        let orbits = map.prime_orbits(10).unwrap();
        for i in 0..20 {
            let theta = (i as f64 * 0.618_033_988_7).fract();
            let r = maximize_among(&orbits, &Observable::cosine(theta), 10, DEFAULT_TIE_TOL).unwrap();
            assert!((r.alpha + oracle_best(theta, 10)).abs() < 1e-12, "theta {theta}");
        }
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_number(&exact_orbit(0, 1)).unwrap(), Rational::new(0, 1));
        assert_eq!(rotation_number(&exact_orbit(1, 3)).unwrap(), Rational::new(1, 2));
        assert_eq!(rotation_number(&exact_orbit(1, 7)).unwrap(), Rational::new(1, 3));
        let three = ExpandingMap::linear(3).unwrap();
        let o = PeriodicOrbit::from_exact_point(&three, Rational::new(1, 2)).unwrap();
        assert!(matches!(rotation_number(&o), Err(MaxSearchError::UnsupportedMap(_))));
    }

    #[test]
    fn adding_constant_keeps_argmax() {
        let map = doubling();
        let f = parse_observable("cos(2*pi*x) + 0.3*cos(4*pi*x)").unwrap();
        let g = parse_observable("cos(2*pi*x) + 0.3*cos(4*pi*x) + 7").unwrap();
        let a = maximize_over_orbits(&map, &f, 8, DEFAULT_TIE_TOL).unwrap();
        let b = maximize_over_orbits(&map, &g, 8, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(a.argmax_orbits, b.argmax_orbits);
        assert!((a.alpha - b.alpha - 7.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_nonincreasing_in_period() {
        let map = doubling();
        let f = Observable::cosine(0.37);
        let mut last = f64::INFINITY;
        for p in 1..=10 {
            let r = maximize_over_orbits(&map, &f, p, DEFAULT_TIE_TOL).unwrap();
            assert!(r.alpha <= last);
            last = r.alpha;
        }
    }

    #[test]
    fn sweep_is_monotone() {
        let rows = theta_sweep(&doubling(), &linspace(0.0, 0.5, 101), 12, DEFAULT_TIE_TOL).unwrap();
        assert_eq!(rows.len(), 101);
        assert_eq!((rows[0].rotation_num, rows[0].rotation_den), (0, 1));
        let last = rows.last().unwrap();
        assert_eq!((last.rotation_num, last.rotation_den), (1, 2));
        assert!((last.alpha + 0.5).abs() < 1e-12);
        for w in rows.windows(2) {
            let a = w[0].rotation_num as f64 / w[0].rotation_den as f64;
            let b = w[1].rotation_num as f64 / w[1].rotation_den as f64;
            assert!(a <= b, "theta {} -> {}", w[0].theta, w[1].theta);
        }
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta,period,rotation_num,rotation_den,alpha,runner_up_gap\n"));
        assert_eq!(text.lines().count(), 102);
    }

    #[test]
    fn result_json_round_trip() {
        let r = maximize_over_orbits(&doubling(), &Observable::cosine(0.5), 6, DEFAULT_TIE_TOL).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"1/3\""));
        let back: MaximizationResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back.argmax_orbits, r.argmax_orbits);
        assert_eq!(back.alpha, r.alpha);
    }
}
