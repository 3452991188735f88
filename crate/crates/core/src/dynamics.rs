//! Expanding circle maps, their inverse branches and periodic structure.
//!
//! Two families are supported: the linear k-adic map `x -> kx mod 1` and the
//! perturbed map `x -> kx + a sin(2 pi x) mod 1`. Periodic points of the linear
//! family are enumerated in exact rational arithmetic; the perturbed family
//! continues them in `a` with Newton's method.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact circle point for the linear maps.
pub type Rational = Ratio<i64>;

/// Default cap on `k^p - 1` for periodic point enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 24;

/// Residual target for inverse branches of perturbed maps.
pub const BRANCH_TOL: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("degree k = {0} is not an expanding degree (need k >= 2)")]
    InvalidDegree(u32),
    #[error("map with k = {k}, a = {a} is not expanding: |2 pi a| must be < k - 1")]
    NonExpanding { k: u32, a: f64 },
    #[error("period {period} needs {count} candidate points, above the enumeration cap {cap}")]
    PeriodTooLarge { period: usize, count: u128, cap: u64 },
    #[error("invalid map specification {0:?}: expected \"linear:k=2\" or \"perturbed:k=2,a=0.05\"")]
    BadSpec(String),
    #[error("invalid circle point {0:?}")]
    BadPoint(String),
}

/// Reduce a real number to the fundamental domain `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `x - y` in `[-1/2, 1/2)`.
#[inline]
pub fn signed_diff(x: f64, y: f64) -> f64 {
    let d = wrap(x - y);
    if d >= 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// The circle metric `min(|x - y|, 1 - |x - y|)`.
#[inline]
pub fn circle_dist(x: f64, y: f64) -> f64 {
    let d = (x - y).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Exact circle metric on rationals.
pub fn circle_dist_exact(x: Rational, y: Rational) -> Rational {
    let one = Rational::from_integer(1);
    let mut d = (x - y).abs();
    d = d - d.floor();
    if d > one - d {
        one - d
    } else {
        d
    }
}

fn wrap_exact(x: Rational) -> Rational {
    x - x.floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum MapKind {
    Linear { k: u32 },
    Perturbed { k: u32, a: f64 },
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapKind::Linear { k } => write!(f, "linear:k={k}"),
            MapKind::Perturbed { k, a } => write!(f, "perturbed:k={k},a={a}"),
        }
    }
}

/// A uniformly expanding circle map with explicit inverse branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpandingMap {
    pub kind: MapKind,
    /// Contraction factor of every inverse branch.
    pub lambda: f64,
    /// Lipschitz constant of the map itself.
    pub lip_t: f64,
    /// Number of preimages of every point.
    pub branch_count: usize,
    /// Radius of the balls on which all inverse branches are defined.
    pub e0: f64,
    pub enumeration_cap: u64,
}

impl ExpandingMap {
    pub fn linear(k: u32) -> Result<Self, DynamicsError> {
        if k < 2 {
            return Err(DynamicsError::InvalidDegree(k));
        }
        Ok(Self {
            kind: MapKind::Linear { k },
            lambda: 1.0 / k as f64,
            lip_t: k as f64,
            branch_count: k as usize,
            e0: 0.5,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn perturbed(k: u32, a: f64) -> Result<Self, DynamicsError> {
        if k < 2 {
            return Err(DynamicsError::InvalidDegree(k));
        }
        if !a.is_finite() || (TAU * a).abs() >= k as f64 - 1.0 {
            return Err(DynamicsError::NonExpanding { k, a });
        }
        if a == 0.0 {
            return Self::linear(k);
        }
        let spread = TAU * a.abs();
        Ok(Self {
            kind: MapKind::Perturbed { k, a },
            lambda: 1.0 / (k as f64 - spread),
            lip_t: k as f64 + spread,
            branch_count: k as usize,
            e0: 0.5,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn with_enumeration_cap(mut self, cap: u64) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn degree(&self) -> u32 {
        match self.kind {
            MapKind::Linear { k } | MapKind::Perturbed { k, .. } => k,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, MapKind::Linear { .. })
    }

    /// The lift `R -> R` restricted to `[0, 1]`, increasing from 0 to k.
    #[inline]
    fn lift(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::Linear { k } => k as f64 * x,
            MapKind::Perturbed { k, a } => k as f64 * x + a * (TAU * x).sin(),
        }
    }

    #[inline]
    fn lift_derivative(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::Linear { k } => k as f64,
            MapKind::Perturbed { k, a } => k as f64 + TAU * a * (TAU * x).cos(),
        }
    }

    /// `T(x)` reduced mod 1.
    #[inline]
    pub fn evaluate(&self, x: f64) -> f64 {
        wrap(self.lift(wrap(x)))
    }

    /// Index of the monotone branch containing `x`, i.e. `floor(lift(x))`.
    pub fn branch_index(&self, x: f64) -> usize {
        let k = self.degree() as usize;
        (self.lift(wrap(x)).floor().max(0.0) as usize).min(k - 1)
    }

    /// The preimage of `x` on branch `i` (the solution of `lift(w) = x + i`).
    pub fn inverse_branch(&self, i: usize, x: f64) -> f64 {
        let x = wrap(x);
        match self.kind {
            MapKind::Linear { k } => wrap((x + i as f64) / k as f64),
            MapKind::Perturbed { k, a } => {
                let target = x + i as f64;
                let kf = k as f64;
                let mut lo = ((target - a.abs()) / kf).max(0.0);
                let mut hi = ((target + a.abs()) / kf).min(1.0);
                let mut w = target / kf;
                for _ in 0..200 {
                    let r = self.lift(w) - target;
                    if r.abs() <= BRANCH_TOL {
                        break;
                    }
                    if r > 0.0 {
                        hi = w;
                    } else {
                        lo = w;
                    }
                    let next = w - r / self.lift_derivative(w);
                    w = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
                    if hi - lo < 1e-16 {
                        break;
                    }
                }
                wrap(w)
            }
        }
    }

    /// All preimages of `x`, sorted ascending.
    pub fn inverse_branches(&self, x: f64) -> Vec<f64> {
        (0..self.branch_count).map(|i| self.inverse_branch(i, x)).collect()
    }

    /// Exact image of a rational point (linear maps only).
    pub fn evaluate_exact(&self, x: Rational) -> Option<Rational> {
        match self.kind {
            MapKind::Linear { k } => Some(wrap_exact(x * Rational::from_integer(k as i64))),
            MapKind::Perturbed { .. } => None,
        }
    }

    fn check_period(&self, p: usize) -> Result<u64, DynamicsError> {
        let k = self.degree() as u128;
        let count = k.checked_pow(p as u32).map(|v| v - 1).unwrap_or(u128::MAX);
        if p == 0 || count > self.enumeration_cap as u128 {
            return Err(DynamicsError::PeriodTooLarge {
                period: p,
                count,
                cap: self.enumeration_cap,
            });
        }
        Ok(count as u64)
    }

    /// All solutions of `T^p(x) = x` for the linear map, `j / (k^p - 1)`.
    pub fn periodic_points_exact(&self, p: usize) -> Result<Vec<Rational>, DynamicsError> {
        let m = self.check_period(p)?;
        if !self.is_linear() {
            return Err(DynamicsError::BadSpec(format!(
                "exact periodic points need a linear map, got {}",
                self.kind
            )));
        }
        Ok((0..m).map(|j| Rational::new(j as i64, m as i64)).collect())
    }

    /// All solutions of `T^p(x) = x`, in ascending order.
    pub fn periodic_points(&self, p: usize) -> Result<Vec<f64>, DynamicsError> {
        let m = self.check_period(p)?;
        let linear: Vec<f64> = (0..m).map(|j| j as f64 / m as f64).collect();
        if self.is_linear() {
            return Ok(linear);
        }
        let mut pts: Vec<f64> = linear.iter().map(|&x| self.continue_periodic(x, p)).collect();
        pts.sort_by(|a, b| a.total_cmp(b));
        Ok(pts)
    }

    /// Every prime-period orbit with period at most `max_period`, ordered by
    /// (period, smallest point).
    pub fn prime_orbits(&self, max_period: usize) -> Result<Vec<PeriodicOrbit>, DynamicsError> {
        let k = self.degree() as u64;
        let mut out = Vec::new();
        for p in 1..=max_period {
            let m = self.check_period(p)?;
            for j in 0..m {
                if let Some(nums) = canonical_cycle(j, k, m, p) {
                    let exact: Vec<Rational> = nums.iter().map(|&n| Rational::new(n as i64, m as i64)).collect();
                    let linear: Vec<f64> = nums.iter().map(|&n| n as f64 / m as f64).collect();
                    let orbit = if self.is_linear() {
                        PeriodicOrbit {
                            period: p,
                            points: linear,
                            exact: Some(exact),
                            map: self.kind,
                        }
                    } else {
                        let pts: Vec<f64> = linear.iter().map(|&x| self.continue_periodic(x, p)).collect();
                        PeriodicOrbit::from_cycle(pts, self.kind)
                    };
                    out.push(orbit);
                }
            }
        }
        if !self.is_linear() {
            // continuation can move representatives past each other
            out.sort_by(|a, b| a.period.cmp(&b.period).then(a.points[0].total_cmp(&b.points[0])));
        }
        Ok(out)
    }

    /// Continue a period-`p` point of the linear map to the perturbed map by
    /// a homotopy in the perturbation amplitude, polishing with Newton.
    fn continue_periodic(&self, x_linear: f64, p: usize) -> f64 {
        let (k, a) = match self.kind {
            MapKind::Linear { .. } => return x_linear,
            MapKind::Perturbed { k, a } => (k, a),
        };
        const STEPS: usize = 16;
        let mut x = x_linear;
        let mut ok = true;
        for s in 1..=STEPS {
            let map = ExpandingMap {
                kind: MapKind::Perturbed {
                    k,
                    a: a * s as f64 / STEPS as f64,
                },
                ..*self
            };
            match map.newton_periodic(x, p) {
                Some(next) => x = next,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        // the itinerary of the linear point pins down the perturbed one
        let digits = itinerary_digits(&ExpandingMap::linear(k).expect("k >= 2"), x_linear, p);
        if ok && self.periodic_residual(x, p) <= 1e-12 && itinerary_digits(self, x, p) == digits {
            return x;
        }
        self.fixed_point_of_branches(&digits, x_linear)
    }

    fn newton_periodic(&self, mut x: f64, p: usize) -> Option<f64> {
        for _ in 0..60 {
            let mut y = x;
            let mut deriv = 1.0;
            for _ in 0..p {
                deriv *= self.lift_derivative(y);
                y = self.evaluate(y);
            }
            let g = signed_diff(y, x);
            if g.abs() <= 1e-15 {
                return Some(x);
            }
            let step = g / (deriv - 1.0);
            if !step.is_finite() || step.abs() > 0.5 {
                return None;
            }
            x = wrap(x - step);
        }
        (self.periodic_residual(x, p) <= 1e-12).then_some(x)
    }

    fn periodic_residual(&self, x: f64, p: usize) -> f64 {
        let mut y = x;
        for _ in 0..p {
            y = self.evaluate(y);
        }
        circle_dist(x, y)
    }

    /// Fixed point of `S_{d_0} o S_{d_1} o ... o S_{d_{p-1}}`: the periodic
    /// point whose branch itinerary is `digits`.
    pub fn fixed_point_of_branches(&self, digits: &[usize], start: f64) -> f64 {
        let mut y = wrap(start);
        for _ in 0..10_000 {
            let mut z = y;
            for &d in digits.iter().rev() {
                z = self.inverse_branch(d, z);
            }
            let moved = circle_dist(z, y);
            y = z;
            if moved < 1e-15 {
                break;
            }
        }
        y
    }

    /// Exact forward orbit of a rational point under a linear map, or `None`
    /// for perturbed maps.
    pub fn forward_orbit_exact(&self, x: Rational, len: usize) -> Option<Vec<Rational>> {
        let MapKind::Linear { k } = self.kind else {
            return None;
        };
        let x = wrap_exact(x);
        let den = *x.denom() as i128;
        let mut num = *x.numer() as i128;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(Rational::new_raw(num as i64, den as i64));
            num = (num * k as i128) % den;
        }
        Some(out)
    }

    /// Forward orbit of `seed` of the given length.
    pub fn forward_orbit(&self, seed: &OrbitSeed, len: usize) -> Vec<f64> {
        self.orbit_iter(seed).take(len).collect()
    }

    /// Endless forward orbit of `seed`. Exact seeds under linear maps are
    /// iterated in integer arithmetic and rounded once per point.
    pub fn orbit_iter(&self, seed: &OrbitSeed) -> OrbitIter {
        match (seed, self.kind) {
            (OrbitSeed::Exact(r), MapKind::Linear { k }) => {
                let r = wrap_exact(*r);
                OrbitIter::Exact {
                    num: *r.numer() as u128,
                    den: *r.denom() as u128,
                    k: k as u128,
                }
            }
            _ => OrbitIter::Float {
                map: *self,
                x: wrap(seed.to_f64()),
            },
        }
    }
}

pub enum OrbitIter {
    Exact { num: u128, den: u128, k: u128 },
    Float { map: ExpandingMap, x: f64 },
}

impl Iterator for OrbitIter {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        match self {
            OrbitIter::Exact { num, den, k } => {
                let out = *num as f64 / *den as f64;
                *num = (*num * *k) % *den;
                Some(out)
            }
            OrbitIter::Float { map, x } => {
                let out = *x;
                *x = map.evaluate(*x);
                Some(out)
            }
        }
    }
}

impl FromStr for ExpandingMap {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DynamicsError::BadSpec(s.to_string());
        let (family, params) = s.trim().split_once(':').ok_or_else(bad)?;
        let mut k = None;
        let mut a = None;
        for kv in params.split(',') {
            let (key, val) = kv.split_once('=').ok_or_else(bad)?;
            match key.trim() {
                "k" => k = Some(val.trim().parse::<u32>().map_err(|_| bad())?),
                "a" => a = Some(val.trim().parse::<f64>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let k = k.ok_or_else(bad)?;
        match (family.trim(), a) {
            ("linear", None) => ExpandingMap::linear(k),
            ("perturbed", Some(a)) => ExpandingMap::perturbed(k, a),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ExpandingMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

/// Starting point of an orbit simulation.
///
/// Floating seeds under the linear maps are dyadic rationals and collapse to
/// 0 after about 53 doublings; decimal seeds should be given exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrbitSeed {
    Exact(Rational),
    Float(f64),
}

impl OrbitSeed {
    pub fn to_f64(&self) -> f64 {
        match self {
            OrbitSeed::Exact(r) => wrap(r.to_f64().unwrap_or(0.0)),
            OrbitSeed::Float(x) => wrap(*x),
        }
    }
}

impl FromStr for OrbitSeed {
    type Err = DynamicsError;

    /// Accepts `p/q`, decimals such as `0.1234567` (parsed exactly), or
    /// anything else `f64` parses.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rational(s).map(OrbitSeed::Exact).or_else(|_| {
            s.trim()
                .parse::<f64>()
                .map(OrbitSeed::Float)
                .map_err(|_| DynamicsError::BadPoint(s.to_string()))
        })
    }
}

/// Parse `p/q` or a plain decimal into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational, DynamicsError> {
    let s = s.trim();
    let bad = || DynamicsError::BadPoint(s.to_string());
    if let Some((p, q)) = s.split_once('/') {
        let p: i64 = p.trim().parse().map_err(|_| bad())?;
        let q: i64 = q.trim().parse().map_err(|_| bad())?;
        if q == 0 {
            return Err(bad());
        }
        return Ok(Rational::new(p, q));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty()
        || !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
        || frac_part.len() > 17
    {
        return Err(bad());
    }
    let den = 10i64.pow(frac_part.len() as u32);
    let ip: i64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| bad())?
    };
    let fp: i64 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().map_err(|_| bad())?
    };
    let num = ip.checked_mul(den).and_then(|v| v.checked_add(fp)).ok_or_else(bad)?;
    Ok(Rational::new(if neg { -num } else { num }, den))
}

/// Numerators of the cycle of `j` under `n -> k n mod m`, when `j` is the
/// smallest element of a cycle of exact length `p`.
fn canonical_cycle(j: u64, k: u64, m: u64, p: usize) -> Option<Vec<u64>> {
    let mut nums = Vec::with_capacity(p);
    nums.push(j);
    let mut c = j;
    for _ in 1..p {
        c = ((c as u128 * k as u128) % m as u128) as u64;
        if c <= j {
            return None;
        }
        nums.push(c);
    }
    let back = ((c as u128 * k as u128) % m as u128) as u64;
    (back == j).then_some(nums)
}

pub fn itinerary_digits(map: &ExpandingMap, x: f64, p: usize) -> Vec<usize> {
    let mut y = x;
    (0..p)
        .map(|_| {
            let d = map.branch_index(y);
            y = map.evaluate(y);
            d
        })
        .collect()
}

/// A periodic orbit listed from its smallest point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub period: usize,
    pub points: Vec<f64>,
    /// Exact points for orbits of the linear maps, as `p/q` strings in JSON.
    #[serde(default, with = "exact_points", skip_serializing_if = "Option::is_none")]
    pub exact: Option<Vec<Rational>>,
    pub map: MapKind,
}

impl PeriodicOrbit {
    /// Build an orbit from consecutive cycle points, rotating so the
    /// smallest point comes first.
    pub fn from_cycle(points: Vec<f64>, map: MapKind) -> Self {
        let start = points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut pts = points;
        pts.rotate_left(start);
        Self {
            period: pts.len(),
            points: pts,
            exact: None,
            map,
        }
    }

    /// Build an exact orbit from consecutive rational cycle points.
    pub fn from_exact_cycle(points: Vec<Rational>, map: MapKind) -> Self {
        let start = points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut exact = points;
        exact.rotate_left(start);
        let points = exact.iter().map(|r| r.to_f64().unwrap_or(0.0)).collect();
        Self {
            period: exact.len(),
            points,
            exact: Some(exact),
            map,
        }
    }

    /// The exact orbit of a rational periodic point of a linear map.
    pub fn from_exact_point(map: &ExpandingMap, x: Rational) -> Option<Self> {
        let mut pts = vec![wrap_exact(x)];
        loop {
            let next = map.evaluate_exact(*pts.last()?)?;
            if next == pts[0] {
                break;
            }
            if pts.len() > 1 << 20 {
                return None;
            }
            pts.push(next);
        }
        Some(Self::from_exact_cycle(pts, map.kind))
    }

    pub fn representative(&self) -> f64 {
        self.points[0]
    }

    /// Distance from `x` to the nearest orbit point.
    pub fn distance_to(&self, x: f64) -> f64 {
        self.points
            .iter()
            .map(|&y| circle_dist(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether two orbits consist of the same points (exactly when both are
    /// rational, else within `tol`).
    pub fn same_orbit(&self, other: &PeriodicOrbit, tol: f64) -> bool {
        if self.period != other.period {
            return false;
        }
        if let (Some(a), Some(b)) = (&self.exact, &other.exact) {
            return a == b;
        }
        self.points
            .iter()
            .zip(&other.points)
            .all(|(a, b)| circle_dist(*a, *b) <= tol)
    }

    /// Points as `p/q` strings when exact.
    pub fn exact_strings(&self) -> Option<Vec<String>> {
        self.exact
            .as_ref()
            .map(|v| v.iter().map(|r| format!("{}/{}", r.numer(), r.denom())).collect())
    }
}

/// Number of prime orbits of period `p` for the degree-`k` circle map: the
/// necklace count, except that the two constant words collapse onto one
/// fixed point when `k = 2` (more generally `k - 1` fixed points).
pub fn prime_orbit_count(k: u64, p: usize) -> u64 {
    let mut total: i128 = 0;
    for d in 1..=p {
        if p.is_multiple_of(d) {
            total += mobius(p / d) as i128 * ((k as i128).pow(d as u32) - 1);
        }
    }
    (total / p as i128) as u64
}

fn mobius(n: usize) -> i32 {
    let mut n = n;
    let mut result = 1;
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            n /= d;
            if n.is_multiple_of(d) {
                return 0;
            }
            result = -result;
        }
        d += 1;
    }
    if n > 1 {
        result = -result;
    }
    result
}

mod exact_points {
    use super::{parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<Rational>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(pts) => s.collect_seq(pts.iter().map(|r| format!("{}/{}", r.numer(), r.denom()))),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Rational>>, D::Error> {
        let raw: Option<Vec<String>> = Option::deserialize(d)?;
        raw.map(|v| {
            v.iter()
                .map(|t| parse_rational(t).map_err(serde::de::Error::custom))
                .collect()
        })
        .transpose()
    }
}
