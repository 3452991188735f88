//! Real-valued observables on the circle with sampled regularity data.

pub mod expr;

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::wrap;
pub use expr::{DomainError, Expr, Func, ParseError};

/// Grid used for Lipschitz and derivative sampling.
pub const SAMPLE_GRID: usize = 1 << 16;
/// Inflation applied to sampled bounds.
pub const BOUND_INFLATION: f64 = 1.05;
/// Stride (in grid cells) for derivative orders two and above.
const HIGHER_ORDER_STRIDE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("derivative bounds unavailable for an expression containing abs (Lipschitz bound {lip_bound})")]
    NotSmooth { lip_bound: f64 },
    #[error("derivative order must be at least 1")]
    BadOrder,
}

/// A function on the circle evaluated by some other part of the toolkit.
pub trait CircleFunction: Send + Sync + fmt::Debug {
    fn value(&self, x: f64) -> f64;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone)]
pub enum Body {
    Constant(f64),
    /// `amplitude * cos(2 pi (x - theta))`.
    Cosine {
        theta: f64,
        amplitude: f64,
    },
    Expr(Expr),
    Custom(Arc<dyn CircleFunction>),
    /// `offset + sum of coefficient * term`.
    Combination {
        terms: Vec<(f64, Observable)>,
        offset: f64,
    },
}

/// An observable with a Lipschitz bound and a sup bound.
#[derive(Debug, Clone)]
pub struct Observable {
    body: Body,
    text: String,
    pub lip_bound: f64,
    pub sup_bound: f64,
    /// Set when the expression differs at 0 and 1, so it is discontinuous on
    /// the circle.
    pub discontinuity_warning: bool,
}

impl Observable {
    pub fn constant(c: f64) -> Self {
        Self {
            body: Body::Constant(c),
            text: format!("{c}"),
            lip_bound: 0.0,
            sup_bound: c.abs(),
            discontinuity_warning: false,
        }
    }

    /// The family `cos(2 pi (x - theta))`.
    pub fn cosine(theta: f64) -> Self {
        Self::scaled_cosine(theta, 1.0)
    }

    pub fn scaled_cosine(theta: f64, amplitude: f64) -> Self {
        let text = if theta == 0.0 {
            format!("{amplitude}*cos(2*pi*x)")
        } else {
            format!("{amplitude}*cos(2*pi*(x-{theta}))")
        };
        Self {
            body: Body::Cosine { theta, amplitude },
            text,
            lip_bound: TAU * amplitude.abs(),
            sup_bound: amplitude.abs(),
            discontinuity_warning: false,
        }
    }

    /// Wrap an arbitrary circle function, bounding it by sampling.
    pub fn custom(f: Arc<dyn CircleFunction>) -> Self {
        let text = f.describe();
        let g = f.clone();
        let stats = sample_bounds(&|x| Ok(g.value(x)));
        Self {
            body: Body::Custom(f),
            text,
            lip_bound: stats.lip,
            sup_bound: stats.sup,
            discontinuity_warning: false,
        }
    }

    /// `offset + sum c_i f_i`, with bounds combined from the parts.
    pub fn combination(terms: Vec<(f64, Observable)>, offset: f64) -> Self {
        let lip_bound = terms.iter().map(|(c, o)| c.abs() * o.lip_bound).sum();
        let sup_bound = offset.abs() + terms.iter().map(|(c, o)| c.abs() * o.sup_bound).sum::<f64>();
        let discontinuity_warning = terms.iter().any(|(_, o)| o.discontinuity_warning);
        let mut text = format!("{offset}");
        for (c, o) in &terms {
            text.push_str(&format!(" + {c}*[{}]", o.text));
        }
        Self {
            body: Body::Combination { terms, offset },
            text,
            lip_bound,
            sup_bound,
            discontinuity_warning,
        }
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// `f(x mod 1)`, or a domain error from expression bodies.
    pub fn try_eval(&self, x: f64) -> Result<f64, DomainError> {
        let x = wrap(x);
        match &self.body {
            Body::Constant(c) => Ok(*c),
            Body::Cosine { theta, amplitude } => Ok(amplitude * (TAU * (x - theta)).cos()),
            Body::Expr(e) => e.eval_raw(x),
            Body::Custom(f) => Ok(f.value(x)),
            Body::Combination { terms, offset } => {
                let mut acc = *offset;
                for (c, o) in terms {
                    acc += c * o.try_eval(x)?;
                }
                Ok(acc)
            }
        }
    }

    /// `f(x mod 1)`, NaN where the expression is undefined.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.try_eval(x).unwrap_or(f64::NAN)
    }

    fn contains_abs(&self) -> bool {
        match &self.body {
            Body::Expr(e) => e.contains_abs(),
            Body::Combination { terms, .. } => terms.iter().any(|(_, o)| o.contains_abs()),
            _ => false,
        }
    }

    /// Sampled sup norms of the derivatives of order `1..=r`.
    pub fn smoothness_report(&self, r: usize) -> Result<Vec<DerivativeEstimate>, ObservableError> {
        if r == 0 {
            return Err(ObservableError::BadOrder);
        }
        if self.contains_abs() {
            return Err(ObservableError::NotSmooth {
                lip_bound: self.lip_bound,
            });
        }
        let n = SAMPLE_GRID;
        let h = 1.0 / n as f64;
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| self.try_eval(i as f64 * h))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(r);
        for order in 1..=r {
            let stride = if order == 1 { 1 } else { HIGHER_ORDER_STRIDE };
            let mut d = values.clone();
            for _ in 0..order {
                d = central_difference(&d, stride, h);
            }
            let sup = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            out.push(DerivativeEstimate {
                order,
                sup,
                certified: order == 1,
            });
        }
        Ok(out)
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeEstimate {
    pub order: usize,
    pub sup: f64,
    /// Only first-order data is certified; higher orders are estimates.
    pub certified: bool,
}

fn central_difference(v: &[f64], stride: usize, h: f64) -> Vec<f64> {
    let n = v.len();
    let scale = 1.0 / (2.0 * stride as f64 * h);
    (0..n)
        .map(|i| (v[(i + stride) % n] - v[(i + n - stride) % n]) * scale)
        .collect()
}

/// Parse an expression in `x` into an observable with sampled bounds.
pub fn parse_observable(text: &str) -> Result<Observable, ObservableError> {
    let e = expr::parse(text)?;
    let stats = sample_bounds(&|x| e.eval_raw(x));
    let discontinuity_warning = match (e.eval_raw(0.0), e.eval_raw(1.0)) {
        (Ok(a), Ok(b)) => (a - b).abs() > 1e-9,
        _ => true,
    };
    Ok(Observable {
        body: Body::Expr(e),
        text: text.trim().to_string(),
        lip_bound: stats.lip,
        sup_bound: stats.sup,
        discontinuity_warning,
    })
}

struct SampleStats {
    lip: f64,
    sup: f64,
}

/// Sup of `|f|` and of the central-difference and secant slopes over the
/// sampling grid (cyclically), inflated. Domain errors give infinite bounds.
fn sample_bounds(f: &(dyn Fn(f64) -> Result<f64, DomainError> + Sync)) -> SampleStats {
    let n = SAMPLE_GRID;
    let h = 1.0 / n as f64;
    let values: Result<Vec<f64>, DomainError> = (0..n).into_par_iter().map(|i| f(i as f64 * h)).collect();
    let Ok(v) = values else {
        return SampleStats {
            lip: f64::INFINITY,
            sup: f64::INFINITY,
        };
    };
    let mut lip = 0.0f64;
    let mut sup = 0.0f64;
    for i in 0..n {
        let next = v[(i + 1) % n];
        let prev = v[(i + n - 1) % n];
        lip = lip.max((next - prev).abs() / (2.0 * h)).max((next - v[i]).abs() / h);
        sup = sup.max(v[i].abs());
    }
    SampleStats {
        lip: lip * BOUND_INFLATION,
        sup: sup * BOUND_INFLATION,
    }
}
