//! Recursive-descent parser for observable expressions.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := ['-'] atom ['^' integer]
//! atom   := number | 'x' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func   := 'cos' | 'sin' | 'exp' | 'abs'
//! ```

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Cos,
    Sin,
    Exp,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Cos => "cos",
            Func::Sin => "sin",
            Func::Exp => "exp",
            Func::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Cos => v.cos(),
            Func::Sin => v.sin(),
            Func::Exp => v.exp(),
            Func::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    X,
    Pi,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// Evaluation failure; the only partial operations are division and
/// negative powers of zero.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("division by zero at x = {x}")]
pub struct DomainError {
    pub x: f64,
}

impl Expr {
    /// Evaluate without reducing `x` mod 1.
    pub fn eval_raw(&self, x: f64) -> Result<f64, DomainError> {
        Ok(match self {
            Expr::Num(c) => *c,
            Expr::X => x,
            Expr::Pi => PI,
            Expr::Neg(e) => -e.eval_raw(x)?,
            Expr::Add(a, b) => a.eval_raw(x)? + b.eval_raw(x)?,
            Expr::Sub(a, b) => a.eval_raw(x)? - b.eval_raw(x)?,
            Expr::Mul(a, b) => a.eval_raw(x)? * b.eval_raw(x)?,
            Expr::Div(a, b) => {
                let num = a.eval_raw(x)?;
                let den = b.eval_raw(x)?;
                if den == 0.0 {
                    return Err(DomainError { x });
                }
                num / den
            }
            Expr::Pow(b, n) => {
                let base = b.eval_raw(x)?;
                if base == 0.0 && *n < 0 {
                    return Err(DomainError { x });
                }
                base.powi(*n)
            }
            Expr::Call(f, e) => f.apply(e.eval_raw(x)?),
        })
    }

    pub fn contains_abs(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::X | Expr::Pi => false,
            Expr::Neg(e) | Expr::Pow(e, _) => e.contains_abs(),
            Expr::Call(f, e) => *f == Func::Abs || e.contains_abs(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.contains_abs() || b.contains_abs()
            }
        }
    }
}

/// Fully parenthesized form; parsing it back yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(c) => write!(f, "{c}"),
            Expr::X => write!(f, "x"),
            Expr::Pi => write!(f, "pi"),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(b, n) => write!(f, "({b})^{n}"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at position {position}: expected one of [{}], found {found}", expected.join(", "))]
pub struct ParseError {
    pub position: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "{s:?}"),
            Tok::Sym(c) => write!(f, "'{c}'"),
            Tok::End => write!(f, "end of input"),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    tok: Tok,
    tok_pos: usize,
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        tok: Tok::End,
        tok_pos: 0,
    };
    p.advance()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.error(&["'+'", "'-'", "'*'", "'/'", "end of input"]));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn error(&self, expected: &[&'static str]) -> ParseError {
        ParseError {
            position: self.tok_pos,
            expected: expected.to_vec(),
            found: self.tok.to_string(),
        }
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_pos = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            self.tok = Tok::End;
            return Ok(());
        };
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
                self.pos += 1;
            }
            // exponent only when digits follow, so "2e" is not swallowed
            if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
                let mut q = self.pos + 1;
                if matches!(self.src.get(q), Some(b'+' | b'-')) {
                    q += 1;
                }
                if self.src.get(q).is_some_and(|d| d.is_ascii_digit()) {
                    while self.src.get(q).is_some_and(|d| d.is_ascii_digit()) {
                        q += 1;
                    }
                    self.pos = q;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            self.tok = match text.parse::<f64>() {
                Ok(v) => Tok::Num(v),
                Err(_) => {
                    return Err(ParseError {
                        position: start,
                        expected: vec!["number"],
                        found: format!("{text:?}"),
                    })
                }
            };
        } else if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.src.get(self.pos).is_some_and(|d| d.is_ascii_alphanumeric()) {
                self.pos += 1;
            }
            let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            self.tok = Tok::Ident(word.to_string());
        } else {
            self.pos += 1;
            self.tok = Tok::Sym(c as char);
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.tok {
                Tok::Sym('+') => {
                    self.advance()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Sym('-') => {
                    self.advance()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.tok {
                Tok::Sym('*') => {
                    self.advance()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Tok::Sym('/') => {
                    self.advance()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let negate = if self.tok == Tok::Sym('-') {
            self.advance()?;
            true
        } else {
            false
        };
        let mut e = self.atom()?;
        if self.tok == Tok::Sym('^') {
            self.advance()?;
            let n = self.integer()?;
            e = Expr::Pow(Box::new(e), n);
        }
        Ok(if negate { Expr::Neg(Box::new(e)) } else { e })
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        let sign = if self.tok == Tok::Sym('-') {
            self.advance()?;
            -1
        } else {
            1
        };
        if let Tok::Num(v) = self.tok {
            if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 {
                self.advance()?;
                return Ok(sign * v as i32);
            }
        }
        Err(self.error(&["integer"]))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        const ATOM: &[&str] = &["number", "'x'", "'pi'", "'cos'", "'sin'", "'exp'", "'abs'", "'('"];
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::Num(v))
            }
            Tok::Ident(name) => {
                let func = match name.as_str() {
                    "x" => {
                        self.advance()?;
                        return Ok(Expr::X);
                    }
                    "pi" => {
                        self.advance()?;
                        return Ok(Expr::Pi);
                    }
                    "cos" => Func::Cos,
                    "sin" => Func::Sin,
                    "exp" => Func::Exp,
                    "abs" => Func::Abs,
                    _ => return Err(self.error(ATOM)),
                };
                self.advance()?;
                self.expect('(')?;
                let arg = self.expr()?;
                self.expect(')')?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            Tok::Sym('(') => {
                self.advance()?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error(ATOM)),
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.tok == Tok::Sym(c) {
            self.advance()
        } else {
            Err(self.error(if c == '(' { &["'('"] } else { &["')'"] }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(e: Expr) -> Box<Expr> {
        Box::new(e)
    }

    #[test]
    fn precedence() {
        let e = parse("1 + 2*x^2 - -x").unwrap();
        assert_eq!(
            e,
            Expr::Sub(
                b(Expr::Add(
                    b(Expr::Num(1.0)),
                    b(Expr::Mul(b(Expr::Num(2.0)), b(Expr::Pow(b(Expr::X), 2))))
                )),
                b(Expr::Neg(b(Expr::X)))
            )
        );
        assert_eq!(parse("-x^2").unwrap().eval_raw(3.0).unwrap(), -9.0);
        assert_eq!(parse("2^-1").unwrap().eval_raw(0.0).unwrap(), 0.5);
    }

    #[test]
    fn functions_and_constants() {
        let e = parse("cos(2*pi*x)").unwrap();
        assert_eq!(e.eval_raw(0.0).unwrap(), 1.0);
        let e = parse("exp(0) + abs(-3) + sin(0)").unwrap();
        assert_eq!(e.eval_raw(0.7).unwrap(), 4.0);
        assert_eq!(parse("1.5e2").unwrap(), Expr::Num(150.0));
    }

    #[test]
    fn errors_carry_position_and_expectation() {
        let err = parse("cos(2*pi*x").unwrap_err();
        assert_eq!(err.position, 10);
        assert_eq!(err.expected, vec!["')'"]);
        let err = parse("1 + * x").unwrap_err();
        assert_eq!(err.position, 4);
        assert!(err.expected.contains(&"number"));
        let err = parse("tan(x)").unwrap_err();
        assert_eq!(err.position, 0);
        let err = parse("x^1.5").unwrap_err();
        assert_eq!(err.expected, vec!["integer"]);
        let err = parse("x x").unwrap_err();
        assert_eq!(err.position, 2);
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let e = parse("1/x").unwrap();
        assert_eq!(e.eval_raw(0.0), Err(DomainError { x: 0.0 }));
        assert_eq!(e.eval_raw(0.5).unwrap(), 2.0);
        let e = parse("x^-2").unwrap();
        assert!(e.eval_raw(0.0).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..10_000).prop_map(|v| Expr::Num(v as f64 / 64.0)),
            (0.0f64..100.0).prop_map(Expr::Num),
            Just(Expr::X),
            Just(Expr::Pi),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), -3i32..6).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
                (
                    inner,
                    prop_oneof![Just(Func::Cos), Just(Func::Sin), Just(Func::Exp), Just(Func::Abs)]
                )
                    .prop_map(|(a, f)| Expr::Call(f, Box::new(a))),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}
