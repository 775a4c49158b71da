//! A tiny univariate arithmetic language used to describe cost functions and
//! velocity laws inside configuration files.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := power (('*' | '/') power)*
//! power   := unary ('^' power)?          (right associative)
//! unary   := '-' unary | primary
//! primary := number | variable | func '(' args ')' | '(' expr ')'
//! func    := exp(x) | log(x) | pow(base, exponent)
//! ```
//!
//! Unary minus binds tighter than `^`, so `-t^2` is `(-t)^2`. Each expression has a
//! single free variable (`t` for costs, `rho` for velocity laws).

mod parser;

use std::fmt;

use thiserror::Error;

pub use parser::{parse, parse_in, ParseError};

/// Byte range in the source text an AST node was parsed from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn join(self, other: Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

/// An expression tree. Equality is structural and ignores source spans.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalErrorKind {
    DivisionByZero,
    LogOfNonPositive,
    PowDomain,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluation error ({kind:?}) in bytes {}..{} at x = {at}", span.start, span.end)]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub span: Span,
    pub at: f64,
}

// Constructors. They are also used by the derivative transform, which gives
// synthesized nodes the span of the node they were derived from.
impl Expr {
    pub fn num(v: f64) -> Self {
        Self::with(ExprKind::Num(v), Span::default())
    }

    pub fn var(name: &str) -> Self {
        Self::with(ExprKind::Var(name.to_string()), Span::default())
    }

    pub fn with(kind: ExprKind, span: Span) -> Self {
        Self { kind, span }
    }

    fn un(f: fn(Box<Expr>) -> ExprKind, a: Expr, span: Span) -> Expr {
        Expr::with(f(Box::new(a)), span)
    }

    fn bin(f: fn(Box<Expr>, Box<Expr>) -> ExprKind, a: Expr, b: Expr, span: Span) -> Expr {
        Expr::with(f(Box::new(a), Box::new(b)), span)
    }

    pub fn neg(a: Expr) -> Expr {
        let span = a.span;
        Self::un(ExprKind::Neg, a, span)
    }

    pub fn exp(a: Expr) -> Expr {
        let span = a.span;
        Self::un(ExprKind::Exp, a, span)
    }

    pub fn log(a: Expr) -> Expr {
        let span = a.span;
        Self::un(ExprKind::Log, a, span)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        let span = a.span.join(b.span);
        Self::bin(ExprKind::Add, a, b, span)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        let span = a.span.join(b.span);
        Self::bin(ExprKind::Sub, a, b, span)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        let span = a.span.join(b.span);
        Self::bin(ExprKind::Mul, a, b, span)
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        let span = a.span.join(b.span);
        Self::bin(ExprKind::Div, a, b, span)
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        let span = a.span.join(b.span);
        Self::bin(ExprKind::Pow, a, b, span)
    }

    /// Name of the free variable, if the expression mentions one.
    pub fn variable(&self) -> Option<&str> {
        match &self.kind {
            ExprKind::Num(_) => None,
            ExprKind::Var(name) => Some(name),
            ExprKind::Neg(a) | ExprKind::Exp(a) | ExprKind::Log(a) => a.variable(),
            ExprKind::Add(a, b)
            | ExprKind::Sub(a, b)
            | ExprKind::Mul(a, b)
            | ExprKind::Div(a, b)
            | ExprKind::Pow(a, b) => a.variable().or_else(|| b.variable()),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.variable().is_none()
    }

    /// Evaluate with the free variable bound to `x`.
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        let err = |kind| EvalError { kind, span: self.span, at: x };
        let v = match &self.kind {
            ExprKind::Num(v) => *v,
            ExprKind::Var(_) => x,
            ExprKind::Neg(a) => -a.eval(x)?,
            ExprKind::Add(a, b) => a.eval(x)? + b.eval(x)?,
            ExprKind::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            ExprKind::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            ExprKind::Div(a, b) => {
                let num = a.eval(x)?;
                let den = b.eval(x)?;
                if den == 0.0 {
                    return Err(err(EvalErrorKind::DivisionByZero));
                }
                num / den
            }
            ExprKind::Pow(a, b) => {
                let base = a.eval(x)?;
                let e = b.eval(x)?;
                if base < 0.0 && e.fract() != 0.0 {
                    return Err(err(EvalErrorKind::PowDomain));
                }
                if base == 0.0 && e < 0.0 {
                    return Err(err(EvalErrorKind::DivisionByZero));
                }
                if e == 2.0 {
                    base * base
                } else {
                    base.powf(e)
                }
            }
            ExprKind::Exp(a) => a.eval(x)?.exp(),
            ExprKind::Log(a) => {
                let arg = a.eval(x)?;
                if arg <= 0.0 {
                    return Err(err(EvalErrorKind::LogOfNonPositive));
                }
                arg.ln()
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(err(EvalErrorKind::NonFinite))
        }
    }

    /// Symbolic derivative with respect to the free variable, constant-folded.
    pub fn derivative(&self) -> Expr {
        self.derive().simplify()
    }

    fn derive(&self) -> Expr {
        let span = self.span;
        let zero = || Expr::with(ExprKind::Num(0.0), span);
        let one = || Expr::with(ExprKind::Num(1.0), span);
        match &self.kind {
            ExprKind::Num(_) => zero(),
            ExprKind::Var(_) => one(),
            ExprKind::Neg(a) => Expr::neg(a.derive()),
            ExprKind::Add(a, b) => Expr::add(a.derive(), b.derive()),
            ExprKind::Sub(a, b) => Expr::sub(a.derive(), b.derive()),
            ExprKind::Mul(a, b) => Expr::add(
                Expr::mul(a.derive(), (**b).clone()),
                Expr::mul((**a).clone(), b.derive()),
            ),
            ExprKind::Div(a, b) => Expr::div(
                Expr::sub(
                    Expr::mul(a.derive(), (**b).clone()),
                    Expr::mul((**a).clone(), b.derive()),
                ),
                Expr::mul((**b).clone(), (**b).clone()),
            ),
            ExprKind::Pow(a, b) => {
                if b.is_constant() {
                    // b * a^(b-1) * a'
                    Expr::mul(
                        Expr::mul(
                            (**b).clone(),
                            Expr::pow((**a).clone(), Expr::sub((**b).clone(), one())),
                        ),
                        a.derive(),
                    )
                } else if a.is_constant() {
                    Expr::mul(
                        Expr::mul(self.clone(), Expr::log((**a).clone())),
                        b.derive(),
                    )
                } else {
                    // a^b * (b' log a + b a' / a)
                    Expr::mul(
                        self.clone(),
                        Expr::add(
                            Expr::mul(b.derive(), Expr::log((**a).clone())),
                            Expr::div(Expr::mul((**b).clone(), a.derive()), (**a).clone()),
                        ),
                    )
                }
            }
            ExprKind::Exp(a) => Expr::mul(self.clone(), a.derive()),
            ExprKind::Log(a) => Expr::div(a.derive(), (**a).clone()),
        }
    }

    /// Constant folding and removal of neutral elements.
    pub fn simplify(&self) -> Expr {
        let span = self.span;
        let num = |v: f64| Expr::with(ExprKind::Num(v), span);
        let as_num = |e: &Expr| match e.kind {
            ExprKind::Num(v) => Some(v),
            _ => None,
        };
        match &self.kind {
            ExprKind::Num(_) | ExprKind::Var(_) => self.clone(),
            ExprKind::Neg(a) => {
                let a = a.simplify();
                match &a.kind {
                    ExprKind::Num(v) => num(-v),
                    ExprKind::Neg(inner) => (**inner).clone(),
                    _ => Expr::with(ExprKind::Neg(Box::new(a)), span),
                }
            }
            ExprKind::Exp(a) | ExprKind::Log(a) => {
                let a = a.simplify();
                let rebuilt = match &self.kind {
                    ExprKind::Exp(_) => Expr::with(ExprKind::Exp(Box::new(a)), span),
                    _ => Expr::with(ExprKind::Log(Box::new(a)), span),
                };
                if rebuilt.is_constant() {
                    if let Ok(v) = rebuilt.eval(0.0) {
                        return num(v);
                    }
                }
                rebuilt
            }
            ExprKind::Add(a, b)
            | ExprKind::Sub(a, b)
            | ExprKind::Mul(a, b)
            | ExprKind::Div(a, b)
            | ExprKind::Pow(a, b) => {
                let a = a.simplify();
                let b = b.simplify();
                let (na, nb) = (as_num(&a), as_num(&b));
                let wrap = |k: fn(Box<Expr>, Box<Expr>) -> ExprKind, a: Expr, b: Expr| {
                    Expr::with(k(Box::new(a), Box::new(b)), span)
                };
                let folded = match (&self.kind, na, nb) {
                    (ExprKind::Add(..), Some(0.0), _) => Some(b.clone()),
                    (ExprKind::Add(..), _, Some(0.0)) => Some(a.clone()),
                    (ExprKind::Sub(..), _, Some(0.0)) => Some(a.clone()),
                    (ExprKind::Sub(..), Some(0.0), _) => Some(Expr::neg(b.clone()).simplify()),
                    (ExprKind::Mul(..), Some(0.0), _) | (ExprKind::Mul(..), _, Some(0.0)) => {
                        Some(num(0.0))
                    }
                    (ExprKind::Mul(..), Some(1.0), _) => Some(b.clone()),
                    (ExprKind::Mul(..), _, Some(1.0)) => Some(a.clone()),
                    (ExprKind::Div(..), _, Some(1.0)) => Some(a.clone()),
                    (ExprKind::Div(..), Some(0.0), Some(d)) if d != 0.0 => Some(num(0.0)),
                    (ExprKind::Pow(..), _, Some(1.0)) => Some(a.clone()),
                    (ExprKind::Pow(..), _, Some(0.0)) => Some(num(1.0)),
                    _ => None,
                };
                if let Some(e) = folded {
                    return e;
                }
                let rebuilt = match &self.kind {
                    ExprKind::Add(..) => wrap(ExprKind::Add, a, b),
                    ExprKind::Sub(..) => wrap(ExprKind::Sub, a, b),
                    ExprKind::Mul(..) => wrap(ExprKind::Mul, a, b),
                    ExprKind::Div(..) => wrap(ExprKind::Div, a, b),
                    _ => wrap(ExprKind::Pow, a, b),
                };
                if na.is_some() && nb.is_some() {
                    if let Ok(v) = rebuilt.eval(0.0) {
                        return num(v);
                    }
                }
                rebuilt
            }
        }
    }
}

/// Prints a fully parenthesized form that parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) if *v < 0.0 => write!(f, "(-{})", -v),
            ExprKind::Num(v) => write!(f, "{v}"),
            ExprKind::Var(name) => write!(f, "{name}"),
            ExprKind::Neg(a) => match a.kind {
                ExprKind::Num(v) if v >= 0.0 => write!(f, "-{a}"),
                ExprKind::Var(_) => write!(f, "-{a}"),
                _ => write!(f, "-({a})"),
            },
            ExprKind::Add(a, b) => write!(f, "({a} + {b})"),
            ExprKind::Sub(a, b) => write!(f, "({a} - {b})"),
            ExprKind::Mul(a, b) => write!(f, "({a} * {b})"),
            ExprKind::Div(a, b) => write!(f, "({a} / {b})"),
            ExprKind::Pow(a, b) => write!(f, "({a} ^ {b})"),
            ExprKind::Exp(a) => write!(f, "exp({a})"),
            ExprKind::Log(a) => write!(f, "log({a})"),
        }
    }
}

/// A parsed univariate function bundled with its first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFn {
    source: String,
    expr: Expr,
    d1: Expr,
    d2: Expr,
}

impl ScalarFn {
    /// Parse `src` with `var` as the only admissible variable name.
    pub fn parse(src: &str, var: &str) -> Result<Self, ParseError> {
        let expr = parse_in(src, var)?;
        Ok(Self::from_expr(src, expr))
    }

    pub fn from_expr(source: &str, expr: Expr) -> Self {
        let d1 = expr.derivative();
        let d2 = d1.derivative();
        Self { source: source.to_string(), expr, d1, d2 }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn value(&self, x: f64) -> Result<f64, EvalError> {
        self.expr.eval(x)
    }

    pub fn deriv(&self, x: f64) -> Result<f64, EvalError> {
        self.d1.eval(x)
    }

    pub fn deriv2(&self, x: f64) -> Result<f64, EvalError> {
        self.d2.eval(x)
    }

    /// True when the second derivative folds to the literal zero.
    pub fn is_affine(&self) -> bool {
        matches!(self.d2.kind, ExprKind::Num(v) if v == 0.0)
    }
}
