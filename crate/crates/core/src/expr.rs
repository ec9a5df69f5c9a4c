//! Scalar expressions over `x1..xm` and an optional parameter `lam`.
//!
//! Expressions are parsed from a small infix grammar, evaluated in `f64`, and
//! differentiated symbolically. Decimal literals are rounded to the nearest
//! binary `f64`. Exponents must be integers, so every derivative stays in
//! closed form.
//!
//! Trees are built through folding constructors ([`Expr::add`], [`Expr::mul`],
//! ...) which collapse constant subtrees and the `0`/`1` identities. No other
//! simplification is attempted; tests compare values, not shapes.

use std::fmt;
use std::ops;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// A differentiation variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    /// Zero-based coordinate index; `X(0)` is written `x1`.
    X(usize),
    /// The homotopy parameter `lam`.
    Lam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based coordinate.
    Var(usize),
    Lam,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("variable x{index} at byte {offset} exceeds dimension {dim}")]
    VariableOutOfRange {
        offset: usize,
        index: usize,
        dim: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("domain violation in `{expr}`: {reason}")]
    Domain { expr: String, reason: &'static str },
    #[error("expression mentions `lam` but no parameter value was supplied")]
    MissingParameter,
    #[error("point has {got} coordinates but the expression uses x{needed}")]
    DimensionMismatch { needed: usize, got: usize },
}

fn finite_or(value: f64, e: &Expr, reason: &'static str) -> Result<f64, EvalError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EvalError::Domain {
            expr: e.to_string(),
            reason,
        })
    }
}

fn fold(value: f64) -> Option<Expr> {
    value.is_finite().then_some(Expr::Const(value))
}

// Smart constructors fold constants; they are not operator impls.
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    /// Coordinate `x_{index+1}`.
    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn is_const(&self, c: f64) -> bool {
        self.as_const() == Some(c)
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            a => Expr::Neg(Box::new(a)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if let Some(e) = fold(x + y) {
                return e;
            }
        }
        if a.is_const(0.0) {
            return b;
        }
        if b.is_const(0.0) {
            return a;
        }
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if let Some(e) = fold(x - y) {
                return e;
            }
        }
        if b.is_const(0.0) {
            return a;
        }
        if a.is_const(0.0) {
            return Expr::neg(b);
        }
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if let Some(e) = fold(x * y) {
                return e;
            }
        }
        if a.is_const(0.0) || b.is_const(0.0) {
            return Expr::Const(0.0);
        }
        if a.is_const(1.0) {
            return b;
        }
        if b.is_const(1.0) {
            return a;
        }
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 {
                if let Some(e) = fold(x / y) {
                    return e;
                }
            }
        }
        if b.is_const(1.0) {
            return a;
        }
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, n: i32) -> Expr {
        if n == 0 {
            return Expr::Const(1.0);
        }
        if n == 1 {
            return a;
        }
        if let Some(x) = a.as_const() {
            if x != 0.0 || n > 0 {
                if let Some(e) = fold(x.powi(n)) {
                    return e;
                }
            }
        }
        Expr::Pow(Box::new(a), n)
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        if let Some(x) = a.as_const() {
            let v = match f {
                Func::Sin => Some(x.sin()),
                Func::Cos => Some(x.cos()),
                Func::Exp => Some(x.exp()),
                Func::Log if x > 0.0 => Some(x.ln()),
                Func::Sqrt if x >= 0.0 => Some(x.sqrt()),
                _ => None,
            };
            if let Some(e) = v.and_then(fold) {
                return e;
            }
        }
        Expr::Call(f, Box::new(a))
    }

    /// Evaluates at `point`; `lam` must be supplied when the tree mentions it.
    pub fn eval(&self, point: &[f64], lam: Option<f64>) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => point.get(*i).copied().ok_or(EvalError::DimensionMismatch {
                needed: i + 1,
                got: point.len(),
            }),
            Expr::Lam => lam.ok_or(EvalError::MissingParameter),
            Expr::Neg(a) => Ok(-a.eval(point, lam)?),
            Expr::Add(a, b) => finite_or(a.eval(point, lam)? + b.eval(point, lam)?, self, "overflow"),
            Expr::Sub(a, b) => finite_or(a.eval(point, lam)? - b.eval(point, lam)?, self, "overflow"),
            Expr::Mul(a, b) => finite_or(a.eval(point, lam)? * b.eval(point, lam)?, self, "overflow"),
            Expr::Div(a, b) => {
                let num = a.eval(point, lam)?;
                let den = b.eval(point, lam)?;
                if den == 0.0 {
                    return Err(EvalError::Domain {
                        expr: self.to_string(),
                        reason: "division by zero",
                    });
                }
                finite_or(num / den, self, "overflow")
            }
            Expr::Pow(a, n) => {
                let base = a.eval(point, lam)?;
                if base == 0.0 && *n < 0 {
                    return Err(EvalError::Domain {
                        expr: self.to_string(),
                        reason: "zero raised to a negative power",
                    });
                }
                finite_or(base.powi(*n), self, "overflow")
            }
            Expr::Call(f, a) => {
                let x = a.eval(point, lam)?;
                let v = match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(EvalError::Domain {
                                expr: self.to_string(),
                                reason: "logarithm of a nonpositive value",
                            });
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(EvalError::Domain {
                                expr: self.to_string(),
                                reason: "square root of a negative value",
                            });
                        }
                        x.sqrt()
                    }
                };
                finite_or(v, self, "overflow")
            }
        }
    }

    /// Exact symbolic partial derivative.
    pub fn derive(&self, var: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if var == Var::X(*i) { 1.0 } else { 0.0 }),
            Expr::Lam => Expr::Const(if var == Var::Lam { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.derive(var)),
            Expr::Add(a, b) => Expr::add(a.derive(var), b.derive(var)),
            Expr::Sub(a, b) => Expr::sub(a.derive(var), b.derive(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.derive(var), (**b).clone()),
                Expr::mul((**a).clone(), b.derive(var)),
            ),
            Expr::Div(a, b) => {
                // (a'b - ab') / b^2
                let num = Expr::sub(
                    Expr::mul(a.derive(var), (**b).clone()),
                    Expr::mul((**a).clone(), b.derive(var)),
                );
                Expr::div(num, Expr::pow((**b).clone(), 2))
            }
            Expr::Pow(a, n) => Expr::mul(
                Expr::mul(Expr::Const(*n as f64), Expr::pow((**a).clone(), n - 1)),
                a.derive(var),
            ),
            Expr::Call(f, a) => {
                let inner = a.derive(var);
                let a = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, a),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, a)),
                    Func::Exp => Expr::call(Func::Exp, a),
                    Func::Log => Expr::div(Expr::Const(1.0), a),
                    Func::Sqrt => Expr::div(
                        Expr::Const(1.0),
                        Expr::mul(Expr::Const(2.0), Expr::call(Func::Sqrt, a)),
                    ),
                };
                Expr::mul(outer, inner)
            }
        }
    }

    pub fn mentions_lam(&self) -> bool {
        match self {
            Expr::Lam => true,
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.mentions_lam(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.mentions_lam() || b.mentions_lam()
            }
        }
    }

    /// Number of coordinates the expression needs (largest index + 1).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Var(i) => i + 1,
            Expr::Const(_) | Expr::Lam => 0,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.arity().max(b.arity())
            }
        }
    }

    /// Replaces `lam` by a constant and refolds.
    pub fn substitute_lam(&self, value: f64) -> Expr {
        self.map_leaves(&|e| match e {
            Expr::Lam => Some(Expr::Const(value)),
            _ => None,
        })
    }

    /// Replaces each coordinate `x_i` by `images[i]`.
    pub fn substitute_vars(&self, images: &[Expr]) -> Expr {
        self.map_leaves(&|e| match e {
            Expr::Var(i) => images.get(*i).cloned(),
            _ => None,
        })
    }

    fn map_leaves(&self, leaf: &dyn Fn(&Expr) -> Option<Expr>) -> Expr {
        if let Some(e) = leaf(self) {
            return e;
        }
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Lam => self.clone(),
            Expr::Neg(a) => Expr::neg(a.map_leaves(leaf)),
            Expr::Add(a, b) => Expr::add(a.map_leaves(leaf), b.map_leaves(leaf)),
            Expr::Sub(a, b) => Expr::sub(a.map_leaves(leaf), b.map_leaves(leaf)),
            Expr::Mul(a, b) => Expr::mul(a.map_leaves(leaf), b.map_leaves(leaf)),
            Expr::Div(a, b) => Expr::div(a.map_leaves(leaf), b.map_leaves(leaf)),
            Expr::Pow(a, n) => Expr::pow(a.map_leaves(leaf), *n),
            Expr::Call(f, a) => Expr::call(*f, a.map_leaves(leaf)),
        }
    }

    /// Binding strength used by the printer; higher binds tighter.
    fn level(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Const(c) if c.is_sign_negative() => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_level: u8) -> fmt::Result {
        if self.level() < min_level {
            f.write_str("(")?;
            self.write_at(f, 0)?;
            return f.write_str(")");
        }
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Lam => f.write_str("lam"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                a.write_at(f, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.write_at(f, 1)?;
                f.write_str(if matches!(self, Expr::Add(..)) { " + " } else { " - " })?;
                b.write_at(f, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.write_at(f, 2)?;
                f.write_str(if matches!(self, Expr::Mul(..)) { " * " } else { " / " })?;
                b.write_at(f, 3)
            }
            Expr::Pow(a, n) => {
                a.write_at(f, 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.write_at(f, 0)?;
                f.write_str(")")
            }
        }
    }
}

/// Canonical form; re-parsing it yields the same tree.
/// Serialized as its canonical text, which parses back to an equal tree.
impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

/// Parses `text` with variables limited to `x1..x{dim}`.
///
/// Grammar, loosest first: `+ -`, then `* /`, then unary `-`, then `^` with a
/// (possibly signed) integer literal exponent. Binary operators associate left.
pub fn parse(text: &str, dim: usize) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        dim,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::add(lhs, self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::mul(lhs, self.factor()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::div(lhs, self.factor()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::neg(self.factor()?));
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let n = self.integer_exponent()?;
            return Ok(Expr::pow(base, n));
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.src.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == digits_start {
            self.pos = start;
            return Err(self.syntax("exponent must be an integer literal"));
        }
        if matches!(self.src.get(self.pos), Some(b'.' | b'e' | b'E')) {
            return Err(self.syntax("exponent must be an integer literal"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<i32>().map_err(|_| ParseError::Syntax {
            offset: start,
            message: "exponent out of range".into(),
        })
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.syntax("expected a number, identifier or `(`")),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            return Err(self.syntax("malformed number"));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = save;
                return Err(self.syntax("malformed exponent in number"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("malformed number `{text}`"),
        })?;
        if !value.is_finite() {
            return Err(ParseError::Syntax {
                offset: start,
                message: format!("number `{text}` overflows"),
            });
        }
        Ok(Expr::Const(value))
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if name == "lam" {
            return Ok(Expr::Lam);
        }
        if let Some(func) = Func::from_name(name) {
            self.expect(b'(')?;
            let arg = self.expr()?;
            self.expect(b')')?;
            return Ok(Expr::call(func, arg));
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits.parse().unwrap_or(usize::MAX);
                if index == 0 || index > self.dim {
                    return Err(ParseError::VariableOutOfRange {
                        offset: start,
                        index,
                        dim: self.dim,
                    });
                }
                return Ok(Expr::Var(index - 1));
            }
        }
        Err(ParseError::UnknownIdentifier {
            offset: start,
            name: name.to_string(),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("field has {got} components but dimension {dim}")]
    ComponentCount { dim: usize, got: usize },
    #[error("component {component} mentions `lam` but the field is not parametric")]
    UnexpectedParameter { component: usize },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("component {component}: {source}")]
    Parse { component: usize, source: ParseError },
}

/// A vector field `X` on R^m, optionally depending on `lam` in [0, 1].
///
/// The Jacobian is differentiated once at construction.
#[derive(Clone, Debug)]
pub struct FieldDef {
    dim: usize,
    components: Vec<Expr>,
    jacobian: Vec<Vec<Expr>>,
    parametric: bool,
}

impl FieldDef {
    pub fn new(dim: usize, components: Vec<Expr>, parametric: bool) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        if components.len() != dim {
            return Err(FieldError::ComponentCount {
                dim,
                got: components.len(),
            });
        }
        if !parametric {
            if let Some(component) = components.iter().position(Expr::mentions_lam) {
                return Err(FieldError::UnexpectedParameter { component });
            }
        }
        let jacobian = components
            .iter()
            .map(|c| (0..dim).map(|j| c.derive(Var::X(j))).collect())
            .collect();
        Ok(FieldDef {
            dim,
            components,
            jacobian,
            parametric,
        })
    }

    pub fn parse(dim: usize, components: &[&str], parametric: bool) -> Result<Self, FieldError> {
        let exprs = components
            .iter()
            .enumerate()
            .map(|(i, text)| {
                parse(text, dim).map_err(|source| FieldError::Parse {
                    component: i,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        FieldDef::new(dim, exprs, parametric)
    }

    /// The negative gradient field `-grad f` under the Euclidean metric.
    pub fn negative_gradient(f: &Expr, dim: usize) -> Self {
        let components = (0..dim).map(|i| Expr::neg(f.derive(Var::X(i)))).collect();
        FieldDef::new(dim, components, f.mentions_lam()).expect("gradient has matching arity")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn is_parametric(&self) -> bool {
        self.parametric
    }

    /// Freezes `lam` at `value`.
    pub fn at_parameter(&self, value: f64) -> FieldDef {
        let components = self.components.iter().map(|c| c.substitute_lam(value)).collect();
        FieldDef::new(self.dim, components, false).expect("substitution removes lam")
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x, None)?;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Row-major Jacobian `DX(x)`.
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (i, row) in self.jacobian.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[i * self.dim + j] = e.eval(x, None)?;
            }
        }
        Ok(())
    }
}

/// A smooth scalar function with its symbolic gradient and Hessian.
#[derive(Clone, Debug)]
pub struct ScalarFunction {
    dim: usize,
    expr: Expr,
    gradient: Vec<Expr>,
    hessian: Vec<Vec<Expr>>,
}

impl ScalarFunction {
    pub fn new(expr: Expr, dim: usize) -> Self {
        let gradient: Vec<Expr> = (0..dim).map(|i| expr.derive(Var::X(i))).collect();
        let hessian = gradient
            .iter()
            .map(|g| (0..dim).map(|j| g.derive(Var::X(j))).collect())
            .collect();
        ScalarFunction {
            dim,
            expr,
            gradient,
            hessian,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.expr.eval(x, None)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.gradient.iter().map(|g| g.eval(x, None)).collect()
    }

    /// Row-major symmetric Hessian.
    pub fn hessian(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = Vec::with_capacity(self.dim * self.dim);
        for row in &self.hessian {
            for e in row {
                out.push(e.eval(x, None)?);
            }
        }
        Ok(out)
    }

    pub fn negative_gradient_field(&self) -> FieldDef {
        let components = self.gradient.iter().cloned().map(Expr::neg).collect();
        FieldDef::new(self.dim, components, false).expect("gradient has matching arity")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str, m: usize) -> Expr {
        parse(s, m).unwrap()
    }

    #[test]
    fn parses_with_declared_precedence() {
        let e = p("x1^2 - 1", 1);
        assert_eq!(
            e,
            Expr::Sub(Box::new(Expr::Pow(Box::new(Expr::Var(0)), 2)), Box::new(Expr::Const(1.0)))
        );
        // unary minus binds looser than ^
        assert_eq!(p("-x1^2", 1).eval(&[3.0], None).unwrap(), -9.0);
        // left associativity
        assert_eq!(p("8 / x1 / 2", 1).eval(&[2.0], None).unwrap(), 2.0);
        assert_eq!(p("1 - x1 - 1", 1).eval(&[5.0], None).unwrap(), -5.0);
        assert_eq!(p("x1 * -x2", 2).eval(&[2.0, 3.0], None).unwrap(), -6.0);
        let e = p("x1*x2 + sin(x1)", 2);
        assert_eq!(e.arity(), 2);
        assert!((e.eval(&[0.5, 2.0], None).unwrap() - (1.0 + 0.5f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse("x3", 2),
            Err(ParseError::VariableOutOfRange { index: 3, dim: 2, .. })
        ));
        assert!(matches!(parse("x0", 2), Err(ParseError::VariableOutOfRange { .. })));
        assert!(matches!(parse("x1^2.5", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("x1^x1", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("tan(x1)", 1), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse("x1 +", 1), Err(ParseError::Syntax { offset: 4, .. })));
        assert!(matches!(parse("(x1", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("x1 x1", 1), Err(ParseError::Syntax { offset: 3, .. })));
    }

    #[test]
    fn evaluation_and_domain_errors() {
        assert_eq!(p("x1^2 - 1", 1).eval(&[2.0], None).unwrap(), 3.0);
        assert_eq!(p("x1^2/(1+x1^2)", 1).eval(&[0.0], None).unwrap(), 0.0);
        assert!(matches!(
            p("log(x1)", 1).eval(&[0.0], None),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(p("1/x1", 1).eval(&[0.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(p("sqrt(x1)", 1).eval(&[-1.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(p("x1^-1", 1).eval(&[0.0], None), Err(EvalError::Domain { .. })));
        assert!(matches!(p("exp(x1)", 1).eval(&[1e4], None), Err(EvalError::Domain { .. })));
        assert_eq!(p("lam*x1", 1).eval(&[2.0], None), Err(EvalError::MissingParameter));
        assert_eq!(p("lam*x1", 1).eval(&[2.0], Some(0.5)).unwrap(), 1.0);
    }

    #[test]
    fn symbolic_derivatives() {
        let d = p("x1^2", 1).derive(Var::X(0));
        assert_eq!(d.eval(&[3.0], None).unwrap(), 6.0);
        let d = p("(x1^2-1)^2 + x2^2", 2).derive(Var::X(0));
        for x in [-1.5, -0.3, 0.0, 0.7, 2.0] {
            let expect = 4.0 * x * x * x - 4.0 * x;
            assert!((d.eval(&[x, 0.4], None).unwrap() - expect).abs() < 1e-12);
        }
        let d = p("lam^3 * x1", 1).derive(Var::Lam);
        assert_eq!(d.eval(&[2.0], Some(2.0)).unwrap(), 24.0);
        assert_eq!(p("sin(x2)", 2).derive(Var::X(0)), Expr::Const(0.0));
    }

    #[test]
    fn printed_form_reparses_to_same_tree() {
        for s in [
            "x1^2 - 1",
            "-(x1 * x2) + 3.5e-3 * sin(x1 - x2)",
            "x1 - (x2 - lam)",
            "x1 / (x2 * x1) - -2.0",
            "(-x1)^3 + x2^-2",
            "exp(-x1^2) * log(1 + x2^2) / sqrt(2 + cos(x1))",
            "-2.5 * x1",
        ] {
            let e = p(s, 2);
            let printed = e.to_string();
            assert_eq!(p(&printed, 2), e, "{s} -> {printed}");
        }
    }

    #[test]
    fn lam_substitution_folds() {
        let e = p("x1 + 2*lam", 1).substitute_lam(0.5);
        assert!(!e.mentions_lam());
        assert_eq!(e.eval(&[1.0], None).unwrap(), 2.0);
    }

    #[test]
    fn field_definition_invariants() {
        assert!(matches!(
            FieldDef::parse(2, &["x1"], false),
            Err(FieldError::ComponentCount { dim: 2, got: 1 })
        ));
        assert!(matches!(
            FieldDef::parse(1, &["x1 + lam"], false),
            Err(FieldError::UnexpectedParameter { component: 0 })
        ));
        let field = FieldDef::parse(2, &["x1", "-x2"], false).unwrap();
        let mut j = [0.0; 4];
        field.jacobian_into(&[0.3, 0.1], &mut j).unwrap();
        assert_eq!(j, [1.0, 0.0, 0.0, -1.0]);
    }
}
