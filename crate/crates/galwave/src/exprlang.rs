//! Arithmetic expression language in the variables `t`, `x`, `y`, `z`.
//!
//! Every coefficient, source and initial-data field of a problem is given as
//! an expression in this language. Grammar (`^` is right-associative, unary
//! minus binds looser than `^`, so `-2^2 = -4`):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' factor)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Evaluation is IEEE floating point in the working scalar type. Division by
//! zero, `log` of a nonpositive value, `sqrt` of a negative value, and any
//! non-finite intermediate are hard evaluation errors.

use crate::scalar::{lit, Scalar};
use std::fmt;
use thiserror::Error;

/// A variable of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T = 0,
    X = 1,
    Y = 2,
    Z = 3,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
        }
    }

    fn from_name(s: &str) -> Option<Var> {
        match s {
            "t" => Some(Var::T),
            "x" => Some(Var::X),
            "y" => Some(Var::Y),
            "z" => Some(Var::Z),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sign,
    Tanh,
    Min,
    Max,
    Clamp,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            _ => 1,
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Parse failure with the byte offset of the first offending position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("variable `{0}` is not bound in the evaluation environment")]
    MissingVariable(&'static str),
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("evaluation produced a non-finite value in `{0}`")]
    NonFinite(&'static str),
}

/// Values for the variables an expression may reference.
#[derive(Debug, Clone, Copy)]
pub struct Env<T> {
    vals: [Option<T>; 4],
}

impl<T: Scalar> Env<T> {
    pub fn empty() -> Self {
        Env { vals: [None; 4] }
    }

    /// Environment binding `t` and the first `x.len()` spatial variables.
    pub fn txyz(t: T, x: &[T]) -> Self {
        let mut vals = [None; 4];
        vals[0] = Some(t);
        for (i, &xi) in x.iter().enumerate().take(3) {
            vals[i + 1] = Some(xi);
        }
        Env { vals }
    }

    /// Environment binding only `z`; used for nonlinearity expressions F(z).
    pub fn only_z(z: T) -> Self {
        let mut vals = [None; 4];
        vals[3] = Some(z);
        Env { vals }
    }

    pub fn set(&mut self, v: Var, x: T) {
        self.vals[v as usize] = Some(x);
    }

    pub fn get(&self, v: Var) -> Option<T> {
        self.vals[v as usize]
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

fn err(offset: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        offset,
        message: message.into(),
    }
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
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
                    let rhs = self.factor()?;
                    lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            let inner = self.factor()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(err(self.pos, "expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(c) => Err(err(self.pos, format!("unexpected character `{}`", c as char))),
            None => Err(err(self.pos, "unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            if self.pos >= self.src.len() || !self.src[self.pos].is_ascii_digit() {
                return Err(err(self.pos, "expected digit after decimal point"));
            }
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos >= self.src.len() || !self.src[self.pos].is_ascii_digit() {
                // Not an exponent after all; `1e` could start an identifier boundary error.
                self.pos = mark;
            } else {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text
            .parse()
            .map_err(|_| err(start, format!("invalid number literal `{text}`")))?;
        if !value.is_finite() {
            return Err(err(start, format!("number literal `{text}` overflows")));
        }
        Ok(Expr::Num(value))
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_owned();
        if self.peek() == Some(b'(') {
            let func = Func::from_name(&name)
                .ok_or_else(|| err(start, format!("unknown function `{name}`")))?;
            self.pos += 1; // consume '('
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(err(self.pos, "expected `)` or `,` in argument list"));
            }
            if args.len() != func.arity() {
                return Err(err(
                    start,
                    format!(
                        "function `{name}` takes {} argument(s), got {}",
                        func.arity(),
                        args.len()
                    ),
                ));
            }
            return Ok(Expr::Call(func, args));
        }
        match Var::from_name(&name) {
            Some(v) => Ok(Expr::Var(v)),
            None => Err(err(start, format!("unknown identifier `{name}`"))),
        }
    }
}

/// Parses an expression, requiring the whole input to be consumed.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(text);
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(err(p.pos, "unexpected trailing input"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

impl Expr {
    /// Evaluates the expression in the given environment.
    pub fn eval<T: Scalar>(&self, env: &Env<T>) -> Result<T, EvalError> {
        match self {
            Expr::Num(v) => Ok(lit(*v)),
            Expr::Var(v) => env
                .get(*v)
                .ok_or(EvalError::MissingVariable(v.name())),
            Expr::Neg(inner) => Ok(-inner.eval(env)?),
            Expr::Bin(op, l, r) => {
                let a = l.eval(env)?;
                let b = r.eval(env)?;
                let out = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == T::zero() {
                            return Err(EvalError::Domain("division by zero"));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                };
                if !out.is_finite() {
                    return Err(EvalError::NonFinite(op_name(*op)));
                }
                Ok(out)
            }
            Expr::Call(func, args) => {
                let a = args[0].eval(env)?;
                let out = match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= T::zero() {
                            return Err(EvalError::Domain("log of nonpositive value"));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < T::zero() {
                            return Err(EvalError::Domain("sqrt of negative value"));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Sign => {
                        if a > T::zero() {
                            T::one()
                        } else if a < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                    Func::Tanh => a.tanh(),
                    Func::Min => {
                        let b = args[1].eval(env)?;
                        if a < b {
                            a
                        } else {
                            b
                        }
                    }
                    Func::Max => {
                        let b = args[1].eval(env)?;
                        if a > b {
                            a
                        } else {
                            b
                        }
                    }
                    Func::Clamp => {
                        let lo = args[1].eval(env)?;
                        let hi = args[2].eval(env)?;
                        let v = if a < lo { lo } else { a };
                        if v > hi {
                            hi
                        } else {
                            v
                        }
                    }
                };
                if !out.is_finite() {
                    return Err(EvalError::NonFinite(func.name()));
                }
                Ok(out)
            }
        }
    }

    /// Marks which variables occur in the tree, indexed by `Var as usize`.
    pub fn vars_used(&self) -> [bool; 4] {
        let mut used = [false; 4];
        self.collect_vars(&mut used);
        used
    }

    fn collect_vars(&self, used: &mut [bool; 4]) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => used[*v as usize] = true,
            Expr::Neg(inner) => inner.collect_vars(used),
            Expr::Bin(_, l, r) => {
                l.collect_vars(used);
                r.collect_vars(used);
            }
            Expr::Call(_, args) => {
                for a in args {
                    a.collect_vars(used);
                }
            }
        }
    }

    pub fn uses_t(&self) -> bool {
        self.vars_used()[Var::T as usize]
    }

    /// True for the literal constant zero.
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

fn op_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::Pow => "^",
    }
}

impl fmt::Display for Expr {
    /// Prints with the minimal parentheses needed so that parsing the output
    /// reproduces this exact tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn paren(f: &mut fmt::Formatter<'_>, e: &Expr, need: bool) -> fmt::Result {
            if need {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(inner) => {
                write!(f, "-")?;
                paren(f, inner, inner.prec() < 3)
            }
            Expr::Bin(op, l, r) => {
                let (lp, rp) = match op {
                    BinOp::Add => (1, 2),
                    BinOp::Sub => (1, 2),
                    BinOp::Mul => (2, 3),
                    BinOp::Div => (2, 3),
                    // pow's base must be an atom; its exponent a factor
                    BinOp::Pow => (5, 3),
                };
                paren(f, l, l.prec() < lp)?;
                write!(f, " {} ", op_name(*op))?;
                paren(f, r, r.prec() < rp)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Central-difference time derivative of an expression at the env's `t`.
///
/// Default step is `max(1, |t|) * eps^(1/3)`. Evaluation errors at the two
/// stencil points propagate.
pub fn diff_t<T: Scalar>(expr: &Expr, env: &Env<T>, h: Option<T>) -> Result<T, EvalError> {
    let t = env.get(Var::T).ok_or(EvalError::MissingVariable("t"))?;
    let h = h.unwrap_or_else(|| {
        let third = lit::<T>(1.0 / 3.0);
        T::max(T::one(), t.abs()) * crate::scalar::eps::<T>().powf(third)
    });
    let mut env_p = *env;
    env_p.set(Var::T, t + h);
    let mut env_m = *env;
    env_m.set(Var::T, t - h);
    let fp = expr.eval(&env_p)?;
    let fm = expr.eval(&env_m)?;
    Ok((fp - fm) / (h + h))
}
