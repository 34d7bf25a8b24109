//! Arithmetic expressions in the two variables `x` and `t`.
//!
//! Drift and diffusion coefficients, Lyapunov candidates and the auxiliary
//! functions of the certificate theorems are all supplied as text and parsed
//! into an [`Expr`]. Partial derivatives are taken symbolically so that
//! `V_t`, `V_x`, `V_xx` and the Milstein correction `g_x` are exact.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+'|'-') term)* ;
//! term   := factor (('*'|'/') factor)* ;
//! factor := '-' factor | power ;
//! power  := atom ('^' number)? ;
//! atom   := number | 'x' | 't' | func '(' expr ')' | '(' expr ')' ;
//! func   := 'exp'|'log'|'sin'|'cos'|'sqrt'|'abs'|'sign' ;
//! ```
//!
//! Derivatives are not simplified beyond trivial constant folding; compare
//! expressions numerically, never structurally.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    T,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X => f.write_str("x"),
            Var::T => f.write_str("t"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sign,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl UnaryOp {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "sqrt" => UnaryOp::Sqrt,
            "abs" => UnaryOp::Abs,
            "sign" => UnaryOp::Sign,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Abs => "abs",
            UnaryOp::Sign => "sign",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }
}

/// Expression tree. Exponents of `Pow` are always numeric constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` at byte {offset} takes 1 argument, found {found}")]
    Arity {
        name: String,
        offset: usize,
        found: usize,
    },
    #[error("exponent at byte {offset} must be a numeric literal")]
    NonConstantExponent { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainErrorKind {
    DivisionByZero,
    LogOfNonPositive,
    SqrtOfNegative,
    InvalidPower,
    NonFinite,
}

impl fmt::Display for DomainErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainErrorKind::DivisionByZero => "division by zero",
            DomainErrorKind::LogOfNonPositive => "log of a non-positive value",
            DomainErrorKind::SqrtOfNegative => "sqrt of a negative value",
            DomainErrorKind::InvalidPower => "power undefined for this base",
            DomainErrorKind::NonFinite => "non-finite result",
        })
    }
}

/// Evaluation failure, naming the offending sub-expression and the point.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} in `{node}` at x={x}, t={t}")]
pub struct EvalError {
    pub kind: DomainErrorKind,
    pub node: String,
    pub x: f64,
    pub t: f64,
}

/// Result of symbolic differentiation.
///
/// `kinks` holds the arguments `u` of every `abs(u)` / `sign(u)` met on the
/// way; the derivative is only formal on the zero sets of those arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub expr: Expr,
    pub kinks: Vec<Expr>,
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const(value)
    }

    pub fn x() -> Self {
        Expr::Var(Var::X)
    }

    pub fn t() -> Self {
        Expr::Var(Var::T)
    }

    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Self::parse_with(source, &BTreeMap::new())
    }

    /// Parses with named numeric constants substituted for identifiers.
    pub fn parse_with(source: &str, constants: &BTreeMap<String, f64>) -> Result<Self, ParseError> {
        let tokens = tokenize(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            constants,
        };
        let expr = parser.expr()?;
        match parser.peek() {
            (Token::End, _) => Ok(expr),
            (tok, offset) => Err(ParseError::Syntax {
                offset,
                message: format!("unexpected {}", tok.describe()),
            }),
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.depends_on(var),
            Expr::Binary(_, a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    /// Evaluates at `(x, t)`; every domain violation and every non-finite
    /// intermediate value is an error.
    pub fn eval(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        let fail = |kind: DomainErrorKind, node: &Expr| EvalError {
            kind,
            node: node.to_string(),
            x,
            t,
        };
        let value = match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::X) => x,
            Expr::Var(Var::T) => t,
            Expr::Unary(op, a) => {
                let u = a.eval(x, t)?;
                match op {
                    UnaryOp::Neg => -u,
                    UnaryOp::Abs => u.abs(),
                    UnaryOp::Sign => sign(u),
                    UnaryOp::Exp => u.exp(),
                    UnaryOp::Log => {
                        if u <= 0.0 {
                            return Err(fail(DomainErrorKind::LogOfNonPositive, self));
                        }
                        u.ln()
                    }
                    UnaryOp::Sin => u.sin(),
                    UnaryOp::Cos => u.cos(),
                    UnaryOp::Sqrt => {
                        if u < 0.0 {
                            return Err(fail(DomainErrorKind::SqrtOfNegative, self));
                        }
                        u.sqrt()
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let u = a.eval(x, t)?;
                let w = b.eval(x, t)?;
                match op {
                    BinaryOp::Add => u + w,
                    BinaryOp::Sub => u - w,
                    BinaryOp::Mul => u * w,
                    BinaryOp::Div => {
                        if w == 0.0 {
                            return Err(fail(DomainErrorKind::DivisionByZero, self));
                        }
                        u / w
                    }
                }
            }
            Expr::Pow(a, n) => {
                let u = a.eval(x, t)?;
                if (u < 0.0 && n.fract() != 0.0) || (u == 0.0 && *n < 0.0) {
                    return Err(fail(DomainErrorKind::InvalidPower, self));
                }
                pow(u, *n)
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(fail(DomainErrorKind::NonFinite, self))
        }
    }

    /// Symbolic partial derivative with respect to `var`.
    pub fn differentiate(&self, var: Var) -> Derivative {
        let mut kinks = Vec::new();
        let expr = self.diff(var, &mut kinks);
        Derivative { expr, kinks }
    }

    fn diff(&self, var: Var, kinks: &mut Vec<Expr>) -> Expr {
        if !self.depends_on(var) {
            // abs/sign that do not involve var still contribute no kink in var
            return Expr::Const(0.0);
        }
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let du = a.diff(var, kinks);
                let u = (**a).clone();
                match op {
                    UnaryOp::Neg => neg(du),
                    UnaryOp::Abs => {
                        kinks.push(u.clone());
                        mul(unary(UnaryOp::Sign, u), du)
                    }
                    UnaryOp::Sign => {
                        kinks.push(u);
                        Expr::Const(0.0)
                    }
                    UnaryOp::Exp => mul(self.clone(), du),
                    UnaryOp::Log => div(du, u),
                    UnaryOp::Sin => mul(unary(UnaryOp::Cos, u), du),
                    UnaryOp::Cos => mul(neg(unary(UnaryOp::Sin, u)), du),
                    UnaryOp::Sqrt => div(du, mul(Expr::Const(2.0), self.clone())),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.diff(var, kinks);
                let db = b.diff(var, kinks);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => add(da, db),
                    BinaryOp::Sub => sub(da, db),
                    BinaryOp::Mul => add(mul(da, b), mul(a, db)),
                    BinaryOp::Div => {
                        let numerator = sub(mul(da, b.clone()), mul(a, db));
                        div(numerator, powi(b, 2.0))
                    }
                }
            }
            Expr::Pow(a, n) => {
                let du = a.diff(var, kinks);
                let outer = mul(Expr::Const(*n), powi((**a).clone(), n - 1.0));
                mul(outer, du)
            }
        }
    }
}

fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pow(u: f64, n: f64) -> f64 {
    if n.fract() == 0.0 && n.abs() <= i32::MAX as f64 {
        u.powi(n as i32)
    } else {
        u.powf(n)
    }
}

fn is_const(e: &Expr, value: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == value)
}

fn unary(op: UnaryOp, a: Expr) -> Expr {
    Expr::Unary(op, Box::new(a))
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        other => unary(UnaryOp::Neg, other),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p + q),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p - q),
        _ if is_const(&b, 0.0) => a,
        _ if is_const(&a, 0.0) => neg(b),
        _ => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p * q),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Expr::Const(0.0),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_const(&b, 1.0) {
        return a;
    }
    if is_const(&a, 0.0) {
        return Expr::Const(0.0);
    }
    Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b))
}

fn powi(a: Expr, n: f64) -> Expr {
    if n == 0.0 {
        Expr::Const(1.0)
    } else if n == 1.0 {
        a
    } else {
        Expr::Pow(Box::new(a), n)
    }
}

// Canonical printer: fully parenthesised binary nodes, shortest round-trip
// float literals. Re-parsing the output yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "-({a})"),
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Pow(a, n) => {
                let atomic = match a.as_ref() {
                    Expr::Var(_) => true,
                    Expr::Const(c) => *c >= 0.0,
                    Expr::Unary(op, _) => *op != UnaryOp::Neg,
                    _ => false,
                };
                if atomic {
                    write!(f, "{a}^{n:?}")
                } else {
                    write!(f, "({a})^{n:?}")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Number(n) => format!("number {n}"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Plus => "`+`".into(),
            Token::Minus => "`-`".into(),
            Token::Star => "`*`".into(),
            Token::Slash => "`/`".into(),
            Token::Caret => "`^`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
            Token::Comma => "`,`".into(),
            Token::End => "end of input".into(),
        }
    }
}

fn tokenize(source: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Some(Token::Plus),
            b'-' => Some(Token::Minus),
            b'*' => Some(Token::Star),
            b'/' => Some(Token::Slash),
            b'^' => Some(Token::Caret),
            b'(' => Some(Token::LParen),
            b')' => Some(Token::RParen),
            b',' => Some(Token::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            tokens.push((tok, start));
            i += 1;
        } else if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &source[start..i];
            let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("number `{text}` is out of range"),
                });
            }
            tokens.push((Token::Number(value), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push((Token::Ident(source[start..i].to_string()), start));
        } else {
            let ch = source[start..].chars().next().unwrap_or('?');
            return Err(ParseError::Syntax {
                offset: start,
                message: format!("unexpected character `{ch}`"),
            });
        }
    }
    tokens.push((Token::End, source.len()));
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    constants: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> (Token, usize) {
        self.tokens[self.pos].clone()
    }

    fn bump(&mut self) -> (Token, usize) {
        let tok = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, want: Token) -> Result<usize, ParseError> {
        let (tok, offset) = self.bump();
        if tok == want {
            Ok(offset)
        } else {
            Err(ParseError::Syntax {
                offset,
                message: format!("expected {}, found {}", want.describe(), tok.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().0 {
                Token::Plus => BinaryOp::Add,
                Token::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek().0 {
                Token::Star => BinaryOp::Mul,
                Token::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.peek().0 == Token::Minus {
            self.bump();
            let inner = self.factor()?;
            return Ok(match inner {
                Expr::Const(c) => Expr::Const(-c),
                other => Expr::Unary(UnaryOp::Neg, Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek().0 != Token::Caret {
            return Ok(base);
        }
        self.bump();
        let (mut tok, mut offset) = self.bump();
        let negative = tok == Token::Minus;
        if negative {
            (tok, offset) = self.bump();
        }
        let exponent = match tok {
            Token::Number(n) => {
                if negative {
                    -n
                } else {
                    n
                }
            }
            Token::End => {
                return Err(ParseError::Syntax {
                    offset,
                    message: "missing exponent".into(),
                })
            }
            _ => return Err(ParseError::NonConstantExponent { offset }),
        };
        if self.peek().0 == Token::Caret {
            return Err(ParseError::Syntax {
                offset: self.peek().1,
                message: "chained `^` needs parentheses".into(),
            });
        }
        Ok(Expr::Pow(Box::new(base), exponent))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, offset) = self.bump();
        match tok {
            Token::Number(n) => Ok(Expr::Const(n)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Token::Ident(name) => match name.as_str() {
                "x" => Ok(Expr::x()),
                "t" => Ok(Expr::t()),
                _ => {
                    if let Some(op) = UnaryOp::from_name(&name) {
                        self.call(op, name, offset)
                    } else if let Some(value) = self.constants.get(&name) {
                        Ok(Expr::Const(*value))
                    } else {
                        Err(ParseError::UnknownIdentifier { name, offset })
                    }
                }
            },
            other => Err(ParseError::Syntax {
                offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn call(&mut self, op: UnaryOp, name: String, offset: usize) -> Result<Expr, ParseError> {
        self.expect(Token::LParen)?;
        let mut args = Vec::new();
        if self.peek().0 != Token::RParen {
            args.push(self.expr()?);
            while self.peek().0 == Token::Comma {
                self.bump();
                args.push(self.expr()?);
            }
        }
        self.expect(Token::RParen)?;
        if args.len() != 1 {
            return Err(ParseError::Arity {
                name,
                offset,
                found: args.len(),
            });
        }
        Ok(Expr::Unary(op, Box::new(args.pop().unwrap())))
    }
}
