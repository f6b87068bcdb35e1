//! Closed-form expressions in the coordinates `x0`, `x1` with exact
//! symbolic differentiation.
//!
//! This is the front end for the conformal factor `sigma`: geometry wants
//! exact partial derivatives (to fourth order) so that curvature and the
//! transport recursions are free of stencil noise. The grammar is small on
//! purpose: identifiers `x0`, `x1`; numeric literals; `+ - * / ^`;
//! `exp`, `ln`, `sin`, `cos`, `tanh`; parentheses.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Coordinate variables of the 2D chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X0,
    X1,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::X0 => "x0",
            Var::X1 => "x1",
        }
    }
}

/// Unary functions admitted by the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        match s {
            "exp" => Some(Func::Exp),
            "ln" => Some(Func::Ln),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "tanh" => Some(Func::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tanh => v.tanh(),
        }
    }
}

/// Expression tree over `x0`, `x1`. Construction goes through the smart
/// constructors so that trees stay lightly normalized (constants folded,
/// additive/multiplicative identities pruned); this keeps repeated
/// differentiation from blowing up.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    Pow(Arc<Expr>, Arc<Expr>),
    Neg(Arc<Expr>),
    Call(Func, Arc<Expr>),
}

/// Parse failure, carrying the byte offset into the source string.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    /// Byte offset of the offending token.
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } => *offset,
            ParseError::UnknownIdentifier { offset, .. } => *offset,
        }
    }
}

impl Expr {
    /// Parse an expression from source text.
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        match p.peek() {
            (Token::Eof, _) => Ok(e),
            (tok, off) => Err(ParseError::Syntax {
                offset: off,
                message: format!("unexpected {}", tok.describe()),
            }),
        }
    }

    /// Evaluate at the point `(x0, x1)`.
    pub fn eval(&self, x0: f64, x1: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::X0) => x0,
            Expr::Var(Var::X1) => x1,
            Expr::Add(a, b) => a.eval(x0, x1) + b.eval(x0, x1),
            Expr::Sub(a, b) => a.eval(x0, x1) - b.eval(x0, x1),
            Expr::Mul(a, b) => a.eval(x0, x1) * b.eval(x0, x1),
            Expr::Div(a, b) => a.eval(x0, x1) / b.eval(x0, x1),
            Expr::Pow(a, b) => a.eval(x0, x1).powf(b.eval(x0, x1)),
            Expr::Neg(a) => -a.eval(x0, x1),
            Expr::Call(f, a) => f.apply(a.eval(x0, x1)),
        }
    }

    /// Exact partial derivative with respect to `v`, as a new tree.
    pub fn diff(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(w) => Expr::Const(if *w == v { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => add(a.diff(v), b.diff(v)),
            Expr::Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Expr::Mul(a, b) => add(
                mul(a.diff(v), (**b).clone()),
                mul((**a).clone(), b.diff(v)),
            ),
            Expr::Div(a, b) => {
                // (a/b)' = a'/b - a b'/b^2
                sub(
                    div(a.diff(v), (**b).clone()),
                    div(
                        mul((**a).clone(), b.diff(v)),
                        mul((**b).clone(), (**b).clone()),
                    ),
                )
            }
            Expr::Pow(a, b) => {
                if let Expr::Const(n) = **b {
                    // d(a^n) = n a^(n-1) a'
                    mul(
                        mul(Expr::Const(n), pow((**a).clone(), Expr::Const(n - 1.0))),
                        a.diff(v),
                    )
                } else {
                    // a^b = exp(b ln a): d = a^b (b' ln a + b a'/a)
                    mul(
                        pow((**a).clone(), (**b).clone()),
                        add(
                            mul(b.diff(v), call(Func::Ln, (**a).clone())),
                            div(mul((**b).clone(), a.diff(v)), (**a).clone()),
                        ),
                    )
                }
            }
            Expr::Neg(a) => neg(a.diff(v)),
            Expr::Call(f, a) => {
                let inner = a.diff(v);
                let outer = match f {
                    Func::Exp => call(Func::Exp, (**a).clone()),
                    Func::Ln => return div(inner, (**a).clone()),
                    Func::Sin => call(Func::Cos, (**a).clone()),
                    Func::Cos => neg(call(Func::Sin, (**a).clone())),
                    Func::Tanh => sub(
                        Expr::Const(1.0),
                        pow(call(Func::Tanh, (**a).clone()), Expr::Const(2.0)),
                    ),
                };
                mul(outer, inner)
            }
        }
    }

    /// Mixed partial d^{i+j} / (dx0^i dx1^j).
    pub fn partial(&self, i: usize, j: usize) -> Expr {
        let mut e = self.clone();
        for _ in 0..i {
            e = e.diff(Var::X0);
        }
        for _ in 0..j {
            e = e.diff(Var::X1);
        }
        e
    }

    /// The constant value if the tree folded to a literal.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// True when the tree folded to the literal zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// True when the tree mentions neither coordinate.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(_) => false,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.is_constant() && b.is_constant(),
            Expr::Neg(a) | Expr::Call(_, a) => a.is_constant(),
        }
    }
}

// Smart constructors: fold constants, prune identities. These are the only
// way derivative trees are assembled, so the normalizations compound.

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), _) if *z == 0.0 => b,
        (_, Expr::Const(z)) if *z == 0.0 => a,
        _ => Expr::Add(Arc::new(a), Arc::new(b)),
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(z)) if *z == 0.0 => a,
        (Expr::Const(z), _) if *z == 0.0 => neg(b),
        _ => Expr::Sub(Arc::new(a), Arc::new(b)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), _) if *o == 1.0 => b,
        (_, Expr::Const(o)) if *o == 1.0 => a,
        (Expr::Const(m), _) if *m == -1.0 => neg(b),
        (_, Expr::Const(m)) if *m == -1.0 => neg(a),
        _ => Expr::Mul(Arc::new(a), Arc::new(b)),
    }
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
        (Expr::Const(z), _) if *z == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(o)) if *o == 1.0 => a,
        _ => Expr::Div(Arc::new(a), Arc::new(b)),
    }
}

pub(crate) fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.powf(*y)),
        (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(1.0),
        (_, Expr::Const(o)) if *o == 1.0 => a,
        _ => Expr::Pow(Arc::new(a), Arc::new(b)),
    }
}

pub(crate) fn neg(a: Expr) -> Expr {
    match &a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Neg(inner) => (**inner).clone(),
        _ => Expr::Neg(Arc::new(a)),
    }
}

pub(crate) fn call(f: Func, a: Expr) -> Expr {
    match &a {
        Expr::Const(x) => Expr::Const(f.apply(*x)),
        _ => Expr::Call(f, Arc::new(a)),
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized except at the leaves; output reparses to an
    /// equivalent tree.
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 || c.fract() != 0.0 || c.abs() >= 1e17 {
                    write!(out, "({c})")
                } else {
                    write!(out, "{c}")
                }
            }
            Expr::Var(v) => write!(out, "{}", v.name()),
            Expr::Add(a, b) => write!(out, "({a} + {b})"),
            Expr::Sub(a, b) => write!(out, "({a} - {b})"),
            Expr::Mul(a, b) => write!(out, "({a} * {b})"),
            Expr::Div(a, b) => write!(out, "({a} / {b})"),
            Expr::Pow(a, b) => write!(out, "({a} ^ {b})"),
            Expr::Neg(a) => write!(out, "(-{a})"),
            Expr::Call(f, a) => write!(out, "{}({a})", f.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Eof,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(n) => format!("number `{n}`"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Plus => "`+`".into(),
            Token::Minus => "`-`".into(),
            Token::Star => "`*`".into(),
            Token::Slash => "`/`".into(),
            Token::Caret => "`^`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
            Token::Eof => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        match c {
            '+' => {
                out.push((Token::Plus, start));
                i += 1;
            }
            '-' => {
                out.push((Token::Minus, start));
                i += 1;
            }
            '*' => {
                out.push((Token::Star, start));
                i += 1;
            }
            '/' => {
                out.push((Token::Slash, start));
                i += 1;
            }
            '^' => {
                out.push((Token::Caret, start));
                i += 1;
            }
            '(' => {
                out.push((Token::LParen, start));
                i += 1;
            }
            ')' => {
                out.push((Token::RParen, start));
                i += 1;
            }
            _ if c.is_ascii_digit() || (c == '.' && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_digit()) => {
                while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // Exponent part: e / E with optional sign, digits required.
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                out.push((Token::Num(value), start));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Token::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    out.push((Token::Eof, src.len()));
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> (Token, usize) {
        self.tokens[self.pos].clone()
    }

    fn bump(&mut self) -> (Token, usize) {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Token, what: &str) -> Result<(), ParseError> {
        let (tok, off) = self.bump();
        if &tok == want {
            Ok(())
        } else {
            Err(ParseError::Syntax {
                offset: off,
                message: format!("expected {what}, found {}", tok.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.term()?;
        loop {
            match self.peek().0 {
                Token::Plus => {
                    self.bump();
                    e = add(e, self.term()?);
                }
                Token::Minus => {
                    self.bump();
                    e = sub(e, self.term()?);
                }
                _ => return Ok(e),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.unary()?;
        loop {
            match self.peek().0 {
                Token::Star => {
                    self.bump();
                    e = mul(e, self.unary()?);
                }
                Token::Slash => {
                    self.bump();
                    e = div(e, self.unary()?);
                }
                _ => return Ok(e),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().0 {
            Token::Minus => {
                self.bump();
                Ok(neg(self.unary()?))
            }
            Token::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek().0 == Token::Caret {
            self.bump();
            // Right associative; the exponent may carry a unary sign.
            let exponent = self.unary()?;
            Ok(pow(base, exponent))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, off) = self.bump();
        match tok {
            Token::Num(v) => Ok(Expr::Const(v)),
            Token::Ident(name) => {
                if self.peek().0 == Token::LParen {
                    let f = Func::from_name(&name).ok_or(ParseError::UnknownIdentifier {
                        offset: off,
                        name: name.clone(),
                    })?;
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(&Token::RParen, "`)`")?;
                    Ok(call(f, arg))
                } else {
                    match name.as_str() {
                        "x0" => Ok(Expr::Var(Var::X0)),
                        "x1" => Ok(Expr::Var(Var::X1)),
                        _ => Err(ParseError::UnknownIdentifier { offset: off, name }),
                    }
                }
            }
            Token::LParen => {
                let e = self.expr()?;
                self.expect(&Token::RParen, "`)`")?;
                Ok(e)
            }
            other => Err(ParseError::Syntax {
                offset: off,
                message: format!("expected a value, found {}", other.describe()),
            }),
        }
    }
}
