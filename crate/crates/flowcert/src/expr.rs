//! Scalar expression language over the state variables `x1..xn`.
//!
//! Expressions are what problem files are written in: field components,
//! set predicates and user-supplied barrier candidates all parse through
//! here. The grammar is deliberately small: arithmetic, `^` (right
//! associative), unary minus and the smooth unary functions `sin`, `cos`,
//! `exp`, `sqrt`. Non-smooth constructs (`abs`, `min`, `max`) are
//! recognized and rejected so that everything downstream may assume a
//! differentiable field. Printing and parsing round-trip, and
//! [`Expr::diff`] produces exact symbolic partial derivatives.

use std::fmt;
use thiserror::Error;

/// Unary functions the language admits. All are smooth on the domains we
/// evaluate them on; `sqrt` follows IEEE semantics for negative arguments.
/// `Ln` is not part of the surface grammar: it arises only when
/// differentiating a power with a non-constant exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Ln,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
        }
    }
}

/// Expression tree over variables `x1..xn` (stored zero-based).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("variable `x{index}` at byte {pos} exceeds dimension {dim}")]
    DimensionOverflow { pos: usize, index: usize, dim: usize },
    #[error("non-smooth construct `{name}` at byte {pos} is not allowed")]
    NonSmooth { pos: usize, name: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    /// Comparison tokens are only meaningful in predicate context but the
    /// lexer always produces them; the expression parser treats them as
    /// end-of-input.
    Le,
    Lt,
    Ge,
    Gt,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

pub(crate) struct Lexer {
    toks: Vec<Spanned>,
    end: usize,
}

fn lex(src: &str) -> Result<Lexer, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '+' => {
                toks.push(Spanned { tok: Tok::Plus, pos: i });
                i += 1;
            }
            '-' => {
                toks.push(Spanned { tok: Tok::Minus, pos: i });
                i += 1;
            }
            '*' => {
                toks.push(Spanned { tok: Tok::Star, pos: i });
                i += 1;
            }
            '/' => {
                toks.push(Spanned { tok: Tok::Slash, pos: i });
                i += 1;
            }
            '^' => {
                toks.push(Spanned { tok: Tok::Caret, pos: i });
                i += 1;
            }
            '(' => {
                toks.push(Spanned { tok: Tok::LParen, pos: i });
                i += 1;
            }
            ')' => {
                toks.push(Spanned { tok: Tok::RParen, pos: i });
                i += 1;
            }
            ',' => {
                toks.push(Spanned { tok: Tok::Comma, pos: i });
                i += 1;
            }
            '<' | '>' => {
                let strictly = i + 1 >= bytes.len() || bytes[i + 1] != b'=';
                let tok = match (c, strictly) {
                    ('<', true) => Tok::Lt,
                    ('<', false) => Tok::Le,
                    ('>', true) => Tok::Gt,
                    ('>', false) => Tok::Ge,
                    _ => unreachable!(),
                };
                toks.push(Spanned { tok, pos: i });
                i += if strictly { 1 } else { 2 };
            }
            '&' | '|' => {
                // `&&` / `||` are accepted as synonyms for and/or.
                if i + 1 < bytes.len() && bytes[i + 1] == bytes[i] {
                    let name = if c == '&' { "and" } else { "or" };
                    toks.push(Spanned { tok: Tok::Ident(name.to_string()), pos: i });
                    i += 2;
                } else {
                    return Err(ParseError::Syntax {
                        pos: i,
                        msg: format!("stray `{c}`"),
                    });
                }
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let val: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    msg: format!("bad number literal `{text}`"),
                })?;
                toks.push(Spanned { tok: Tok::Num(val), pos: start });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push(Spanned {
                    tok: Tok::Ident(src[start..i].to_string()),
                    pos: start,
                });
            }
            other => {
                return Err(ParseError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(Lexer { toks, end: src.len() })
}

/// Recursive-descent parser; `dim` bounds the admissible variable indices.
pub(crate) struct Parser {
    lexer: Lexer,
    pub(crate) at: usize,
    dim: usize,
}

impl Parser {
    pub(crate) fn new(src: &str, dim: usize) -> Result<Self, ParseError> {
        Ok(Parser { lexer: lex(src)?, at: 0, dim })
    }

    fn peek(&self) -> Option<&Spanned> {
        self.lexer.toks.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map(|s| s.pos).unwrap_or(self.lexer.end)
    }

    fn bump(&mut self) -> Option<Spanned> {
        let t = self.lexer.toks.get(self.at).cloned();
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(s) if s.tok == want => {
                self.at += 1;
                Ok(())
            }
            _ => Err(ParseError::Syntax {
                pos: self.pos(),
                msg: format!("expected {what}"),
            }),
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.at >= self.lexer.toks.len()
    }

    pub(crate) fn finish(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(ParseError::Syntax {
                pos: self.pos(),
                msg: "trailing input".to_string(),
            })
        }
    }

    pub(crate) fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().map(|s| s.tok.clone()) {
                Some(Tok::Plus) => {
                    self.at += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.at += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek().map(|s| s.tok.clone()) {
                Some(Tok::Star) => {
                    self.at += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.at += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // Unary minus binds looser than `^`: `-x1^2` is `-(x1^2)`.
    fn factor(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Minus) = self.peek().map(|s| s.tok.clone()) {
            self.at += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek().map(|s| s.tok.clone()) {
            self.at += 1;
            // Right associative; the exponent may carry its own unary minus.
            let exponent = self.factor()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump().map(|s| s.tok) {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => self.ident(pos, &name),
            _ => Err(ParseError::Syntax {
                pos,
                msg: "expected a number, variable, function call or `(`".to_string(),
            }),
        }
    }

    fn ident(&mut self, pos: usize, name: &str) -> Result<Expr, ParseError> {
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = rest.parse().map_err(|_| ParseError::Syntax {
                    pos,
                    msg: format!("bad variable `{name}`"),
                })?;
                if index == 0 {
                    return Err(ParseError::Syntax {
                        pos,
                        msg: "variables are numbered from x1".to_string(),
                    });
                }
                if index > self.dim {
                    return Err(ParseError::DimensionOverflow {
                        pos,
                        index,
                        dim: self.dim,
                    });
                }
                return Ok(Expr::Var(index - 1));
            }
        }
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            "abs" | "min" | "max" => {
                return Err(ParseError::NonSmooth {
                    pos,
                    name: name.to_string(),
                })
            }
            _ => None,
        };
        match func {
            Some(f) => {
                self.expect(Tok::LParen, "`(` after function name")?;
                let arg = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::Call(f, Box::new(arg)))
            }
            None => Err(ParseError::UnknownIdentifier {
                pos,
                name: name.to_string(),
            }),
        }
    }

    pub(crate) fn peek_comparison(&self) -> Option<Cmp> {
        match self.peek().map(|s| &s.tok) {
            Some(Tok::Le) => Some(Cmp::Le),
            Some(Tok::Lt) => Some(Cmp::Lt),
            Some(Tok::Ge) => Some(Cmp::Ge),
            Some(Tok::Gt) => Some(Cmp::Gt),
            _ => None,
        }
    }

    pub(crate) fn bump_token(&mut self) {
        self.at += 1;
    }

    pub(crate) fn peek_ident(&self) -> Option<&str> {
        match self.peek().map(|s| &s.tok) {
            Some(Tok::Ident(n)) => Some(n.as_str()),
            _ => None,
        }
    }

    pub(crate) fn peek_lparen(&self) -> bool {
        matches!(self.peek().map(|s| &s.tok), Some(Tok::LParen))
    }

    pub(crate) fn eat_rparen(&mut self) -> Result<(), ParseError> {
        self.expect(Tok::RParen, "`)`")
    }

    pub(crate) fn error_here(&self, msg: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos(),
            msg: msg.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Cmp {
    Le,
    Lt,
    Ge,
    Gt,
}

/// Parse a single expression over `dim` variables.
pub fn parse_expression(src: &str, dim: usize) -> Result<Expr, ParseError> {
    let mut p = Parser::new(src, dim)?;
    let e = p.expr()?;
    p.finish()?;
    Ok(e)
}

impl Expr {
    /// Evaluate at a state vector. Total: IEEE semantics propagate inf/NaN
    /// for out-of-range operations such as division by zero.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => {
                let base = a.eval(x);
                // Integer exponents go through repeated multiplication so
                // that small polynomial evaluations stay exact.
                if let Expr::Const(e) = **b {
                    if e.fract() == 0.0 && e.abs() <= i32::MAX as f64 {
                        return base.powi(e as i32);
                    }
                }
                base.powf(b.eval(x))
            }
            Expr::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Sqrt => v.sqrt(),
                    Func::Ln => v.ln(),
                }
            }
        }
    }

    /// Exact symbolic partial derivative with respect to `x{var+1}`.
    ///
    /// Results are lightly const-folded so printed derivatives stay
    /// readable; no deeper algebraic simplification is attempted.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(var)),
            Expr::Add(a, b) => add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                // (a/b)' = (a'b - ab') / b^2
                let num = sub(
                    mul(a.diff(var), (**b).clone()),
                    mul((**a).clone(), b.diff(var)),
                );
                div(num, pow((**b).clone(), Expr::Const(2.0)))
            }
            Expr::Pow(a, b) => {
                if let Expr::Const(e) = **b {
                    // d(a^e) = e * a^(e-1) * a'
                    return mul(
                        mul(Expr::Const(e), pow((**a).clone(), Expr::Const(e - 1.0))),
                        a.diff(var),
                    );
                }
                // d(a^b) = a^b * (b' ln a + b a'/a); valid where a > 0,
                // which is the only region a variable exponent is smooth on.
                let dlog = div(mul((**b).clone(), a.diff(var)), (**a).clone());
                mul(
                    pow((**a).clone(), (**b).clone()),
                    add(
                        mul(b.diff(var), Expr::Call(Func::Ln, a.clone())),
                        dlog,
                    ),
                )
            }
            Expr::Call(f, a) => {
                let inner = a.diff(var);
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => neg(Expr::Call(Func::Sin, a.clone())),
                    Func::Exp => Expr::Call(Func::Exp, a.clone()),
                    Func::Sqrt => div(
                        Expr::Const(0.5),
                        Expr::Call(Func::Sqrt, a.clone()),
                    ),
                    Func::Ln => div(Expr::Const(1.0), (**a).clone()),
                };
                mul(outer, inner)
            }
        }
    }

    /// Largest variable index mentioned, plus one. Zero for constants.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.arity().max(b.arity()),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(v) if *v < 0.0 => 3,
            _ => 5,
        }
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(-v),
        other => Expr::Neg(Box::new(other)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), _) if *z == 0.0 => b,
        (_, Expr::Const(z)) if *z == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(z)) if *z == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), _) if *o == 1.0 => b,
        (_, Expr::Const(o)) if *o == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(z), _) if *z == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(o)) if *o == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Const(o)) if *o == 1.0 => a,
        (_, Expr::Const(z)) if *z == 0.0 => Expr::Const(1.0),
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // `min_prec` is the loosest binding the context tolerates without
        // parentheses. Left operands of left-associative operators reuse the
        // operator precedence; right operands require one tighter.
        fn go(e: &Expr, min_prec: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let prec = e.precedence();
            let parens = prec < min_prec;
            if parens {
                write!(f, "(")?;
            }
            match e {
                Expr::Const(v) => write!(f, "{v}")?,
                Expr::Var(i) => write!(f, "x{}", i + 1)?,
                Expr::Neg(a) => {
                    write!(f, "-")?;
                    go(a, 3, f)?;
                }
                Expr::Add(a, b) => {
                    go(a, 1, f)?;
                    write!(f, " + ")?;
                    go(b, 2, f)?;
                }
                Expr::Sub(a, b) => {
                    go(a, 1, f)?;
                    write!(f, " - ")?;
                    go(b, 2, f)?;
                }
                Expr::Mul(a, b) => {
                    go(a, 2, f)?;
                    write!(f, "*")?;
                    go(b, 3, f)?;
                }
                Expr::Div(a, b) => {
                    go(a, 2, f)?;
                    write!(f, "/")?;
                    go(b, 3, f)?;
                }
                Expr::Pow(a, b) => {
                    go(a, 5, f)?;
                    write!(f, "^")?;
                    go(b, 4, f)?;
                }
                Expr::Call(func, a) => {
                    write!(f, "{}(", func.name())?;
                    go(a, 0, f)?;
                    write!(f, ")")?;
                }
            }
            if parens {
                write!(f, ")")?;
            }
            Ok(())
        }
        go(self, 0, f)
    }
}
