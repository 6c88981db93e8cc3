//! Safety problem descriptions: a vector field on a box domain together
//! with initial and unsafe sets given as sign conditions on expressions.
//!
//! Problem files are line oriented. `#` starts a comment, blank lines are
//! skipped, and each remaining line is one `key = value` binding:
//!
//! ```text
//! dim    = 2
//! field  = [ "-x2 - 0.5*x1", "x1 - 0.5*x2" ]
//! domain = [ [-3.3, 3.3], [-3.3, 3.3] ]
//! init   = "(x1 - 1)^2 + x2^2 <= 0.04"
//! unsafe = "x1^2 + x2^2 >= 9"
//! ```
//!
//! A parsed problem maintains the invariant that the region not covered by
//! the unsafe predicate lies strictly inside the domain box. This is
//! enforced by sampling every face of the box: each face sample must
//! satisfy the unsafe predicate. Escaping the box can then be treated as
//! entering the unsafe set by everything downstream.

use crate::expr::{parse_expression, Cmp, Expr, ParseError, Parser};
use std::fmt;
use thiserror::Error;

/// Boolean combination of sign conditions, normalized to `expr <= 0` and
/// `expr < 0` leaves.
#[derive(Debug, Clone, PartialEq)]
pub enum SetPredicate {
    /// `expr <= 0`
    Le(Expr),
    /// `expr < 0`
    Lt(Expr),
    And(Box<SetPredicate>, Box<SetPredicate>),
    Or(Box<SetPredicate>, Box<SetPredicate>),
}

impl SetPredicate {
    pub fn eval(&self, x: &[f64]) -> bool {
        match self {
            SetPredicate::Le(e) => e.eval(x) <= 0.0,
            SetPredicate::Lt(e) => e.eval(x) < 0.0,
            SetPredicate::And(a, b) => a.eval(x) && b.eval(x),
            SetPredicate::Or(a, b) => a.eval(x) || b.eval(x),
        }
    }
}

impl fmt::Display for SetPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetPredicate::Le(e) => write!(f, "{e} <= 0"),
            SetPredicate::Lt(e) => write!(f, "{e} < 0"),
            SetPredicate::And(a, b) => {
                for (i, side) in [a, b].into_iter().enumerate() {
                    if i > 0 {
                        write!(f, " and ")?;
                    }
                    if matches!(**side, SetPredicate::Or(..)) {
                        write!(f, "({side})")?;
                    } else {
                        write!(f, "{side}")?;
                    }
                }
                Ok(())
            }
            SetPredicate::Or(a, b) => write!(f, "{a} or {b}"),
        }
    }
}

/// Axis-aligned box `[lo_i, hi_i]` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }
}

#[derive(Debug, Clone)]
pub struct SafetyProblem {
    pub dim: usize,
    pub field: Vec<Expr>,
    pub domain: DomainBox,
    pub init: SetPredicate,
    pub unsafe_set: SetPredicate,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {source}")]
    Expr {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("duplicate key `{key}` on line {line}")]
    DuplicateKey { key: String, line: usize },
    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { key: String, line: usize },
    #[error(
        "domain face sample {point:?} (axis {axis}, {side} face) does not satisfy the \
         unsafe predicate; the not-unsafe region must lie strictly inside the domain box"
    )]
    UnboundedSafeRegion {
        axis: usize,
        side: &'static str,
        point: Vec<f64>,
    },
}

/// Parse a predicate over `dim` variables.
///
/// Grammar: `or`-separated list of `and`-separated atoms; an atom is a
/// parenthesized predicate or a comparison `expr (<=|<|>=|>) expr`.
/// `&&`/`||` are synonyms. Comparisons normalize so the right-hand side
/// is zero, with `>=`/`>` flipping the sign of the difference.
pub fn parse_predicate(src: &str, dim: usize) -> Result<SetPredicate, ParseError> {
    let mut p = Parser::new(src, dim)?;
    let pred = pred_or(&mut p, dim)?;
    p.finish()?;
    Ok(pred)
}

fn pred_or(p: &mut Parser, dim: usize) -> Result<SetPredicate, ParseError> {
    let mut lhs = pred_and(p, dim)?;
    while p.peek_ident() == Some("or") {
        p.bump_token();
        let rhs = pred_and(p, dim)?;
        lhs = SetPredicate::Or(Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn pred_and(p: &mut Parser, dim: usize) -> Result<SetPredicate, ParseError> {
    let mut lhs = pred_atom(p, dim)?;
    while p.peek_ident() == Some("and") {
        p.bump_token();
        let rhs = pred_atom(p, dim)?;
        lhs = SetPredicate::And(Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn pred_atom(p: &mut Parser, dim: usize) -> Result<SetPredicate, ParseError> {
    // `(` is ambiguous between a grouped predicate and a parenthesized
    // expression; try the predicate reading first and rewind on failure.
    if p.peek_lparen() {
        let mark = p.at;
        p.bump_token();
        if let Ok(inner) = pred_or(p, dim) {
            if p.eat_rparen().is_ok() {
                return Ok(inner);
            }
        }
        p.at = mark;
    }
    comparison(p)
}

fn comparison(p: &mut Parser) -> Result<SetPredicate, ParseError> {
    let lhs = p.expr()?;
    let Some(cmp) = p.peek_comparison() else {
        return Err(p.error_here("expected a comparison operator (<=, <, >=, >)"));
    };
    p.bump_token();
    let rhs = p.expr()?;
    let delta = |a: Expr, b: Expr| Expr::Sub(Box::new(a), Box::new(b));
    Ok(match cmp {
        Cmp::Le => SetPredicate::Le(delta(lhs, rhs)),
        Cmp::Lt => SetPredicate::Lt(delta(lhs, rhs)),
        Cmp::Ge => SetPredicate::Le(delta(rhs, lhs)),
        Cmp::Gt => SetPredicate::Lt(delta(rhs, lhs)),
    })
}

/// Default per-axis sample count for the face check in [`parse_problem`].
pub const FACE_SAMPLES: usize = 33;

pub fn parse_problem(text: &str) -> Result<SafetyProblem, ProblemError> {
    let p = parse_problem_unchecked(text)?;
    p.check_boundedness(FACE_SAMPLES)?;
    Ok(p)
}

/// Parse without the face-sampling invariant check; used by tests that
/// need deliberately unbounded problems.
pub fn parse_problem_unchecked(text: &str) -> Result<SafetyProblem, ProblemError> {
    let mut dim: Option<(usize, usize)> = None;
    let mut field: Option<(usize, Vec<String>)> = None;
    let mut domain: Option<(usize, Vec<(f64, f64)>)> = None;
    let mut init: Option<(usize, String)> = None;
    let mut unsafe_src: Option<(usize, String)> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = strip_comment(raw);
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(eq) = trimmed.find('=') else {
            return Err(ProblemError::Malformed {
                line,
                msg: "expected `key = value`".to_string(),
            });
        };
        let key = trimmed[..eq].trim();
        let value = trimmed[eq + 1..].trim();
        let dup = |key: &str| ProblemError::DuplicateKey {
            key: key.to_string(),
            line,
        };
        match key {
            "dim" => {
                if dim.is_some() {
                    return Err(dup(key));
                }
                let d: usize = value.parse().map_err(|_| ProblemError::Malformed {
                    line,
                    msg: format!("bad dimension `{value}`"),
                })?;
                if d == 0 {
                    return Err(ProblemError::Malformed {
                        line,
                        msg: "dimension must be at least 1".to_string(),
                    });
                }
                dim = Some((line, d));
            }
            "field" => {
                if field.is_some() {
                    return Err(dup(key));
                }
                field = Some((line, parse_string_list(value, line)?));
            }
            "domain" => {
                if domain.is_some() {
                    return Err(dup(key));
                }
                domain = Some((line, parse_interval_list(value, line)?));
            }
            "init" => {
                if init.is_some() {
                    return Err(dup(key));
                }
                init = Some((line, parse_quoted(value, line)?));
            }
            "unsafe" => {
                if unsafe_src.is_some() {
                    return Err(dup(key));
                }
                unsafe_src = Some((line, parse_quoted(value, line)?));
            }
            other => {
                return Err(ProblemError::UnknownKey {
                    key: other.to_string(),
                    line,
                })
            }
        }
    }

    let (_, dim) = dim.ok_or(ProblemError::MissingKey("dim"))?;
    let (field_line, field_srcs) = field.ok_or(ProblemError::MissingKey("field"))?;
    let (domain_line, intervals) = domain.ok_or(ProblemError::MissingKey("domain"))?;
    let (init_line, init_src) = init.ok_or(ProblemError::MissingKey("init"))?;
    let (unsafe_line, unsafe_str) = unsafe_src.ok_or(ProblemError::MissingKey("unsafe"))?;

    if field_srcs.len() != dim {
        return Err(ProblemError::Malformed {
            line: field_line,
            msg: format!("field has {} components, expected {dim}", field_srcs.len()),
        });
    }
    if intervals.len() != dim {
        return Err(ProblemError::Malformed {
            line: domain_line,
            msg: format!("domain has {} intervals, expected {dim}", intervals.len()),
        });
    }
    for (axis, (lo, hi)) in intervals.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ProblemError::Malformed {
                line: domain_line,
                msg: format!("axis {}: need finite lo < hi, got [{lo}, {hi}]", axis + 1),
            });
        }
    }

    let mut exprs = Vec::with_capacity(dim);
    for src in &field_srcs {
        exprs.push(parse_expression(src, dim).map_err(|source| ProblemError::Expr {
            line: field_line,
            source,
        })?);
    }
    let init = parse_predicate(&init_src, dim).map_err(|source| ProblemError::Expr {
        line: init_line,
        source,
    })?;
    let unsafe_set = parse_predicate(&unsafe_str, dim).map_err(|source| ProblemError::Expr {
        line: unsafe_line,
        source,
    })?;

    Ok(SafetyProblem {
        dim,
        field: exprs,
        domain: DomainBox {
            lo: intervals.iter().map(|iv| iv.0).collect(),
            hi: intervals.iter().map(|iv| iv.1).collect(),
        },
        init,
        unsafe_set,
    })
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, b) in line.bytes().enumerate() {
        match b {
            b'"' => in_quote = !in_quote,
            b'#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_quoted(value: &str, line: usize) -> Result<String, ProblemError> {
    let v = value.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        Ok(v[1..v.len() - 1].to_string())
    } else {
        Err(ProblemError::Malformed {
            line,
            msg: format!("expected a quoted string, got `{v}`"),
        })
    }
}

fn parse_string_list(value: &str, line: usize) -> Result<Vec<String>, ProblemError> {
    let inner = bracket_inner(value, line)?;
    let mut out = Vec::new();
    for part in split_top_level(inner) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(parse_quoted(part, line)?);
    }
    if out.is_empty() {
        return Err(ProblemError::Malformed {
            line,
            msg: "empty list".to_string(),
        });
    }
    Ok(out)
}

fn parse_interval_list(value: &str, line: usize) -> Result<Vec<(f64, f64)>, ProblemError> {
    let inner = bracket_inner(value, line)?;
    let mut out = Vec::new();
    for part in split_top_level(inner) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let pair = bracket_inner(part, line)?;
        let nums: Vec<&str> = pair.split(',').map(str::trim).collect();
        if nums.len() != 2 {
            return Err(ProblemError::Malformed {
                line,
                msg: format!("expected `[lo, hi]`, got `{part}`"),
            });
        }
        let lo: f64 = nums[0].parse().map_err(|_| ProblemError::Malformed {
            line,
            msg: format!("bad number `{}`", nums[0]),
        })?;
        let hi: f64 = nums[1].parse().map_err(|_| ProblemError::Malformed {
            line,
            msg: format!("bad number `{}`", nums[1]),
        })?;
        out.push((lo, hi));
    }
    if out.is_empty() {
        return Err(ProblemError::Malformed {
            line,
            msg: "empty list".to_string(),
        });
    }
    Ok(out)
}

fn bracket_inner<'a>(value: &'a str, line: usize) -> Result<&'a str, ProblemError> {
    let v = value.trim();
    if v.starts_with('[') && v.ends_with(']') {
        Ok(&v[1..v.len() - 1])
    } else {
        Err(ProblemError::Malformed {
            line,
            msg: format!("expected `[ ... ]`, got `{v}`"),
        })
    }
}

/// Split on commas that are outside quotes and brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut in_quote = false;
    let mut start = 0;
    for (i, b) in s.bytes().enumerate() {
        match b {
            b'"' => in_quote = !in_quote,
            b'[' if !in_quote => depth += 1,
            b']' if !in_quote => depth -= 1,
            b',' if !in_quote && depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

impl SafetyProblem {
    /// Evaluate the vector field into `out`.
    pub fn eval_field(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        for (o, e) in out.iter_mut().zip(&self.field) {
            *o = e.eval(x);
        }
    }

    pub fn field_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_field(x, &mut out);
        out
    }

    /// Verify that every domain-box face lies in the unsafe set, sampling
    /// `per_axis` points per face axis. Ensures trajectories cannot leave
    /// the box through a not-unsafe region.
    pub fn check_boundedness(&self, per_axis: usize) -> Result<(), ProblemError> {
        let n = self.dim;
        let per_axis = per_axis.max(2);
        for axis in 0..n {
            for (side, value) in [("lower", self.domain.lo[axis]), ("upper", self.domain.hi[axis])]
            {
                let mut sample = vec![0.0; n];
                sample[axis] = value;
                // Walk the (n-1)-dimensional lattice over the remaining axes.
                let others: Vec<usize> = (0..n).filter(|a| *a != axis).collect();
                let total: usize = per_axis.pow(others.len() as u32);
                for lattice in 0..total {
                    let mut rem = lattice;
                    for &o in &others {
                        let step = rem % per_axis;
                        rem /= per_axis;
                        let frac = step as f64 / (per_axis - 1) as f64;
                        sample[o] = self.domain.lo[o] + frac * self.domain.width(o);
                    }
                    if !self.unsafe_set.eval(&sample) {
                        return Err(ProblemError::UnboundedSafeRegion {
                            axis,
                            side,
                            point: sample,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}
