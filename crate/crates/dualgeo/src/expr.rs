//! Scalar field expressions on the dual total space: a prefix s-expression
//! grammar, a canonical printer, and jet evaluation.
//!
//! Grammar (ASCII):
//!
//! ```text
//! expr := number | atom | "(" op expr+ ")"
//! atom := "x"digit+ | "p"digit+
//! op   := "+" | "-" | "*" | "/" | "neg" | "sin" | "cos" | "exp" | "log" | "sqrt" | "pow"
//! ```
//!
//! `+` and `*` are n-ary (n >= 2), `-` and `/` binary, `pow` takes an
//! expression and a constant exponent. Atom indices are 1-based in the surface
//! syntax and checked against the declared dimensions.

use crate::jet::{Jet, JetError, Point, MAX_ORDER};
use std::fmt;
use thiserror::Error;

/// Coordinate dimensions an expression is checked against: `m` base
/// coordinates `x1..xm` and `r` fiber coordinates `p1..pr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub m: usize,
    pub r: usize,
}

impl Dims {
    pub fn new(m: usize, r: usize) -> Dims {
        Dims { m, r }
    }

    pub fn total(&self) -> usize {
        self.m + self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Base coordinate, 0-based.
    X(usize),
    /// Fiber coordinate (momentum), 0-based.
    P(usize),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sqrt(Box<Expr>),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("coordinate `{atom}` at byte {pos} out of range (max index {max})")]
    IndexOutOfRange { atom: String, pos: usize, max: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("domain error: {source} in `{subexpr}`")]
    Domain {
        #[source]
        source: JetError,
        subexpr: String,
    },
    #[error("jet order {requested} not supported (max {max})")]
    Order { requested: u8, max: u8 },
    #[error("point has {got} coordinates, expression expects {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("point has non-finite coordinates")]
    NonFinitePoint,
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn x(i: usize) -> Expr {
        Expr::X(i)
    }

    pub fn p(a: usize) -> Expr {
        Expr::P(a)
    }

    /// True if the expression references no fiber coordinate.
    pub fn is_base_only(&self) -> bool {
        match self {
            Expr::P(_) => false,
            Expr::Const(_) | Expr::X(_) => true,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) | Expr::Exp(e) | Expr::Log(e)
            | Expr::Sqrt(e) => e.is_base_only(),
            Expr::Add(v) | Expr::Mul(v) => v.iter().all(|e| e.is_base_only()),
            Expr::Sub(a, b) | Expr::Div(a, b) => a.is_base_only() && b.is_base_only(),
            Expr::Pow(e, _) => e.is_base_only(),
        }
    }

    /// Substitute each base coordinate `x_i` by `map[i]`, leaving momenta alone.
    pub fn subst_x(&self, map: &[Expr]) -> Expr {
        match self {
            Expr::Const(_) | Expr::P(_) => self.clone(),
            Expr::X(i) => map[*i].clone(),
            Expr::Neg(e) => Expr::Neg(Box::new(e.subst_x(map))),
            Expr::Sin(e) => Expr::Sin(Box::new(e.subst_x(map))),
            Expr::Cos(e) => Expr::Cos(Box::new(e.subst_x(map))),
            Expr::Exp(e) => Expr::Exp(Box::new(e.subst_x(map))),
            Expr::Log(e) => Expr::Log(Box::new(e.subst_x(map))),
            Expr::Sqrt(e) => Expr::Sqrt(Box::new(e.subst_x(map))),
            Expr::Add(v) => Expr::Add(v.iter().map(|e| e.subst_x(map)).collect()),
            Expr::Mul(v) => Expr::Mul(v.iter().map(|e| e.subst_x(map)).collect()),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.subst_x(map)), Box::new(b.subst_x(map))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.subst_x(map)), Box::new(b.subst_x(map))),
            Expr::Pow(e, c) => Expr::Pow(Box::new(e.subst_x(map)), *c),
        }
    }

    /// Canonical prefix print; `parse_expr` of the output reproduces the AST.
    pub fn print(&self) -> String {
        format!("{self}")
    }

    fn eval_inner(&self, pt: &Point, order: u8) -> Result<Jet, EvalError> {
        let n = pt.dim();
        let dom = |source: JetError| EvalError::Domain {
            source,
            subexpr: self.print(),
        };
        match self {
            Expr::Const(c) => Ok(Jet::constant(n, order, *c)),
            Expr::X(i) => Ok(Jet::coordinate(n, order, *i, pt.x[*i])),
            Expr::P(a) => Ok(Jet::coordinate(n, order, pt.x.len() + *a, pt.p[*a])),
            Expr::Neg(e) => Ok(e.eval_inner(pt, order)?.neg()),
            Expr::Sin(e) => Ok(e.eval_inner(pt, order)?.sin()),
            Expr::Cos(e) => Ok(e.eval_inner(pt, order)?.cos()),
            Expr::Exp(e) => Ok(e.eval_inner(pt, order)?.exp()),
            Expr::Log(e) => e.eval_inner(pt, order)?.log().map_err(dom),
            Expr::Sqrt(e) => e.eval_inner(pt, order)?.sqrt().map_err(dom),
            Expr::Add(v) => {
                let mut acc = v[0].eval_inner(pt, order)?;
                for e in &v[1..] {
                    acc = acc.add(&e.eval_inner(pt, order)?);
                }
                Ok(acc)
            }
            Expr::Mul(v) => {
                let mut acc = v[0].eval_inner(pt, order)?;
                for e in &v[1..] {
                    acc = acc.mul(&e.eval_inner(pt, order)?);
                }
                Ok(acc)
            }
            Expr::Sub(a, b) => Ok(a.eval_inner(pt, order)?.sub(&b.eval_inner(pt, order)?)),
            Expr::Div(a, b) => a
                .eval_inner(pt, order)?
                .div(&b.eval_inner(pt, order)?)
                .map_err(dom),
            Expr::Pow(e, c) => e.eval_inner(pt, order)?.pow(*c).map_err(dom),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::P(a) => write!(f, "p{}", a + 1),
            Expr::Neg(e) => write!(f, "(neg {e})"),
            Expr::Sin(e) => write!(f, "(sin {e})"),
            Expr::Cos(e) => write!(f, "(cos {e})"),
            Expr::Exp(e) => write!(f, "(exp {e})"),
            Expr::Log(e) => write!(f, "(log {e})"),
            Expr::Sqrt(e) => write!(f, "(sqrt {e})"),
            Expr::Add(v) => {
                write!(f, "(+")?;
                for e in v {
                    write!(f, " {e}")?;
                }
                write!(f, ")")
            }
            Expr::Mul(v) => {
                write!(f, "(*")?;
                for e in v {
                    write!(f, " {e}")?;
                }
                write!(f, ")")
            }
            Expr::Sub(a, b) => write!(f, "(- {a} {b})"),
            Expr::Div(a, b) => write!(f, "(/ {a} {b})"),
            Expr::Pow(e, c) => write!(f, "(pow {e} {c})"),
        }
    }
}

/// Evaluate the jet of an expression at a point, to the requested order (1..=3).
pub fn eval_jet(e: &Expr, pt: &Point, order: u8) -> Result<Jet, EvalError> {
    if order > MAX_ORDER {
        return Err(EvalError::Order {
            requested: order,
            max: MAX_ORDER,
        });
    }
    if !pt.is_finite() {
        return Err(EvalError::NonFinitePoint);
    }
    e.eval_inner(pt, order)
}

/// Evaluate the jet checking the point dimensions against `dims` first.
pub fn eval_jet_checked(e: &Expr, dims: Dims, pt: &Point, order: u8) -> Result<Jet, EvalError> {
    if pt.x.len() != dims.m || pt.p.len() != dims.r {
        return Err(EvalError::DimMismatch {
            got: pt.dim(),
            expected: dims.total(),
        });
    }
    eval_jet(e, pt, order)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    LParen,
    RParen,
    Sym(String),
}

fn lex(text: &str) -> Result<Vec<(Token, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push((Token::LParen, i));
            i += 1;
        } else if c == ')' {
            out.push((Token::RParen, i));
            i += 1;
        } else if c.is_ascii() {
            let start = i;
            while i < bytes.len() {
                let d = bytes[i] as char;
                if d.is_ascii_whitespace() || d == '(' || d == ')' {
                    break;
                }
                i += 1;
            }
            out.push((Token::Sym(text[start..i].to_string()), start));
        } else {
            return Err(ExprError::Syntax {
                pos: i,
                msg: "non-ASCII input".into(),
            });
        }
    }
    Ok(out)
}

/// Nesting bound for parsing and evaluation; inputs are untrusted.
const MAX_DEPTH: usize = 200;

struct Parser<'a> {
    tokens: &'a [(Token, usize)],
    pos: usize,
    dims: Dims,
    text_len: usize,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(Token, usize)> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&(Token, usize)> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, msg: impl Into<String>) -> ExprError {
        let pos = self
            .tokens
            .get(self.pos)
            .map(|(_, p)| *p)
            .unwrap_or(self.text_len);
        ExprError::Syntax {
            pos,
            msg: msg.into(),
        }
    }

    fn parse_number(sym: &str, pos: usize) -> Result<f64, ExprError> {
        let looks_numeric = sym
            .chars()
            .next()
            .map(|c| c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
            .unwrap_or(false);
        if !looks_numeric {
            return Err(ExprError::Syntax {
                pos,
                msg: format!("expected a number, found `{sym}`"),
            });
        }
        match sym.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(ExprError::Syntax {
                pos,
                msg: format!("non-finite literal `{sym}`"),
            }),
            Err(_) => Err(ExprError::Syntax {
                pos,
                msg: format!("invalid number `{sym}`"),
            }),
        }
    }

    fn atom_or_number(&self, sym: &str, pos: usize) -> Result<Expr, ExprError> {
        if let Some(rest) = sym.strip_prefix('x') {
            if rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty() {
                let idx: usize = rest.parse().map_err(|_| ExprError::Syntax {
                    pos,
                    msg: format!("bad coordinate index `{sym}`"),
                })?;
                if idx == 0 || idx > self.dims.m {
                    return Err(ExprError::IndexOutOfRange {
                        atom: sym.to_string(),
                        pos,
                        max: self.dims.m,
                    });
                }
                return Ok(Expr::X(idx - 1));
            }
        }
        if let Some(rest) = sym.strip_prefix('p') {
            if rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty() {
                let idx: usize = rest.parse().map_err(|_| ExprError::Syntax {
                    pos,
                    msg: format!("bad coordinate index `{sym}`"),
                })?;
                if idx == 0 || idx > self.dims.r {
                    return Err(ExprError::IndexOutOfRange {
                        atom: sym.to_string(),
                        pos,
                        max: self.dims.r,
                    });
                }
                return Ok(Expr::P(idx - 1));
            }
        }
        Self::parse_number(sym, pos).map(Expr::Const)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ExprError::Syntax {
                pos: self.tokens.get(self.pos).map(|(_, p)| *p).unwrap_or(0),
                msg: format!("expression nesting deeper than {MAX_DEPTH}"),
            });
        }
        let out = self.expr_inner();
        self.depth -= 1;
        out
    }

    fn expr_inner(&mut self) -> Result<Expr, ExprError> {
        match self.next() {
            None => Err(ExprError::Syntax {
                pos: self.text_len,
                msg: "unexpected end of input".into(),
            }),
            Some((Token::RParen, pos)) => Err(ExprError::Syntax {
                pos: *pos,
                msg: "unexpected `)`".into(),
            }),
            Some((Token::Sym(s), pos)) => {
                let (s, pos) = (s.clone(), *pos);
                self.atom_or_number(&s, pos)
            }
            Some((Token::LParen, pos)) => {
                let open = *pos;
                let (op, op_pos) = match self.next() {
                    Some((Token::Sym(s), p)) => (s.clone(), *p),
                    _ => {
                        return Err(ExprError::Syntax {
                            pos: open,
                            msg: "expected operator after `(`".into(),
                        })
                    }
                };
                let expr = self.form(&op, op_pos)?;
                match self.next() {
                    Some((Token::RParen, _)) => Ok(expr),
                    Some((_, p)) => Err(ExprError::Syntax {
                        pos: *p,
                        msg: "expected `)`".into(),
                    }),
                    None => Err(ExprError::Syntax {
                        pos: self.text_len,
                        msg: "missing `)`".into(),
                    }),
                }
            }
        }
    }

    fn args_until_rparen(&mut self) -> Result<Vec<Expr>, ExprError> {
        let mut v = Vec::new();
        while let Some((tok, _)) = self.peek() {
            if matches!(tok, Token::RParen) {
                break;
            }
            v.push(self.expr()?);
        }
        Ok(v)
    }

    fn form(&mut self, op: &str, op_pos: usize) -> Result<Expr, ExprError> {
        match op {
            "+" | "*" => {
                let args = self.args_until_rparen()?;
                if args.len() < 2 {
                    return Err(ExprError::Syntax {
                        pos: op_pos,
                        msg: format!("`{op}` takes at least two arguments"),
                    });
                }
                Ok(if op == "+" {
                    Expr::Add(args)
                } else {
                    Expr::Mul(args)
                })
            }
            "-" | "/" => {
                let a = self.expr()?;
                let b = self.expr()?;
                if !matches!(self.peek(), Some((Token::RParen, _))) {
                    return Err(self.err_here(format!("`{op}` takes exactly two arguments")));
                }
                Ok(if op == "-" {
                    Expr::Sub(Box::new(a), Box::new(b))
                } else {
                    Expr::Div(Box::new(a), Box::new(b))
                })
            }
            "neg" | "sin" | "cos" | "exp" | "log" | "sqrt" => {
                let a = self.expr()?;
                if !matches!(self.peek(), Some((Token::RParen, _))) {
                    return Err(self.err_here(format!("`{op}` takes exactly one argument")));
                }
                let b = Box::new(a);
                Ok(match op {
                    "neg" => Expr::Neg(b),
                    "sin" => Expr::Sin(b),
                    "cos" => Expr::Cos(b),
                    "exp" => Expr::Exp(b),
                    "log" => Expr::Log(b),
                    _ => Expr::Sqrt(b),
                })
            }
            "pow" => {
                let base = self.expr()?;
                let (sym, pos) = match self.next() {
                    Some((Token::Sym(s), p)) => (s.clone(), *p),
                    Some((_, p)) => {
                        return Err(ExprError::Syntax {
                            pos: *p,
                            msg: "`pow` exponent must be a number literal".into(),
                        })
                    }
                    None => {
                        return Err(ExprError::Syntax {
                            pos: self.text_len,
                            msg: "`pow` missing exponent".into(),
                        })
                    }
                };
                let c = Self::parse_number(&sym, pos)?;
                if !matches!(self.peek(), Some((Token::RParen, _))) {
                    return Err(self.err_here("`pow` takes exactly two arguments"));
                }
                Ok(Expr::Pow(Box::new(base), c))
            }
            _ => Err(ExprError::Syntax {
                pos: op_pos,
                msg: format!("unknown operator `{op}`"),
            }),
        }
    }
}

/// Parse a prefix s-expression against the declared dimensions.
pub fn parse_expr(text: &str, dims: Dims) -> Result<Expr, ExprError> {
    let tokens = lex(text)?;
    let mut p = Parser {
        tokens: &tokens,
        pos: 0,
        dims,
        text_len: text.len(),
        depth: 0,
    };
    let e = p.expr()?;
    if let Some((_, pos)) = p.peek() {
        return Err(ExprError::Syntax {
            pos: *pos,
            msg: "trailing input after expression".into(),
        });
    }
    Ok(e)
}
