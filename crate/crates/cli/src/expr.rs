//! Coefficient expressions over `t, x, m1, s1, v0`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | var | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```

use std::fmt;

use serde::{Deserialize, Deserializer};

/// Values a coefficient may read.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub t: f64,
    pub x: f64,
    /// Survivor mean of `x`.
    pub m1: f64,
    /// Survival mass.
    pub s1: f64,
    /// The instance's test-function statistic.
    pub v0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    M1,
    S1,
    V0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Self::Exp | Self::Sqrt | Self::Abs => 1,
            Self::Min | Self::Max | Self::Pow => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Exp => "exp",
            Self::Sqrt => "sqrt",
            Self::Abs => "abs",
            Self::Min => "min",
            Self::Max => "max",
            Self::Pow => "pow",
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

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at byte {offset}: found {found}, expected one of {}", expected.join(", "))]
pub struct SyntaxError {
    pub offset: usize,
    pub found: String,
    pub expected: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("sqrt of negative value {0}")]
    SqrtNegative(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite result {0}")]
    NonFinite(f64),
}

/// A parsed coefficient together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Ident(usize, usize),
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

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Result<(usize, Tok), SyntaxError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((start, Tok::End));
        };
        let single = match c {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            return Ok((start, tok));
        }
        if c.is_ascii_digit() || c == b'.' {
            let mut end = start;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut k = end + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = &self.src[start..end];
            let v = text.parse::<f64>().map_err(|_| SyntaxError {
                offset: start,
                found: format!("'{text}'"),
                expected: vec!["number"],
            })?;
            self.pos = end;
            return Ok((start, Tok::Num(v)));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = start;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((start, Tok::Ident(start, end)));
        }
        let ch = self.src[start..].chars().next().unwrap_or('?');
        Err(SyntaxError {
            offset: start,
            found: format!("'{ch}'"),
            expected: vec!["number", "variable", "function", "'('"],
        })
    }
}

const OPERAND: [&str; 5] = ["number", "variable", "function", "'('", "'-'"];

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    at: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, SyntaxError> {
        let mut lex = Lexer { src, pos: 0 };
        let (at, tok) = lex.next()?;
        Ok(Self { lex, tok, at })
    }

    fn bump(&mut self) -> Result<(), SyntaxError> {
        let (at, tok) = self.lex.next()?;
        self.at = at;
        self.tok = tok;
        Ok(())
    }

    fn found(&self) -> String {
        match self.tok {
            Tok::End => "end of input".into(),
            Tok::Num(_) => "number".into(),
            Tok::Ident(a, b) => format!("'{}'", &self.lex.src[a..b]),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
        }
    }

    fn fail<T>(&self, expected: &[&'static str]) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            offset: self.at,
            found: self.found(),
            expected: expected.to_vec(),
        })
    }

    fn expr(&mut self) -> Result<Node, SyntaxError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Node, SyntaxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node, SyntaxError> {
        if self.tok == Tok::Minus {
            self.bump()?;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, SyntaxError> {
        let base = self.atom()?;
        if self.tok == Tok::Caret {
            self.bump()?;
            return Ok(Node::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(self.unary()?),
            ));
        }
        Ok(base)
    }

    fn expect(&mut self, tok: Tok, name: &'static str) -> Result<(), SyntaxError> {
        if self.tok != tok {
            return self.fail(&[name]);
        }
        self.bump()
    }

    fn atom(&mut self) -> Result<Node, SyntaxError> {
        match self.tok {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                if self.tok != Tok::RParen {
                    return self.fail(&["')'", "'+'", "'-'", "'*'", "'/'", "'^'"]);
                }
                self.bump()?;
                Ok(inner)
            }
            Tok::Ident(a, b) => {
                let name = &self.lex.src[a..b];
                let var = match name {
                    "t" => Some(Var::T),
                    "x" => Some(Var::X),
                    "m1" => Some(Var::M1),
                    "s1" => Some(Var::S1),
                    "v0" => Some(Var::V0),
                    _ => None,
                };
                if let Some(v) = var {
                    self.bump()?;
                    return Ok(Node::Var(v));
                }
                let func = match name {
                    "exp" => Func::Exp,
                    "sqrt" => Func::Sqrt,
                    "abs" => Func::Abs,
                    "min" => Func::Min,
                    "max" => Func::Max,
                    "pow" => Func::Pow,
                    _ => {
                        return self.fail(&[
                            "t", "x", "m1", "s1", "v0", "exp", "sqrt", "abs", "min", "max", "pow",
                        ])
                    }
                };
                self.bump()?;
                self.expect(Tok::LParen, "'('")?;
                let mut args = vec![self.expr()?];
                while args.len() < func.arity() {
                    if self.tok != Tok::Comma {
                        return self.fail(&["','"]);
                    }
                    self.bump()?;
                    args.push(self.expr()?);
                }
                if self.tok != Tok::RParen {
                    let expected: &[&str] = if func.arity() == 1 {
                        &["')'", "operator"]
                    } else {
                        &["')'"]
                    };
                    return self.fail(expected);
                }
                self.bump()?;
                Ok(Node::Call(func, args))
            }
            _ => self.fail(&OPERAND),
        }
    }
}

fn eval(node: &Node, v: &Vars) -> Result<f64, EvalError> {
    Ok(match node {
        Node::Num(c) => *c,
        Node::Var(var) => match var {
            Var::T => v.t,
            Var::X => v.x,
            Var::M1 => v.m1,
            Var::S1 => v.s1,
            Var::V0 => v.v0,
        },
        Node::Neg(a) => -eval(a, v)?,
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, v)?, eval(b, v)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    a / b
                }
                BinOp::Pow => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], v)?;
            match f {
                Func::Exp => a.exp(),
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(EvalError::SqrtNegative(a));
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
                Func::Min => a.min(eval(&args[1], v)?),
                Func::Max => a.max(eval(&args[1], v)?),
                Func::Pow => a.powf(eval(&args[1], v)?),
            }
        }
    })
}

fn uses(node: &Node, var: Var) -> bool {
    match node {
        Node::Num(_) => false,
        Node::Var(v) => *v == var,
        Node::Neg(a) => uses(a, var),
        Node::Bin(_, a, b) => uses(a, var) || uses(b, var),
        Node::Call(_, args) => args.iter().any(|a| uses(a, var)),
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, SyntaxError> {
        let mut p = Parser::new(text)?;
        if p.tok == Tok::End {
            return p.fail(&OPERAND);
        }
        let root = p.expr()?;
        if p.tok != Tok::End {
            return p.fail(&["end of input", "'+'", "'-'", "'*'", "'/'", "'^'"]);
        }
        Ok(Self {
            source: text.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn uses(&self, var: Var) -> bool {
        uses(&self.root, var)
    }

    /// Evaluates, rejecting non-finite results.
    pub fn eval(&self, vars: &Vars) -> Result<f64, EvalError> {
        let out = eval(&self.root, vars)?;
        if out.is_finite() {
            Ok(out)
        } else {
            Err(EvalError::NonFinite(out))
        }
    }

    /// Evaluation for hot loops: domain errors become NaN, which the
    /// simulator reports as divergence.
    pub fn eval_or_nan(&self, vars: &Vars) -> f64 {
        self.eval(vars).unwrap_or(f64::NAN)
    }

    pub fn at_x(&self, x: f64) -> Result<f64, EvalError> {
        self.eval(&Vars {
            x,
            ..Vars::default()
        })
    }
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expr::parse(&text).map_err(|e| serde::de::Error::custom(format!("'{text}': {e}")))
    }
}
