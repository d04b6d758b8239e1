//! Scalar expression DSL used for scene fields.
//!
//! Grammar (binding tightest last):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' factor)?          right-associative
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x1^2` is `-(x1^2)` and
//! `2^3^2` is `2^(3^2)`. Identifiers are coordinates `x1..xd`, fiber
//! components `v1..vn`, function names, or named parameters supplied at
//! compile time. Compiled programs are flat postfix instruction lists
//! evaluated on a caller-provided stack; arithmetic never traps, domain
//! errors surface as NaN in the result.

use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

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
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
            Func::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("byte {at}: unexpected character {ch:?}")]
    UnexpectedChar { at: usize, ch: char },
    #[error("byte {at}: expression nests more than {} levels deep", MAX_NESTING)]
    TooDeep { at: usize },
    #[error("byte {at}: malformed number literal")]
    BadNumber { at: usize },
    #[error("byte {at}: unknown function `{name}`")]
    UnknownFunction { at: usize, name: String },
    #[error("byte {at}: expected {expected}, found {found}")]
    Expected {
        at: usize,
        expected: &'static str,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
}

// ───────────────────────── lexer ─────────────────────────

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
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(x) => write!(f, "number `{x}`"),
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Plus => write!(f, "`+`"),
            Tok::Minus => write!(f, "`-`"),
            Tok::Star => write!(f, "`*`"),
            Tok::Slash => write!(f, "`/`"),
            Tok::Caret => write!(f, "`^`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' => {
                toks.push((i, Tok::Plus));
                i += 1;
            }
            b'-' => {
                toks.push((i, Tok::Minus));
                i += 1;
            }
            b'*' => {
                toks.push((i, Tok::Star));
                i += 1;
            }
            b'/' => {
                toks.push((i, Tok::Slash));
                i += 1;
            }
            b'^' => {
                toks.push((i, Tok::Caret));
                i += 1;
            }
            b'(' => {
                toks.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                toks.push((i, Tok::RParen));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // exponent part: e/E [+-] digits
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
                let val: f64 = text
                    .parse()
                    .map_err(|_| ParseError::BadNumber { at: start })?;
                // a literal that overflows f64 has no printable round trip
                if !val.is_finite() {
                    return Err(ParseError::BadNumber { at: start });
                }
                toks.push((start, Tok::Num(val)));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((start, Tok::Ident(src[start..i].to_string())));
            }
            _ => {
                let ch = src[i..].chars().next().unwrap();
                return Err(ParseError::UnexpectedChar { at: i, ch });
            }
        }
    }
    toks.push((src.len(), Tok::Eof));
    Ok(toks)
}

// ───────────────────────── parser ─────────────────────────

/// Hard cap on grammar recursion, and so on expression tree depth.
const MAX_NESTING: usize = 200;

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn at(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // every recursion cycle in the grammar passes through here, so one
    // counter bounds the whole parse (and with it the depth of the tree
    // later walks recurse over)
    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.depth >= MAX_NESTING {
            return Err(ParseError::TooDeep { at: self.at() });
        }
        self.depth += 1;
        let r = if matches!(self.peek(), Tok::Minus) {
            self.bump();
            self.factor().map(|e| Expr::Neg(Box::new(e)))
        } else {
            self.power()
        };
        self.depth -= 1;
        r
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Tok::Caret) {
            self.bump();
            // exponent at factor level: allows unary minus and chained `^`
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let at = self.at();
        match self.bump() {
            Tok::Num(x) => Ok(Expr::Num(x)),
            Tok::Ident(name) => {
                if matches!(self.peek(), Tok::LParen) {
                    let func = Func::from_name(&name)
                        .ok_or(ParseError::UnknownFunction { at, name })?;
                    self.bump();
                    let arg = self.expr()?;
                    self.close_paren()?;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Tok::LParen => {
                let inner = self.expr()?;
                self.close_paren()?;
                Ok(inner)
            }
            other => Err(ParseError::Expected {
                at,
                expected: "a number, identifier, or `(`",
                found: other.to_string(),
            }),
        }
    }

    fn close_paren(&mut self) -> Result<(), ParseError> {
        let at = self.at();
        match self.bump() {
            Tok::RParen => Ok(()),
            other => Err(ParseError::Expected {
                at,
                expected: "`)`",
                found: other.to_string(),
            }),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, depth: 0 };
    let e = p.expr()?;
    match p.peek() {
        Tok::Eof => Ok(e),
        other => Err(ParseError::Expected {
            at: p.at(),
            expected: "an operator or end of input",
            found: other.to_string(),
        }),
    }
}

// ───────────────────────── printer ─────────────────────────

// Precedence levels used by the printer; parse(print(e)) == e exactly.
const P_ADD: u8 = 1;
const P_MUL: u8 = 2;
const P_NEG: u8 = 3;
const P_POW: u8 = 4;
const P_ATOM: u8 = 5;

impl Expr {
    pub fn print(&self) -> String {
        let mut out = String::new();
        self.print_prec(P_ADD, &mut out);
        out
    }

    fn print_prec(&self, min: u8, out: &mut String) {
        let prec = match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => P_ATOM,
            Expr::Neg(_) => P_NEG,
            Expr::Bin(BinOp::Pow, ..) => P_POW,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => P_MUL,
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => P_ADD,
        };
        let paren = prec < min;
        if paren {
            out.push('(');
        }
        match self {
            Expr::Num(x) => out.push_str(&format!("{x}")),
            Expr::Var(name) => out.push_str(name),
            Expr::Neg(inner) => {
                out.push('-');
                inner.print_prec(P_NEG, out);
            }
            Expr::Call(func, arg) => {
                out.push_str(func.name());
                out.push('(');
                arg.print_prec(P_ADD, out);
                out.push(')');
            }
            Expr::Bin(op, l, r) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => ("+", P_ADD, P_MUL),
                    // right operand one level up keeps left association
                    BinOp::Sub => ("-", P_ADD, P_MUL),
                    BinOp::Mul => ("*", P_MUL, P_NEG),
                    BinOp::Div => ("/", P_MUL, P_NEG),
                    // base must be an atom, exponent may be a factor
                    BinOp::Pow => ("^", P_ATOM, P_NEG),
                };
                l.print_prec(lp, out);
                out.push_str(sym);
                r.print_prec(rp, out);
            }
        }
        if paren {
            out.push(')');
        }
    }
}

// ───────────────────────── compiler ─────────────────────────

/// Slot layout for expression variables: `x1..xd` then `v1..vn`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarLayout {
    names: Vec<String>,
}

impl VarLayout {
    pub fn base_fiber(d: usize, n: usize) -> VarLayout {
        let mut names = Vec::with_capacity(d + n);
        for i in 1..=d {
            names.push(format!("x{i}"));
        }
        for a in 1..=n {
            names.push(format!("v{a}"));
        }
        VarLayout { names }
    }

    pub fn slots(&self) -> usize {
        self.names.len()
    }

    fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Const(f64),
    Load(u16),
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Neg,
    Call(Func),
}

/// Compiled postfix program. Evaluation is allocation-free given a reused
/// stack and never traps; domain errors propagate as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    code: Vec<Instr>,
    slots: usize,
}

impl Expr {
    pub fn compile(&self, layout: &VarLayout, params: &Params) -> Result<Program, CompileError> {
        let mut code = Vec::new();
        self.emit(layout, params, &mut code)?;
        Ok(Program {
            code,
            slots: layout.slots(),
        })
    }

    fn emit(
        &self,
        layout: &VarLayout,
        params: &Params,
        code: &mut Vec<Instr>,
    ) -> Result<(), CompileError> {
        match self {
            Expr::Num(x) => code.push(Instr::Const(*x)),
            Expr::Var(name) => {
                if let Some(slot) = layout.slot_of(name) {
                    code.push(Instr::Load(slot as u16));
                } else if let Some(val) = params.get(name) {
                    code.push(Instr::Const(*val));
                } else {
                    return Err(CompileError::Unbound(name.clone()));
                }
            }
            Expr::Neg(inner) => {
                inner.emit(layout, params, code)?;
                code.push(Instr::Neg);
            }
            Expr::Call(func, arg) => {
                arg.emit(layout, params, code)?;
                code.push(Instr::Call(*func));
            }
            Expr::Bin(op, l, r) => {
                l.emit(layout, params, code)?;
                r.emit(layout, params, code)?;
                code.push(match op {
                    BinOp::Add => Instr::Add,
                    BinOp::Sub => Instr::Sub,
                    BinOp::Mul => Instr::Mul,
                    BinOp::Div => Instr::Div,
                    BinOp::Pow => Instr::Pow,
                });
            }
        }
        Ok(())
    }
}

impl Program {
    /// `slots` must hold the layout's variables in order (`x` then `v`).
    pub fn eval(&self, slots: &[f64], stack: &mut Vec<f64>) -> f64 {
        debug_assert!(slots.len() >= self.slots);
        stack.clear();
        for instr in &self.code {
            match instr {
                Instr::Const(x) => stack.push(*x),
                Instr::Load(slot) => stack.push(slots[*slot as usize]),
                Instr::Neg => {
                    let a = stack.last_mut().unwrap();
                    *a = -*a;
                }
                Instr::Call(func) => {
                    let a = stack.last_mut().unwrap();
                    *a = func.apply(*a);
                }
                _ => {
                    let b = stack.pop().unwrap();
                    let a = stack.last_mut().unwrap();
                    *a = match instr {
                        Instr::Add => *a + b,
                        Instr::Sub => *a - b,
                        Instr::Mul => *a * b,
                        Instr::Div => *a / b,
                        Instr::Pow => a.powf(b),
                        _ => unreachable!(),
                    };
                }
            }
        }
        stack.pop().unwrap()
    }
}

/// Parse and compile in one step against a `d`-coordinate, `n`-fiber layout.
pub fn compile_str(
    src: &str,
    layout: &VarLayout,
    params: &Params,
) -> Result<Program, crate::error::Error> {
    let expr = parse(src).map_err(|e| crate::error::Error::ExprParse {
        src: src.to_string(),
        err: e,
    })?;
    expr.compile(layout, params)
        .map_err(|e| crate::error::Error::ExprCompile {
            src: src.to_string(),
            err: e,
        })
}
