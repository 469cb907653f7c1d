//! Arithmetic expressions for coefficients given in a config file.
//!
//! Grammar: `+ - * / ^`, parentheses, numeric literals, the constants `pi`
//! and `e`, the functions `tanh exp ln abs sqrt atan sin cos` (one argument)
//! and `min max` (two arguments), and whatever variables the caller allows.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("cannot parse `{source_text}` at column {column}: {message}")]
pub struct ParseError {
    pub source_text: String,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Tanh,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Atan,
    Sin,
    Cos,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "tanh" => Self::Tanh,
            "exp" => Self::Exp,
            "ln" => Self::Ln,
            "abs" => Self::Abs,
            "sqrt" => Self::Sqrt,
            "atan" => Self::Atan,
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "min" => Self::Min,
            "max" => Self::Max,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Self::Min | Self::Max => 2,
            _ => 1,
        }
    }

    fn apply(self, a: &[f64]) -> f64 {
        match self {
            Self::Tanh => a[0].tanh(),
            Self::Exp => a[0].exp(),
            Self::Ln => a[0].ln(),
            Self::Abs => a[0].abs(),
            Self::Sqrt => a[0].sqrt(),
            Self::Atan => a[0].atan(),
            Self::Sin => a[0].sin(),
            Self::Cos => a[0].cos(),
            Self::Min => a[0].min(a[1]),
            Self::Max => a[0].max(a[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(i) => vars[*i],
            Node::Neg(a) => -a.eval(vars),
            Node::Add(a, b) => a.eval(vars) + b.eval(vars),
            Node::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Node::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Node::Div(a, b) => a.eval(vars) / b.eval(vars),
            Node::Pow(a, b) => a.eval(vars).powf(b.eval(vars)),
            Node::Call(f, args) => {
                let mut vals = [0.0; 2];
                for (v, a) in vals.iter_mut().zip(args) {
                    *v = a.eval(vars);
                }
                f.apply(&vals)
            }
        }
    }

    fn mark_used(&self, used: &mut [bool]) {
        match self {
            Node::Num(_) => {}
            Node::Var(i) => used[*i] = true,
            Node::Neg(a) => a.mark_used(used),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.mark_used(used);
                b.mark_used(used);
            }
            Node::Call(_, args) => args.iter().for_each(|a| a.mark_used(used)),
        }
    }
}

/// A parsed expression over a fixed list of variable names.
#[derive(Clone)]
pub struct Expr {
    root: Arc<Node>,
    text: String,
    used: Vec<bool>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.text)
    }
}

impl Expr {
    /// Parses `text`; `vars[i]` names the `i`-th entry of the slice passed to
    /// [`Expr::eval`].
    pub fn parse(text: &str, vars: &[&str]) -> Result<Self, ParseError> {
        let mut p = Parser {
            text,
            chars: text.char_indices().collect(),
            pos: 0,
            vars,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.error("unexpected trailing input"));
        }
        let mut used = vec![false; vars.len()];
        root.mark_used(&mut used);
        Ok(Self {
            root: Arc::new(root),
            text: text.to_string(),
            used,
        })
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.root.eval(vars)
    }

    /// Whether variable `i` appears in the expression.
    pub fn uses(&self, i: usize) -> bool {
        self.used[i]
    }
}

struct Parser<'a> {
    text: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            source_text: self.text.to_string(),
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    // `-x^2` is `-(x^2)` and `2^-1` is allowed
    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.name(),
            Some(c) => Err(self.error(format!("unexpected `{c}`"))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn slice(&self, from: usize) -> &str {
        let start = self.chars[from].0;
        let end = self.chars.get(self.pos).map_or(self.text.len(), |&(i, _)| i);
        &self.text[start..end]
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
            self.pos += 1;
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some('+' | '-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // not an exponent, e.g. `2e` as in `2*e` written without `*`
                self.pos = save;
            }
        }
        let lit = self.slice(start).to_string();
        lit.parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error(format!("bad number `{lit}`"))
        })
    }

    fn name(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        let name = self.slice(start).to_string();
        if let Some(f) = Func::lookup(&name) {
            if !self.eat('(') {
                return Err(self.error(format!("`{name}` needs arguments")));
            }
            let mut args = vec![self.expr()?];
            while self.eat(',') {
                args.push(self.expr()?);
            }
            if !self.eat(')') {
                return Err(self.error("expected `)`"));
            }
            if args.len() != f.arity() {
                return Err(self.error(format!("`{name}` takes {} argument(s), got {}", f.arity(), args.len())));
            }
            return Ok(Node::Call(f, args));
        }
        if let Some(i) = self.vars.iter().position(|v| *v == name) {
            return Ok(Node::Var(i));
        }
        match name.as_str() {
            "pi" => Ok(Node::Num(std::f64::consts::PI)),
            "e" => Ok(Node::Num(std::f64::consts::E)),
            _ => {
                self.pos = start;
                Err(self.error(format!(
                    "unknown name `{name}` (variables here: {})",
                    self.vars.join(", ")
                )))
            }
        }
    }
}
