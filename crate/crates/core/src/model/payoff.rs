//! Expression language for cylindrical payoffs over a time partition.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor ('*' factor)*
//! factor := atom ('^' INT)?
//! atom   := NUMBER | 'B(' TIME ')' | 'D(' INDEX ')' | 'abs(' expr ')'
//!         | 'min(' expr ',' expr ')' | 'max(' expr ',' expr ')'
//!         | 'clamp(' expr ',' NUMBER ',' NUMBER ')' | '(' expr ')' | '-' atom
//! ```
//!
//! `B(t)` is the path level at a partition point, `D(i)` the i-th increment
//! (1-based). Exponentiation and division by expressions are excluded so a
//! polynomial growth bound is decidable structurally; `clamp` yields bounded
//! payoffs. Clamp bounds additionally accept a leading minus sign.

use crate::error::{Error, Result};
use crate::model::TimePartition;

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Const(f64),
    /// Increment reference `D(i)`, 1-based.
    Increment(usize),
    /// Level reference `B(t_i)` resolved to the stage index `i`.
    Level(usize),
    Neg(Box<ExprNode>),
    Add(Box<ExprNode>, Box<ExprNode>),
    Mul(Box<ExprNode>, Box<ExprNode>),
    Pow(Box<ExprNode>, u32),
    Abs(Box<ExprNode>),
    Min(Box<ExprNode>, Box<ExprNode>),
    Max(Box<ExprNode>, Box<ExprNode>),
    Clamp(Box<ExprNode>, f64, f64),
}

/// A parsed payoff together with its partition and structural growth bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffExpr {
    root: ExprNode,
    partition: TimePartition,
    growth_degree: u32,
}

impl PayoffExpr {
    /// Parse `text` against `partition`, resolving every time reference.
    pub fn parse(text: &str, partition: &TimePartition) -> Result<Self> {
        let tokens = lex(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            partition,
        };
        let root = parser.expr()?;
        if parser.pos < parser.tokens.len() {
            let tok = &parser.tokens[parser.pos];
            return Err(Error::Syntax {
                position: tok.pos,
                message: format!("unexpected trailing input `{}`", tok.kind.describe()),
            });
        }
        Self::from_node(root, partition.clone())
    }

    /// Build from an already-constructed node, validating references.
    pub fn from_node(root: ExprNode, partition: TimePartition) -> Result<Self> {
        let root = normalize(root);
        validate(&root, partition.n_increments())?;
        let growth_degree = growth(&root);
        Ok(Self {
            root,
            partition,
            growth_degree,
        })
    }

    pub fn constant(c: f64, partition: TimePartition) -> Result<Self> {
        Self::from_node(ExprNode::Const(c), partition)
    }

    pub fn root(&self) -> &ExprNode {
        &self.root
    }

    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn n_increments(&self) -> usize {
        self.partition.n_increments()
    }

    /// Structural upper bound on polynomial growth.
    pub fn growth_degree(&self) -> u32 {
        self.growth_degree
    }

    /// Evaluate at one realization of the increments `(x_1, ..., x_n)`.
    pub fn eval(&self, increments: &[f64]) -> f64 {
        debug_assert_eq!(increments.len(), self.n_increments());
        eval_node(&self.root, increments)
    }

    /// Canonical text; parse(to_text()) reproduces the node tree exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        print_node(&self.root, self.partition.times(), &mut out);
        out
    }

    pub fn negated(&self) -> Self {
        Self {
            root: ExprNode::Neg(Box::new(self.root.clone())),
            partition: self.partition.clone(),
            growth_degree: self.growth_degree,
        }
    }

    pub fn abs(&self) -> Self {
        Self {
            root: ExprNode::Abs(Box::new(self.root.clone())),
            partition: self.partition.clone(),
            growth_degree: self.growth_degree,
        }
    }

    pub fn powi(&self, k: u32) -> Self {
        Self {
            root: ExprNode::Pow(Box::new(self.root.clone()), k),
            partition: self.partition.clone(),
            growth_degree: self.growth_degree * k,
        }
    }

    /// `self - other`; both payoffs must share the partition.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        if self.partition != other.partition {
            return Err(Error::InvalidInput(
                "payoff difference requires identical partitions".into(),
            ));
        }
        Self::from_node(
            ExprNode::Add(
                Box::new(self.root.clone()),
                Box::new(ExprNode::Neg(Box::new(other.root.clone()))),
            ),
            self.partition.clone(),
        )
    }

    /// Conservative interval bound on the payoff values over all inputs.
    pub fn value_bounds(&self) -> (f64, f64) {
        bounds(&self.root)
    }

    /// True when the payoff never references increments at or before stage `i`.
    pub fn depends_only_after_stage(&self, i: usize) -> bool {
        min_referenced_increment(&self.root).is_none_or(|lo| lo > i)
    }
}

fn normalize(node: ExprNode) -> ExprNode {
    use ExprNode::*;
    match node {
        Const(c) if c < 0.0 => Neg(Box::new(Const(-c))),
        Neg(x) => Neg(Box::new(normalize(*x))),
        Add(a, b) => Add(Box::new(normalize(*a)), Box::new(normalize(*b))),
        Mul(a, b) => Mul(Box::new(normalize(*a)), Box::new(normalize(*b))),
        Pow(a, k) => Pow(Box::new(normalize(*a)), k),
        Abs(a) => Abs(Box::new(normalize(*a))),
        Min(a, b) => Min(Box::new(normalize(*a)), Box::new(normalize(*b))),
        Max(a, b) => Max(Box::new(normalize(*a)), Box::new(normalize(*b))),
        other => other,
    }
}

fn validate(node: &ExprNode, n: usize) -> Result<()> {
    use ExprNode::*;
    match node {
        Const(c) => {
            if !c.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite constant {c}")));
            }
        }
        Increment(i) => {
            if *i == 0 || *i > n {
                return Err(Error::UnknownIncrement { index: *i, max: n });
            }
        }
        Level(i) => {
            if *i > n {
                return Err(Error::UnknownIncrement { index: *i, max: n });
            }
        }
        Neg(a) | Abs(a) => validate(a, n)?,
        Pow(a, _) => validate(a, n)?,
        Add(a, b) | Mul(a, b) | Min(a, b) | Max(a, b) => {
            validate(a, n)?;
            validate(b, n)?;
        }
        Clamp(a, lo, hi) => {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidInput(format!(
                    "clamp bounds must be finite with lo <= hi, got [{lo}, {hi}]"
                )));
            }
            validate(a, n)?;
        }
    }
    Ok(())
}

fn growth(node: &ExprNode) -> u32 {
    use ExprNode::*;
    match node {
        Const(_) => 0,
        Increment(_) | Level(_) => 1,
        Neg(a) | Abs(a) => growth(a),
        Add(a, b) | Min(a, b) | Max(a, b) => growth(a).max(growth(b)),
        Mul(a, b) => growth(a) + growth(b),
        Pow(a, k) => growth(a).saturating_mul(*k),
        Clamp(..) => 0,
    }
}

fn min_referenced_increment(node: &ExprNode) -> Option<usize> {
    use ExprNode::*;
    match node {
        Const(_) => None,
        Increment(i) => Some(*i),
        // B(t_i) depends on increments 1..=i; B(0) is the constant 0.
        Level(i) => (*i > 0).then_some(1),
        Neg(a) | Abs(a) | Pow(a, _) | Clamp(a, ..) => min_referenced_increment(a),
        Add(a, b) | Mul(a, b) | Min(a, b) | Max(a, b) => {
            match (min_referenced_increment(a), min_referenced_increment(b)) {
                (None, x) | (x, None) => x,
                (Some(x), Some(y)) => Some(x.min(y)),
            }
        }
    }
}

fn eval_node(node: &ExprNode, inc: &[f64]) -> f64 {
    use ExprNode::*;
    match node {
        Const(c) => *c,
        Increment(i) => inc[*i - 1],
        Level(i) => inc[..*i].iter().sum(),
        Neg(a) => -eval_node(a, inc),
        Add(a, b) => eval_node(a, inc) + eval_node(b, inc),
        Mul(a, b) => eval_node(a, inc) * eval_node(b, inc),
        Pow(a, k) => eval_node(a, inc).powi(*k as i32),
        Abs(a) => eval_node(a, inc).abs(),
        Min(a, b) => eval_node(a, inc).min(eval_node(b, inc)),
        Max(a, b) => eval_node(a, inc).max(eval_node(b, inc)),
        Clamp(a, lo, hi) => eval_node(a, inc).clamp(*lo, *hi),
    }
}

fn bounds(node: &ExprNode) -> (f64, f64) {
    use ExprNode::*;
    const INF: f64 = f64::INFINITY;
    match node {
        Const(c) => (*c, *c),
        Increment(_) | Level(_) => (-INF, INF),
        Neg(a) => {
            let (lo, hi) = bounds(a);
            (-hi, -lo)
        }
        Add(a, b) => {
            let (alo, ahi) = bounds(a);
            let (blo, bhi) = bounds(b);
            (alo + blo, ahi + bhi)
        }
        Mul(a, b) => {
            let (alo, ahi) = bounds(a);
            let (blo, bhi) = bounds(b);
            let mut lo = INF;
            let mut hi = -INF;
            for x in [alo, ahi] {
                for y in [blo, bhi] {
                    // 0 * inf is indeterminate in interval arithmetic; widen.
                    let p = x * y;
                    if p.is_nan() {
                        return (-INF, INF);
                    }
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
            }
            (lo, hi)
        }
        Pow(a, k) => {
            let (lo, hi) = bounds(a);
            if *k == 0 {
                return (1.0, 1.0);
            }
            if k % 2 == 1 {
                (lo.powi(*k as i32), hi.powi(*k as i32))
            } else {
                let plo = if lo <= 0.0 && hi >= 0.0 {
                    0.0
                } else {
                    lo.abs().min(hi.abs()).powi(*k as i32)
                };
                (plo, lo.abs().max(hi.abs()).powi(*k as i32))
            }
        }
        Abs(a) => {
            let (lo, hi) = bounds(a);
            if lo <= 0.0 && hi >= 0.0 {
                (0.0, lo.abs().max(hi.abs()))
            } else {
                (lo.abs().min(hi.abs()), lo.abs().max(hi.abs()))
            }
        }
        Min(a, b) => {
            let (alo, ahi) = bounds(a);
            let (blo, bhi) = bounds(b);
            (alo.min(blo), ahi.min(bhi))
        }
        Max(a, b) => {
            let (alo, ahi) = bounds(a);
            let (blo, bhi) = bounds(b);
            (alo.max(blo), ahi.max(bhi))
        }
        Clamp(_, lo, hi) => (*lo, *hi),
    }
}

fn print_node(node: &ExprNode, times: &[f64], out: &mut String) {
    use ExprNode::*;
    match node {
        Add(a, b) => {
            out.push('(');
            print_node(a, times, out);
            if let Neg(inner) = &**b {
                out.push_str(" - ");
                print_node(inner, times, out);
            } else {
                out.push_str(" + ");
                print_node(b, times, out);
            }
            out.push(')');
        }
        Mul(a, b) => {
            out.push('(');
            print_node(a, times, out);
            out.push_str(" * ");
            print_node(b, times, out);
            out.push(')');
        }
        Pow(a, k) => {
            print_atom(a, times, out);
            out.push('^');
            out.push_str(&k.to_string());
        }
        other => print_atom(other, times, out),
    }
}

// Printed form must parse back as a single atom.
fn print_atom(node: &ExprNode, times: &[f64], out: &mut String) {
    use ExprNode::*;
    match node {
        Const(c) => out.push_str(&format_number(*c)),
        Increment(i) => {
            out.push_str("D(");
            out.push_str(&i.to_string());
            out.push(')');
        }
        Level(i) => {
            out.push_str("B(");
            out.push_str(&format_number(times[*i]));
            out.push(')');
        }
        Neg(a) => {
            out.push('-');
            print_atom(a, times, out);
        }
        Abs(a) => {
            out.push_str("abs(");
            print_node(a, times, out);
            out.push(')');
        }
        Min(a, b) => {
            out.push_str("min(");
            print_node(a, times, out);
            out.push_str(", ");
            print_node(b, times, out);
            out.push(')');
        }
        Max(a, b) => {
            out.push_str("max(");
            print_node(a, times, out);
            out.push_str(", ");
            print_node(b, times, out);
            out.push(')');
        }
        Clamp(a, lo, hi) => {
            out.push_str("clamp(");
            print_node(a, times, out);
            out.push_str(", ");
            out.push_str(&format_number(*lo));
            out.push_str(", ");
            out.push_str(&format_number(*hi));
            out.push(')');
        }
        Add(..) | Mul(..) | Pow(..) => {
            // Parenthesized expression is itself an atom.
            match node {
                Pow(..) => {
                    out.push('(');
                    print_node(node, times, out);
                    out.push(')');
                }
                _ => print_node(node, times, out),
            }
        }
    }
}

fn format_number(x: f64) -> String {
    // Display for f64 is the shortest decimal that round-trips.
    format!("{x}")
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(x) => format!("{x}"),
            TokenKind::Ident(s) => s.clone(),
            TokenKind::Plus => "+".into(),
            TokenKind::Minus => "-".into(),
            TokenKind::Star => "*".into(),
            TokenKind::Caret => "^".into(),
            TokenKind::LParen => "(".into(),
            TokenKind::RParen => ")".into(),
            TokenKind::Comma => ",".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push(Token {
                    kind: TokenKind::Plus,
                    pos: i,
                });
                i += 1;
            }
            '-' => {
                tokens.push(Token {
                    kind: TokenKind::Minus,
                    pos: i,
                });
                i += 1;
            }
            '*' => {
                tokens.push(Token {
                    kind: TokenKind::Star,
                    pos: i,
                });
                i += 1;
            }
            '^' => {
                tokens.push(Token {
                    kind: TokenKind::Caret,
                    pos: i,
                });
                i += 1;
            }
            '(' => {
                tokens.push(Token {
                    kind: TokenKind::LParen,
                    pos: i,
                });
                i += 1;
            }
            ')' => {
                tokens.push(Token {
                    kind: TokenKind::RParen,
                    pos: i,
                });
                i += 1;
            }
            ',' => {
                tokens.push(Token {
                    kind: TokenKind::Comma,
                    pos: i,
                });
                i += 1;
            }
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(Error::Syntax {
                            position: i,
                            message: "expected digits after decimal point".into(),
                        });
                    }
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
                let lit = &text[start..i];
                let value: f64 = lit.parse().map_err(|_| Error::Syntax {
                    position: start,
                    message: format!("invalid number `{lit}`"),
                })?;
                tokens.push(Token {
                    kind: TokenKind::Number(value),
                    pos: start,
                });
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(text[start..i].to_string()),
                    pos: start,
                });
            }
            other => {
                return Err(Error::Syntax {
                    position: i,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    partition: &'a TimePartition,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map_or_else(|| self.tokens.last().map_or(0, |t| t.pos + 1), |t| t.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, kind: &TokenKind, what: &str) -> Result<()> {
        match self.bump() {
            Some(t) if t.kind == *kind => Ok(()),
            Some(t) => Err(Error::Syntax {
                position: t.pos,
                message: format!("expected {what}, found `{}`", t.kind.describe()),
            }),
            None => Err(Error::Syntax {
                position: self.here(),
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn expr(&mut self) -> Result<ExprNode> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(TokenKind::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprNode::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(TokenKind::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ExprNode::Add(Box::new(lhs), Box::new(ExprNode::Neg(Box::new(rhs))));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ExprNode> {
        let mut lhs = self.factor()?;
        while matches!(self.peek(), Some(TokenKind::Star)) {
            self.bump();
            let rhs = self.factor()?;
            lhs = ExprNode::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<ExprNode> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(TokenKind::Caret)) {
            self.bump();
            let k = self.integer("exponent")?;
            return Ok(ExprNode::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprNode> {
        let tok = self.bump().ok_or_else(|| Error::Syntax {
            position: self.here(),
            message: "expected expression, found end of input".into(),
        })?;
        match tok.kind {
            TokenKind::Number(x) => Ok(ExprNode::Const(x)),
            TokenKind::Minus => {
                let inner = self.atom()?;
                Ok(ExprNode::Neg(Box::new(inner)))
            }
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(&TokenKind::RParen, "`)`")?;
                Ok(inner)
            }
            TokenKind::Ident(name) => self.call(&name, tok.pos),
            other => Err(Error::Syntax {
                position: tok.pos,
                message: format!("expected expression, found `{}`", other.describe()),
            }),
        }
    }

    fn call(&mut self, name: &str, pos: usize) -> Result<ExprNode> {
        self.expect(&TokenKind::LParen, "`(`")?;
        let node = match name {
            "B" => {
                let t = self.number("time point")?;
                let idx = self
                    .partition
                    .index_of_time(t)
                    .ok_or(Error::UnknownTime(t))?;
                ExprNode::Level(idx)
            }
            "D" => {
                let i = self.integer("increment index")? as usize;
                if i == 0 || i > self.partition.n_increments() {
                    return Err(Error::UnknownIncrement {
                        index: i,
                        max: self.partition.n_increments(),
                    });
                }
                ExprNode::Increment(i)
            }
            "abs" => {
                let inner = self.expr()?;
                ExprNode::Abs(Box::new(inner))
            }
            "min" | "max" => {
                let a = self.expr()?;
                self.expect(&TokenKind::Comma, "`,`")?;
                let b = self.expr()?;
                if name == "min" {
                    ExprNode::Min(Box::new(a), Box::new(b))
                } else {
                    ExprNode::Max(Box::new(a), Box::new(b))
                }
            }
            "clamp" => {
                let a = self.expr()?;
                self.expect(&TokenKind::Comma, "`,`")?;
                let lo = self.signed_number("clamp lower bound")?;
                self.expect(&TokenKind::Comma, "`,`")?;
                let hi = self.signed_number("clamp upper bound")?;
                if lo > hi {
                    return Err(Error::Syntax {
                        position: pos,
                        message: format!("clamp bounds out of order: {lo} > {hi}"),
                    });
                }
                ExprNode::Clamp(Box::new(a), lo, hi)
            }
            other => {
                return Err(Error::Syntax {
                    position: pos,
                    message: format!("unknown function `{other}`"),
                })
            }
        };
        self.expect(&TokenKind::RParen, "`)`")?;
        Ok(node)
    }

    fn number(&mut self, what: &str) -> Result<f64> {
        match self.bump() {
            Some(Token {
                kind: TokenKind::Number(x),
                ..
            }) => Ok(x),
            Some(t) => Err(Error::Syntax {
                position: t.pos,
                message: format!("expected {what}, found `{}`", t.kind.describe()),
            }),
            None => Err(Error::Syntax {
                position: self.here(),
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn signed_number(&mut self, what: &str) -> Result<f64> {
        if matches!(self.peek(), Some(TokenKind::Minus)) {
            self.bump();
            return Ok(-self.number(what)?);
        }
        self.number(what)
    }

    fn integer(&mut self, what: &str) -> Result<u32> {
        let pos = self.here();
        let x = self.number(what)?;
        if x.fract() != 0.0 || x < 0.0 || x > u32::MAX as f64 {
            return Err(Error::Syntax {
                position: pos,
                message: format!("expected nonnegative integer {what}, got {x}"),
            });
        }
        Ok(x as u32)
    }
}
