//! Affine expressions used by the model config, e.g. `q1 + pi/2`,
//! `l_3H - q3/2` or `l_3H0 - l_RCC`.
//!
//! Identifiers resolve to named lengths, `pi`, basis joints `q1..qn` or
//! motor coordinates `qm1..qmn`. Products of two non-constant factors are
//! rejected, so every expression is affine in the joint symbols.

use std::collections::BTreeMap;

/// A joint-space symbol; indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Symbol {
    Basis(usize),
    Motor(usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub terms: BTreeMap<Symbol, f64>,
}

impl AffineExpr {
    fn constant(c: f64) -> Self {
        AffineExpr {
            constant: c,
            terms: BTreeMap::new(),
        }
    }

    fn symbol(s: Symbol) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(s, 1.0);
        AffineExpr {
            constant: 0.0,
            terms,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.values().all(|c| *c == 0.0)
    }

    fn scale(mut self, k: f64) -> Self {
        self.constant *= k;
        for c in self.terms.values_mut() {
            *c *= k;
        }
        self
    }

    fn add(mut self, other: AffineExpr, sign: f64) -> Self {
        self.constant += sign * other.constant;
        for (s, c) in other.terms {
            *self.terms.entry(s).or_insert(0.0) += sign * c;
        }
        self.terms.retain(|_, c| *c != 0.0);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprError {
    Syntax(String),
    UnknownName(String),
    Nonlinear(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "+-*/()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || chars[i] == '.'
                    || chars[i] == 'e'
                    || chars[i] == 'E'
                    || ((chars[i] == '-' || chars[i] == '+')
                        && i > start
                        && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
            {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| ExprError::Syntax(format!("bad number `{s}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            return Err(ExprError::Syntax(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    lengths: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn expr(&mut self) -> Result<AffineExpr, ExprError> {
        let mut sign = 1.0;
        if let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            if *c == '-' {
                sign = -1.0;
            }
            self.pos += 1;
        }
        let mut acc = self.term()?.scale(sign);
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let s = if *c == '-' { -1.0 } else { 1.0 };
            self.pos += 1;
            let rhs = self.term()?;
            acc = acc.add(rhs, s);
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<AffineExpr, ExprError> {
        let mut acc = self.factor()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = *c;
            self.pos += 1;
            let rhs = self.factor()?;
            acc = match op {
                '*' if rhs.is_constant() => acc.scale(rhs.constant),
                '*' if acc.is_constant() => rhs.scale(acc.constant),
                '/' if rhs.is_constant() && rhs.constant != 0.0 => acc.scale(1.0 / rhs.constant),
                _ => {
                    return Err(ExprError::Nonlinear(
                        "product or quotient of joint-dependent terms".into(),
                    ))
                }
            };
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<AffineExpr, ExprError> {
        let tok = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| ExprError::Syntax("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(AffineExpr::constant(v)),
            Tok::Ident(name) => self.resolve(&name),
            Tok::Op('(') => {
                let inner = self.expr()?;
                match self.toks.get(self.pos) {
                    Some(Tok::Op(')')) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(ExprError::Syntax("missing `)`".into())),
                }
            }
            Tok::Op('-') => Ok(self.factor()?.scale(-1.0)),
            Tok::Op(c) => Err(ExprError::Syntax(format!("unexpected `{c}`"))),
        }
    }

    fn resolve(&self, name: &str) -> Result<AffineExpr, ExprError> {
        if name == "pi" {
            return Ok(AffineExpr::constant(std::f64::consts::PI));
        }
        if let Some(v) = self.lengths.get(name) {
            return Ok(AffineExpr::constant(*v));
        }
        if let Some(rest) = name.strip_prefix("qm") {
            if let Ok(j) = rest.parse::<usize>() {
                if j >= 1 {
                    return Ok(AffineExpr::symbol(Symbol::Motor(j - 1)));
                }
            }
        }
        if let Some(rest) = name.strip_prefix('q') {
            if let Ok(j) = rest.parse::<usize>() {
                if j >= 1 {
                    return Ok(AffineExpr::symbol(Symbol::Basis(j - 1)));
                }
            }
        }
        Err(ExprError::UnknownName(name.to_string()))
    }
}

/// Parses an affine expression, resolving length names against `lengths`.
pub fn parse(src: &str, lengths: &BTreeMap<String, f64>) -> Result<AffineExpr, ExprError> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return Err(ExprError::Syntax("empty expression".into()));
    }
    let mut p = Parser {
        toks,
        pos: 0,
        lengths,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(ExprError::Syntax(format!(
            "trailing input in `{src}`"
        )));
    }
    Ok(e)
}
