//! Symbolic dimension expressions.
//!
//! The algebra is deliberately small: integer literals, named symbols, sums,
//! products and ceiling division. Textual form:
//!
//! ```text
//! expr    := product ('+' product)*
//! product := atom ('*' atom)*
//! atom    := integer | symbol | 'ceil' '(' expr ',' expr ')' | '(' expr ')'
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Symbol name to value map used when instantiating a template.
pub type Bindings = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymbolicDim {
    Lit(u64),
    Sym(String),
    Add(Vec<SymbolicDim>),
    Mul(Vec<SymbolicDim>),
    CeilDiv(Box<SymbolicDim>, Box<SymbolicDim>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("unbound symbol `{0}`")]
    Unbound(String),
    #[error("division by zero in `{0}`")]
    DivByZero(String),
    #[error("arithmetic overflow in `{0}`")]
    Overflow(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad shape expression `{input}` at column {column}: {message}")]
pub struct ExprParseError {
    pub input: String,
    pub column: usize,
    pub message: String,
}

impl SymbolicDim {
    pub fn lit(v: u64) -> Self {
        SymbolicDim::Lit(v)
    }

    pub fn sym(name: impl Into<String>) -> Self {
        SymbolicDim::Sym(name.into())
    }

    pub fn ceil_div(num: SymbolicDim, den: SymbolicDim) -> Self {
        SymbolicDim::CeilDiv(Box::new(num), Box::new(den))
    }

    pub fn eval(&self, bindings: &Bindings) -> Result<u64, ExprError> {
        let overflow = || ExprError::Overflow(self.to_string());
        match self {
            SymbolicDim::Lit(v) => Ok(*v),
            SymbolicDim::Sym(s) => bindings
                .get(s)
                .copied()
                .ok_or_else(|| ExprError::Unbound(s.clone())),
            SymbolicDim::Add(terms) => terms.iter().try_fold(0u64, |acc, t| {
                acc.checked_add(t.eval(bindings)?).ok_or_else(overflow)
            }),
            SymbolicDim::Mul(terms) => terms.iter().try_fold(1u64, |acc, t| {
                acc.checked_mul(t.eval(bindings)?).ok_or_else(overflow)
            }),
            SymbolicDim::CeilDiv(n, d) => {
                let n = n.eval(bindings)?;
                let d = d.eval(bindings)?;
                if d == 0 {
                    return Err(ExprError::DivByZero(self.to_string()));
                }
                Ok(n.div_ceil(d))
            }
        }
    }

    /// Every symbol referenced by the expression.
    pub fn symbols(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            SymbolicDim::Lit(_) => {}
            SymbolicDim::Sym(s) => {
                out.insert(s.as_str());
            }
            SymbolicDim::Add(ts) | SymbolicDim::Mul(ts) => {
                ts.iter().for_each(|t| t.collect_symbols(out));
            }
            SymbolicDim::CeilDiv(n, d) => {
                n.collect_symbols(out);
                d.collect_symbols(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            SymbolicDim::Add(_) => 0,
            SymbolicDim::Mul(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for SymbolicDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn join(f: &mut fmt::Formatter<'_>, ts: &[SymbolicDim], op: &str, prec: u8) -> fmt::Result {
            for (i, t) in ts.iter().enumerate() {
                if i > 0 {
                    f.write_str(op)?;
                }
                if t.precedence() <= prec && t.precedence() < 2 {
                    write!(f, "({t})")?;
                } else {
                    write!(f, "{t}")?;
                }
            }
            Ok(())
        }
        match self {
            SymbolicDim::Lit(v) => write!(f, "{v}"),
            SymbolicDim::Sym(s) => f.write_str(s),
            SymbolicDim::Add(ts) => join(f, ts, "+", 0),
            SymbolicDim::Mul(ts) => join(f, ts, "*", 1),
            SymbolicDim::CeilDiv(n, d) => write!(f, "ceil({n},{d})"),
        }
    }
}

impl From<u64> for SymbolicDim {
    fn from(v: u64) -> Self {
        SymbolicDim::Lit(v)
    }
}

impl From<&str> for SymbolicDim {
    /// Panics on malformed input; meant for literals in builder code.
    fn from(s: &str) -> Self {
        s.parse().unwrap_or_else(|e| panic!("{e}"))
    }
}

impl FromStr for SymbolicDim {
    type Err = ExprParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { src: s, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != s.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }
}

impl Serialize for SymbolicDim {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SymbolicDim {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(SymbolicDim::Lit(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ExprParseError {
        ExprParseError {
            input: self.src.to_string(),
            column: self.pos + 1,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<SymbolicDim, ExprParseError> {
        let mut terms = vec![self.product()?];
        while self.eat('+') {
            terms.push(self.product()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { SymbolicDim::Add(terms) })
    }

    fn product(&mut self) -> Result<SymbolicDim, ExprParseError> {
        let mut terms = vec![self.atom()?];
        while self.eat('*') {
            terms.push(self.atom()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { SymbolicDim::Mul(terms) })
    }

    fn atom(&mut self) -> Result<SymbolicDim, ExprParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_digit() => {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                self.src[start..self.pos]
                    .parse()
                    .map(SymbolicDim::Lit)
                    .map_err(|_| self.error("integer literal out of range"))
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
                    self.pos += 1;
                }
                let ident = &self.src[start..self.pos];
                if ident == "ceil" && self.eat('(') {
                    let n = self.expr()?;
                    self.expect(',')?;
                    let d = self.expr()?;
                    self.expect(')')?;
                    Ok(SymbolicDim::ceil_div(n, d))
                } else {
                    Ok(SymbolicDim::Sym(ident.to_string()))
                }
            }
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error("expected integer, symbol or `ceil(`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bind(pairs: &[(&str, u64)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_and_evaluates() {
        let e: SymbolicDim = "L*8 + 2".parse().unwrap();
        assert_eq!(e.eval(&bind(&[("L", 10)])).unwrap(), 82);
        let e: SymbolicDim = "ceil(M, K_logits) * V".parse().unwrap();
        assert_eq!(e.eval(&bind(&[("M", 10), ("K_logits", 4), ("V", 3)])).unwrap(), 9);
        let e: SymbolicDim = "2*(L+1)".parse().unwrap();
        assert_eq!(e.eval(&bind(&[("L", 3)])).unwrap(), 8);
    }

    #[test]
    fn errors() {
        assert!("L +".parse::<SymbolicDim>().is_err());
        assert!("ceil(L)".parse::<SymbolicDim>().is_err());
        assert!("L L".parse::<SymbolicDim>().is_err());
        let e: SymbolicDim = "ceil(L, K)".parse().unwrap();
        assert!(matches!(e.eval(&bind(&[("L", 3), ("K", 0)])), Err(ExprError::DivByZero(_))));
        assert!(matches!(e.eval(&bind(&[("L", 3)])), Err(ExprError::Unbound(s)) if s == "K"));
        let big: SymbolicDim = "18446744073709551615 * 2".parse().unwrap();
        assert!(matches!(big.eval(&Bindings::new()), Err(ExprError::Overflow(_))));
    }

    #[test]
    fn display_keeps_precedence() {
        let e: SymbolicDim = "(L+1)*ceil(M+2, K)".parse().unwrap();
        assert_eq!(e.to_string(), "(L+1)*ceil(M+2,K)");
        assert_eq!(e.to_string().parse::<SymbolicDim>().unwrap(), e);
    }

    fn arb_expr() -> impl Strategy<Value = SymbolicDim> {
        let leaf = prop_oneof![
            (0u64..50).prop_map(SymbolicDim::Lit),
            prop_oneof![Just("L"), Just("M"), Just("K")].prop_map(SymbolicDim::sym),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(SymbolicDim::Add),
                prop::collection::vec(inner.clone(), 2..4).prop_map(SymbolicDim::Mul),
                (inner.clone(), inner).prop_map(|(n, d)| SymbolicDim::ceil_div(n, d)),
            ]
        })
    }

    proptest! {
        #[test]
        fn text_round_trip_preserves_value(e in arb_expr(), l in 0u64..30, m in 0u64..30, k in 1u64..9) {
            let b = bind(&[("L", l), ("M", m), ("K", k)]);
            let back: SymbolicDim = e.to_string().parse().unwrap();
            prop_assert_eq!(back.eval(&b).ok(), e.eval(&b).ok());
        }

        #[test]
        fn ceil_div_brackets_quotient(n in 1u64..10_000, d in 1u64..500) {
            let e = SymbolicDim::ceil_div(SymbolicDim::Lit(n), SymbolicDim::Lit(d));
            let q = e.eval(&Bindings::new()).unwrap();
            prop_assert!(((q - 1) as f64) < n as f64 / d as f64);
            prop_assert!(n as f64 / d as f64 <= q as f64);
        }
    }
}
