// Copyright (c) The eov-ledger Contributors
// SPDX-License-Identifier: Apache-2.0

//! Endorsement policy expressions.
//!
//! Textual grammar (whitespace is insignificant):
//!
//! ```text
//! expr := id | and(expr, ...) | or(expr, ...) | outof(n, expr, ...)
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy parse error at byte {at}: {msg}")]
    Parse { at: usize, msg: String },
    #[error("outof threshold {n} must be between 1 and {children}")]
    BadThreshold { n: u32, children: usize },
    #[error("`{0}` requires at least one operand")]
    NoOperands(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EndorsementPolicy {
    Principal(String),
    And(Vec<EndorsementPolicy>),
    Or(Vec<EndorsementPolicy>),
    OutOf(u32, Vec<EndorsementPolicy>),
}

impl EndorsementPolicy {
    pub fn principal(id: impl Into<String>) -> Self {
        EndorsementPolicy::Principal(id.into())
    }

    /// `n` of the named endorsers.
    pub fn out_of(n: u32, ids: &[&str]) -> Self {
        EndorsementPolicy::OutOf(n, ids.iter().map(|id| Self::principal(*id)).collect())
    }

    pub fn evaluate(&self, signers: &BTreeSet<String>) -> bool {
        match self {
            EndorsementPolicy::Principal(id) => signers.contains(id),
            EndorsementPolicy::And(children) => children.iter().all(|c| c.evaluate(signers)),
            EndorsementPolicy::Or(children) => children.iter().any(|c| c.evaluate(signers)),
            EndorsementPolicy::OutOf(n, children) => {
                children.iter().filter(|c| c.evaluate(signers)).count() >= *n as usize
            }
        }
    }

    /// Every principal named anywhere in the expression, deduplicated.
    pub fn principals(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_principals(&mut out);
        out
    }

    fn collect_principals(&self, out: &mut BTreeSet<String>) {
        match self {
            EndorsementPolicy::Principal(id) => {
                out.insert(id.clone());
            }
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) | EndorsementPolicy::OutOf(_, c) => {
                for child in c {
                    child.collect_principals(out);
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            EndorsementPolicy::Principal(_) => 1,
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) | EndorsementPolicy::OutOf(_, c) => {
                1 + c.iter().map(Self::depth).max().unwrap_or(0)
            }
        }
    }

    /// Checks the structural invariants: thresholds within range and no
    /// empty operator.
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            EndorsementPolicy::Principal(_) => Ok(()),
            EndorsementPolicy::And(c) if c.is_empty() => Err(PolicyError::NoOperands("and")),
            EndorsementPolicy::Or(c) if c.is_empty() => Err(PolicyError::NoOperands("or")),
            EndorsementPolicy::OutOf(n, c) if *n == 0 || *n as usize > c.len() => {
                Err(PolicyError::BadThreshold { n: *n, children: c.len() })
            }
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) | EndorsementPolicy::OutOf(_, c) => {
                c.iter().try_for_each(Self::validate)
            }
        }
    }

    /// Picks a small signer set that satisfies the policy, preferring
    /// principals earlier in `preference`. Greedy add followed by pruning, so
    /// the result is minimal (no member can be dropped) though not always of
    /// minimum size. `None` if even all of `preference` is insufficient.
    pub fn minimal_signers(&self, preference: &[String]) -> Option<Vec<String>> {
        let mut chosen = BTreeSet::new();
        for id in preference {
            if self.evaluate(&chosen) {
                break;
            }
            chosen.insert(id.clone());
        }
        if !self.evaluate(&chosen) {
            return None;
        }
        for id in preference.iter().rev() {
            if chosen.remove(id) && !self.evaluate(&chosen) {
                chosen.insert(id.clone());
            }
        }
        Some(preference.iter().filter(|id| chosen.contains(*id)).cloned().collect())
    }
}

impl fmt::Display for EndorsementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list(f: &mut fmt::Formatter<'_>, children: &[EndorsementPolicy]) -> fmt::Result {
            for (i, c) in children.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{c}")?;
            }
            Ok(())
        }
        match self {
            EndorsementPolicy::Principal(id) => f.write_str(id),
            EndorsementPolicy::And(c) => {
                f.write_str("and(")?;
                list(f, c)?;
                f.write_str(")")
            }
            EndorsementPolicy::Or(c) => {
                f.write_str("or(")?;
                list(f, c)?;
                f.write_str(")")
            }
            EndorsementPolicy::OutOf(n, c) => {
                write!(f, "outof({n}, ")?;
                list(f, c)?;
                f.write_str(")")
            }
        }
    }
}

impl FromStr for EndorsementPolicy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parser = Parser { src: s.as_bytes(), pos: 0 };
        let policy = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.error("trailing input"));
        }
        policy.validate()?;
        Ok(policy)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> PolicyError {
        PolicyError::Parse {
            at: self.pos,
            msg: msg.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, byte: u8) -> Result<(), PolicyError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", byte as char)))
        }
    }

    fn ident(&mut self) -> Result<String, PolicyError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b':' | b'@') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(self.error("expected identifier"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn operands(&mut self) -> Result<Vec<EndorsementPolicy>, PolicyError> {
        let mut out = vec![self.expr()?];
        while self.peek() == Some(b',') {
            self.pos += 1;
            out.push(self.expr()?);
        }
        self.expect(b')')?;
        Ok(out)
    }

    fn expr(&mut self) -> Result<EndorsementPolicy, PolicyError> {
        let name = self.ident()?;
        if self.peek() != Some(b'(') {
            return Ok(EndorsementPolicy::Principal(name));
        }
        self.pos += 1;
        match name.to_ascii_lowercase().as_str() {
            "and" => Ok(EndorsementPolicy::And(self.operands()?)),
            "or" => Ok(EndorsementPolicy::Or(self.operands()?)),
            "outof" => {
                let at = self.pos;
                let n: u32 = self
                    .ident()?
                    .parse()
                    .map_err(|_| PolicyError::Parse { at, msg: "expected threshold".into() })?;
                self.expect(b',')?;
                Ok(EndorsementPolicy::OutOf(n, self.operands()?))
            }
            other => Err(self.error(&format!("unknown operator `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_of_three() {
        let p: EndorsementPolicy = "outof(2, e1, e2, e3)".parse().unwrap();
        assert!(p.evaluate(&set(&["e1", "e3"])));
        assert!(!p.evaluate(&set(&["e2"])));
    }

    #[test]
    fn and_requires_all() {
        let p: EndorsementPolicy = "and(e1, e2)".parse().unwrap();
        assert!(!p.evaluate(&set(&["e1"])));
        assert!(p.evaluate(&set(&["e1", "e2"])));
    }

    #[test]
    fn display_parses_back() {
        let text = "or(and(e1, e2), outof(2, e3, e4, or(e1, e4)))";
        let p: EndorsementPolicy = text.parse().unwrap();
        assert_eq!(p.to_string(), text);
        assert_eq!(p.depth(), 4);
    }

    #[test]
    fn bad_thresholds_rejected() {
        assert_eq!(
            "outof(4, e1, e2, e3)".parse::<EndorsementPolicy>().unwrap_err(),
            PolicyError::BadThreshold { n: 4, children: 3 }
        );
        assert!("outof(0, e1)".parse::<EndorsementPolicy>().is_err());
        assert!("and()".parse::<EndorsementPolicy>().is_err());
        assert!("xor(e1, e2)".parse::<EndorsementPolicy>().is_err());
        assert!("e1 e2".parse::<EndorsementPolicy>().is_err());
    }

    #[test]
    fn minimal_signers_prefers_order() {
        let p = EndorsementPolicy::out_of(2, &["e1", "e2", "e3"]);
        let pref: Vec<String> = ["e2", "e3", "e1"].iter().map(|s| s.to_string()).collect();
        assert_eq!(p.minimal_signers(&pref).unwrap(), ["e2", "e3"]);
        let q: EndorsementPolicy = "or(and(e1, e2), e3)".parse().unwrap();
        assert_eq!(q.minimal_signers(&pref).unwrap(), ["e3"]);
        assert!(q.minimal_signers(&["e1".to_string()]).is_none());
    }

    fn arb_policy() -> impl Strategy<Value = EndorsementPolicy> {
        let leaf = prop::sample::select(vec!["e1", "e2", "e3", "e4"])
            .prop_map(EndorsementPolicy::principal);
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 1..4).prop_map(EndorsementPolicy::And),
                prop::collection::vec(inner.clone(), 1..4).prop_map(EndorsementPolicy::Or),
                prop::collection::vec(inner, 1..4).prop_flat_map(|c| {
                    let len = c.len() as u32;
                    (1..=len).prop_map(move |n| EndorsementPolicy::OutOf(n, c.clone()))
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn evaluation_is_monotone(p in arb_policy(), base in 0u8..16, extra in 0u8..4) {
            let ids = ["e1", "e2", "e3", "e4"];
            let signers: BTreeSet<String> =
                (0..4).filter(|i| base & (1 << i) != 0).map(|i| ids[i].to_string()).collect();
            let mut more = signers.clone();
            more.insert(ids[extra as usize].to_string());
            prop_assert!(!p.evaluate(&signers) || p.evaluate(&more));
        }

        #[test]
        fn text_form_roundtrips(p in arb_policy()) {
            prop_assert_eq!(p.to_string().parse::<EndorsementPolicy>().unwrap(), p);
        }

        #[test]
        fn minimal_signers_satisfy_and_are_minimal(p in arb_policy()) {
            let pref: Vec<String> = ["e3", "e1", "e4", "e2"].iter().map(|s| s.to_string()).collect();
            if let Some(chosen) = p.minimal_signers(&pref) {
                let set: BTreeSet<String> = chosen.iter().cloned().collect();
                prop_assert!(p.evaluate(&set));
                for drop in &chosen {
                    let mut smaller = set.clone();
                    smaller.remove(drop);
                    prop_assert!(!p.evaluate(&smaller));
                }
            } else {
                prop_assert!(!p.evaluate(&pref.iter().cloned().collect()));
            }
        }
    }
}
