//! Table-driven provider: next-token distributions looked up by the longest
//! matching context suffix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ProviderError, TokenDistribution, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRule {
    pub suffix: String,
    pub next: BTreeMap<String, f64>,
}

/// Serializable description of a table model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    pub rules: Vec<TableRule>,
    /// Used when no rule suffix matches.
    pub fallback: BTreeMap<String, f64>,
}

impl TableSpec {
    /// The reference model used throughout the test suite:
    ///
    /// | context ends with | next tokens                |
    /// |-------------------|----------------------------|
    /// | `ab`              | c 0.995, d 0.005           |
    /// | `a`               | b 0.5, c 0.3, d 0.2        |
    /// | `b`               | a 0.6, c 0.4               |
    /// | anything else     | a 0.5, b 0.5               |
    pub fn m1() -> Self {
        let rule = |suffix: &str, next: &[(&str, f64)]| TableRule {
            suffix: suffix.into(),
            next: next.iter().map(|(t, p)| (t.to_string(), *p)).collect(),
        };
        TableSpec {
            name: "m1".into(),
            tokenizer: Tokenizer::Codepoint,
            rules: vec![
                rule("a", &[("b", 0.5), ("c", 0.3), ("d", 0.2)]),
                rule("ab", &[("c", 0.995), ("d", 0.005)]),
                rule("b", &[("a", 0.6), ("c", 0.4)]),
            ],
            fallback: [("a".to_string(), 0.5), ("b".to_string(), 0.5)].into(),
        }
    }

    pub fn build(&self) -> Result<TableModel, ProviderError> {
        let mut rules = Vec::with_capacity(self.rules.len());
        for r in &self.rules {
            if r.suffix.is_empty() {
                return Err(ProviderError::Config("table rule suffix must not be empty".into()));
            }
            if rules.iter().any(|(s, _): &(String, _)| *s == r.suffix) {
                return Err(ProviderError::Config(format!("duplicate table suffix {:?}", r.suffix)));
            }
            rules.push((r.suffix.clone(), TokenDistribution::new(r.next.clone())?));
        }
        // longest suffix first
        rules.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(TableModel {
            name: self.name.clone(),
            tokenizer: self.tokenizer,
            rules,
            fallback: TokenDistribution::new(self.fallback.clone())?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TableModel {
    name: String,
    tokenizer: Tokenizer,
    rules: Vec<(String, TokenDistribution)>,
    fallback: TokenDistribution,
}

impl TableModel {
    pub fn m1() -> Self {
        TableSpec::m1().build().expect("m1 is well formed")
    }

    fn lookup(&self, context: &str) -> &TokenDistribution {
        self.rules.iter().find(|(suffix, _)| context.ends_with(suffix.as_str())).map_or(&self.fallback, |(_, d)| d)
    }
}

impl LanguageModel for TableModel {
    fn name(&self) -> String {
        format!("table:{}", self.name)
    }

    fn next_distribution(&self, context: &str, top_k: usize) -> Result<TokenDistribution, ProviderError> {
        if top_k == 0 {
            return Err(ProviderError::InvalidParams("top_k must be >= 1".into()));
        }
        Ok(self.lookup(context).clone().truncated(top_k))
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.count(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::GenerationParams;

    fn pairs(d: &TokenDistribution) -> Vec<(String, f64)> {
        d.entries().iter().map(|e| (e.token.clone(), e.prob)).collect()
    }

    #[test]
    fn m1_lookups() {
        let m1 = TableModel::m1();
        let s = |v: &[(&str, f64)]| v.iter().map(|(t, p)| (t.to_string(), *p)).collect::<Vec<_>>();
        assert_eq!(pairs(&m1.next_distribution("xa", 5).unwrap()), s(&[("b", 0.5), ("c", 0.3), ("d", 0.2)]));
        assert_eq!(pairs(&m1.next_distribution("ab", 5).unwrap()), s(&[("c", 0.995), ("d", 0.005)]));
        assert_eq!(pairs(&m1.next_distribution("cb", 5).unwrap()), s(&[("a", 0.6), ("c", 0.4)]));
        assert_eq!(pairs(&m1.next_distribution("", 5).unwrap()), s(&[("a", 0.5), ("b", 0.5)]));
        assert_eq!(pairs(&m1.next_distribution("a", 1).unwrap()), s(&[("b", 0.5)]));
    }

    #[test]
    fn greedy_from_ab_starts_with_c() {
        let out = TableModel::m1().complete("ab", &GenerationParams::greedy(4)).unwrap();
        // ab -> c; abc -> fallback a (tie broken lexicographically); abca -> b; abcab -> c
        assert_eq!(out.text, "cabc");
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = TableSpec::m1();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<TableSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn rejects_bad_rules() {
        let mut spec = TableSpec::m1();
        spec.rules[0].next.insert("z".into(), 0.5);
        assert!(spec.build().is_err());
    }
}
