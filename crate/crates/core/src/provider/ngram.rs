//! Maximum-likelihood n-gram model with back-off to shorter contexts.
//!
//! `order` is the number of context tokens consulted. A context that never
//! occurred in the corpus backs off to its shorter suffixes, down to the
//! unigram distribution. A context that did occur but was never followed by
//! anything (it only appeared at the end of the corpus) is a dead end and
//! yields an empty distribution.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{LanguageModel, ProviderError, TokenDistribution, Tokenizer};

#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    tokenizer: Tokenizer,
    continuations: HashMap<Vec<String>, BTreeMap<String, u64>>,
    seen: HashSet<Vec<String>>,
}

impl NgramModel {
    pub fn train(corpus: &str, order: usize, tokenizer: Tokenizer) -> Result<Self, ProviderError> {
        if order == 0 {
            return Err(ProviderError::Config("ngram order must be >= 1".into()));
        }
        let tokens = tokenizer.tokenize(corpus);
        if tokens.is_empty() {
            return Err(ProviderError::EmptyCorpus);
        }
        let mut continuations: HashMap<Vec<String>, BTreeMap<String, u64>> = HashMap::new();
        let mut seen = HashSet::new();
        for end in 0..=tokens.len() {
            for len in 0..=order.min(end) {
                let ctx = tokens[end - len..end].to_vec();
                if let Some(next) = tokens.get(end) {
                    *continuations.entry(ctx.clone()).or_default().entry(next.clone()).or_insert(0) += 1;
                }
                seen.insert(ctx);
            }
        }
        Ok(Self { order, tokenizer, continuations, seen })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Every context (of any length up to the order) seen during training.
    pub fn contexts(&self) -> impl Iterator<Item = &[String]> {
        self.seen.iter().map(Vec::as_slice)
    }

    fn distribution_for(&self, tokens: &[String]) -> TokenDistribution {
        for len in (0..=self.order.min(tokens.len())).rev() {
            let suffix = &tokens[tokens.len() - len..];
            if !self.seen.contains(suffix) {
                continue;
            }
            let Some(counts) = self.continuations.get(suffix) else {
                return TokenDistribution::default();
            };
            let total: u64 = counts.values().sum();
            return TokenDistribution::new(counts.iter().map(|(t, c)| (t.clone(), *c as f64 / total as f64)))
                .expect("counts form a distribution");
        }
        unreachable!("the empty context is always seen")
    }

    /// Distribution after an already-tokenized context.
    pub fn distribution_after(&self, tokens: &[String]) -> TokenDistribution {
        self.distribution_for(tokens)
    }
}

impl LanguageModel for NgramModel {
    fn name(&self) -> String {
        format!("ngram:{}", self.order)
    }

    fn next_distribution(&self, context: &str, top_k: usize) -> Result<TokenDistribution, ProviderError> {
        if top_k == 0 {
            return Err(ProviderError::InvalidParams("top_k must be >= 1".into()));
        }
        Ok(self.distribution_for(&self.tokenizer.tokenize(context)).truncated(top_k))
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.count(text)
    }

    fn fragment(&self, context: &str, token: &str) -> String {
        self.tokenizer.join(context, token)
    }
}
