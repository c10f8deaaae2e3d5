//! Temperature / nucleus sampling and the autoregressive completion loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Completion, FinishReason, GenerationParams, LanguageModel, ProviderError, TokenDistribution, TokenLogprob,
    TokenProb, MASS_EPSILON,
};

/// Smallest prefix length whose cumulative sum reaches `threshold`. When the
/// whole sequence falls short, its full length.
pub fn prefix_reaching(probs: impl IntoIterator<Item = f64>, threshold: f64) -> usize {
    let mut cumulative = 0.0;
    let mut n = 0;
    for p in probs {
        cumulative += p;
        n += 1;
        if cumulative + MASS_EPSILON >= threshold {
            return n;
        }
    }
    n
}

pub fn rng_for(seed: Option<u64>) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.unwrap_or_else(|| rand::rng().random()))
}

/// Draw one token. Tokens in `exclude` and zero-probability tokens are never
/// chosen. Temperature 0 picks the highest-ranked remaining token; otherwise
/// probabilities are tempered, restricted to the nucleus reaching `top_p`
/// and sampled.
pub fn sample_token<'d>(
    dist: &'d TokenDistribution,
    params: &GenerationParams,
    rng: &mut impl Rng,
    exclude: &[String],
) -> Option<&'d TokenProb> {
    let candidates: Vec<&TokenProb> =
        dist.entries().iter().filter(|e| e.prob > 0.0 && !exclude.contains(&e.token)).collect();
    if candidates.is_empty() {
        return None;
    }
    if params.temperature == 0.0 {
        return Some(candidates[0]);
    }
    let inv_t = 1.0 / params.temperature;
    let weights: Vec<f64> = candidates.iter().map(|e| e.prob.powf(inv_t)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Some(candidates[0]);
    }
    let nucleus = prefix_reaching(weights.iter().map(|w| w / total), params.top_p);
    let nucleus_mass: f64 = weights[..nucleus].iter().sum();
    let mut u = rng.random::<f64>() * nucleus_mass;
    for (entry, w) in candidates.iter().zip(&weights[..nucleus]) {
        if u < *w {
            return Some(entry);
        }
        u -= w;
    }
    Some(candidates[nucleus - 1])
}

/// Generate up to `max_tokens` tokens after `context`. The first appended
/// fragment is never one of `first_exclude`.
pub fn sample_segment<M: LanguageModel + ?Sized>(
    model: &M,
    context: &str,
    params: &GenerationParams,
    rng: &mut impl Rng,
    first_exclude: &[String],
    max_tokens: usize,
) -> Result<Completion, ProviderError> {
    let mut ctx = context.to_owned();
    let mut text = String::new();
    let mut tokens = Vec::new();
    let mut finish = FinishReason::Length;
    for step in 0..max_tokens {
        let dist = model.next_distribution(&ctx, usize::MAX)?;
        let exclude: Vec<String> = if step == 0 {
            dist.entries()
                .iter()
                .filter(|e| first_exclude.contains(&model.fragment(&ctx, &e.token)))
                .map(|e| e.token.clone())
                .collect()
        } else {
            Vec::new()
        };
        let Some(choice) = sample_token(&dist, params, rng, &exclude) else {
            finish = FinishReason::DeadEnd;
            break;
        };
        let fragment = model.fragment(&ctx, &choice.token);
        ctx.push_str(&fragment);
        text.push_str(&fragment);
        tokens.push(TokenLogprob::new(fragment, choice.prob.ln()));
        if let Some(cut) = find_stop(&text, &params.stop) {
            truncate_at(&mut text, &mut tokens, cut);
            finish = FinishReason::Stop;
            break;
        }
    }
    Ok(Completion { text, tokens, finish_reason: finish })
}

/// The default completion loop: sample, append, repeat.
pub fn complete_autoregressive<M: LanguageModel + ?Sized>(
    model: &M,
    context: &str,
    params: &GenerationParams,
) -> Result<Completion, ProviderError> {
    params.validate()?;
    let mut rng = rng_for(params.rng_seed);
    sample_segment(model, context, params, &mut rng, &[], params.max_tokens)
}

/// Byte offset of the earliest stop sequence in `text`.
pub fn find_stop(text: &str, stops: &[String]) -> Option<usize> {
    stops.iter().filter_map(|s| text.find(s.as_str())).min()
}

fn truncate_at(text: &mut String, tokens: &mut Vec<TokenLogprob>, cut: usize) {
    text.truncate(cut);
    let mut acc = 0;
    let mut keep = 0;
    for t in tokens.iter_mut() {
        if acc >= cut {
            break;
        }
        if acc + t.token.len() > cut {
            t.token.truncate(cut - acc);
        }
        acc += t.token.len();
        keep += 1;
    }
    tokens.truncate(keep);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::TableModel;

    #[test]
    fn prefix_reaching_thresholds() {
        let p = [0.5, 0.3, 0.2];
        assert_eq!(prefix_reaching(p, 0.5), 1);
        assert_eq!(prefix_reaching(p, 0.8), 2);
        assert_eq!(prefix_reaching(p, 0.9), 3);
        assert_eq!(prefix_reaching(p, 1.0), 3);
        assert_eq!(prefix_reaching([0.4], 0.9), 1);
        assert_eq!(prefix_reaching([], 0.9), 0);
    }

    #[test]
    fn nucleus_at_half_keeps_only_top() {
        // brute force: enumerate nucleus candidates by repeated sampling
        let m1 = TableModel::m1();
        let dist = m1.next_distribution("a", 10).unwrap();
        let params = GenerationParams { top_p: 0.5, ..Default::default() };
        let mut rng = rng_for(Some(7));
        let seen: std::collections::BTreeSet<_> =
            (0..500).map(|_| sample_token(&dist, &params, &mut rng, &[]).unwrap().token.clone()).collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec!["b".to_string()]);
    }

    #[test]
    fn exclusion_and_dead_ends() {
        let dist = TokenDistribution::new([("x", 0.7), ("y", 0.3)]).unwrap();
        let params = GenerationParams::greedy(1);
        let mut rng = rng_for(Some(1));
        assert_eq!(sample_token(&dist, &params, &mut rng, &["x".into()]).unwrap().token, "y");
        assert!(sample_token(&dist, &params, &mut rng, &["x".into(), "y".into()]).is_none());
    }

    #[test]
    fn stop_sequence_truncates_text_and_tokens() {
        let mut text = "abcdef".to_string();
        let mut tokens = vec![TokenLogprob::new("ab", 0.0), TokenLogprob::new("cd", 0.0), TokenLogprob::new("ef", 0.0)];
        truncate_at(&mut text, &mut tokens, 3);
        assert_eq!(text, "abc");
        assert_eq!(tokens.iter().map(|t| t.token.as_str()).collect::<String>(), "abc");
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m1 = TableModel::m1();
        let params = GenerationParams { rng_seed: Some(99), max_tokens: 30, ..Default::default() };
        let a = m1.complete("a", &params).unwrap();
        let b = m1.complete("a", &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.iter().map(|t| t.token.as_str()).collect::<String>(), a.text);
    }
}
