//! Character n-gram language model with add-delta smoothing and recursive
//! backoff. Characters are the tokens; a desk-scale stand-in for real models.

use super::{BackendError, NextTokenSource, SourceCapabilities};
use crate::dist::LogitVector;
use std::collections::HashMap;

#[derive(Debug, Clone)]
struct ContextCounts {
    next: Vec<u64>,
    total: u64,
}

/// Add-delta-smoothed conditional character distributions. Contexts unseen at
/// order `n` back off to order `n - 1` counts, recursively down to the
/// unigram table.
#[derive(Debug, Clone)]
pub struct CharNgramLm {
    order: usize,
    delta: f64,
    alphabet: Vec<char>,
    char_ids: HashMap<char, usize>,
    /// `tables[m - 1]` maps contexts of length `m - 1` to counts.
    tables: Vec<HashMap<Vec<usize>, ContextCounts>>,
}

impl CharNgramLm {
    pub fn train(corpus: &str, order: usize, delta: f64) -> Result<Self, BackendError> {
        let mut alphabet: Vec<char> = corpus.chars().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let alphabet: String = alphabet.into_iter().collect();
        Self::train_with_alphabet(corpus, order, delta, &alphabet)
    }

    /// Trains with an explicit alphabet, so two models over different corpora
    /// can share one vocabulary.
    pub fn train_with_alphabet(
        corpus: &str,
        order: usize,
        delta: f64,
        alphabet: &str,
    ) -> Result<Self, BackendError> {
        if corpus.is_empty() {
            return Err(BackendError::EmptyCorpus);
        }
        if order == 0 {
            return Err(BackendError::BadParameter("order must be >= 1".into()));
        }
        if !(delta > 0.0) {
            return Err(BackendError::BadParameter("delta must be > 0".into()));
        }
        let alphabet: Vec<char> = alphabet.chars().collect();
        if alphabet.is_empty() {
            return Err(BackendError::BadParameter("alphabet is empty".into()));
        }
        let mut char_ids = HashMap::new();
        for (id, &c) in alphabet.iter().enumerate() {
            if char_ids.insert(c, id).is_some() {
                return Err(BackendError::BadParameter(format!(
                    "alphabet repeats {c:?}"
                )));
            }
        }
        let ids: Vec<usize> = corpus
            .chars()
            .map(|c| {
                char_ids.get(&c).copied().ok_or_else(|| {
                    BackendError::BadParameter(format!("corpus char {c:?} not in alphabet"))
                })
            })
            .collect::<Result<_, _>>()?;

        let vocab = alphabet.len();
        let mut tables: Vec<HashMap<Vec<usize>, ContextCounts>> = vec![HashMap::new(); order];
        for m in 1..=order {
            let table = &mut tables[m - 1];
            for i in (m - 1)..ids.len() {
                let context = ids[i + 1 - m..i].to_vec();
                let entry = table.entry(context).or_insert_with(|| ContextCounts {
                    next: vec![0; vocab],
                    total: 0,
                });
                entry.next[ids[i]] += 1;
                entry.total += 1;
            }
        }
        Ok(Self {
            order,
            delta,
            alphabet,
            char_ids,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Smoothed conditional distribution, in linear space.
    pub fn conditional(&self, context: &[usize]) -> Vec<f64> {
        let vocab = self.alphabet.len();
        let mut m = self.order.min(context.len() + 1);
        loop {
            let suffix = &context[context.len() - (m - 1)..];
            if let Some(counts) = self.tables[m - 1].get(suffix) {
                let denom = counts.total as f64 + self.delta * vocab as f64;
                return counts
                    .next
                    .iter()
                    .map(|&c| (c as f64 + self.delta) / denom)
                    .collect();
            }
            debug_assert!(m > 1, "unigram table always contains the empty context");
            m -= 1;
        }
    }
}

impl NextTokenSource for CharNgramLm {
    fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    fn capabilities(&self) -> SourceCapabilities {
        SourceCapabilities::full()
    }

    fn next_logits(&self, context: &[usize]) -> Result<LogitVector, BackendError> {
        let probs = self.conditional(context);
        Ok(LogitVector::new(probs.into_iter().map(f64::ln).collect())?)
    }

    fn token_text(&self, token: usize) -> Option<String> {
        self.alphabet.get(token).map(|c| c.to_string())
    }

    fn text_tokens(&self, text: &str) -> Option<Vec<usize>> {
        text.chars()
            .map(|c| self.char_ids.get(&c).copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::TokenDistribution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_dominate_small_delta() {
        // "ababab": after 'a', always 'b'.
        let lm = CharNgramLm::train("ababab", 2, 1e-9).unwrap();
        let a = lm.text_tokens("a").unwrap()[0];
        let b = lm.text_tokens("b").unwrap()[0];
        let probs = lm.conditional(&[a]);
        assert!((probs[b] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unigram_ignores_context() {
        let lm = CharNgramLm::train("aab", 1, 0.5).unwrap();
        let a = lm.text_tokens("a").unwrap()[0];
        let b = lm.text_tokens("b").unwrap()[0];
        assert_eq!(lm.conditional(&[]), lm.conditional(&[b, a, b]));
        let probs = lm.conditional(&[]);
        // (2 + 0.5) / (3 + 1), (1 + 0.5) / (3 + 1)
        assert!((probs[a] - 2.5 / 4.0).abs() < 1e-15);
        assert!((probs[b] - 1.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn unseen_context_backs_off_one_order() {
        let corpus = "abcabcabc";
        let m3 = CharNgramLm::train(corpus, 3, 0.3).unwrap();
        let m2 = CharNgramLm::train(corpus, 2, 0.3).unwrap();
        let ids = m3.text_tokens("cb").unwrap();
        // "cb" never occurs as a bigram context, so the trigram model answers
        // with its bigram table, which equals the standalone bigram model.
        assert_eq!(m3.conditional(&ids), m2.conditional(&ids[1..]));
    }

    #[test]
    fn rejects_bad_training_inputs() {
        assert!(matches!(
            CharNgramLm::train("", 2, 0.5),
            Err(BackendError::EmptyCorpus)
        ));
        assert!(CharNgramLm::train("ab", 0, 0.5).is_err());
        assert!(CharNgramLm::train("ab", 2, 0.0).is_err());
        assert!(CharNgramLm::train_with_alphabet("abx", 2, 0.5, "ab").is_err());
    }

    #[test]
    fn logits_always_form_a_distribution() {
        let lm = CharNgramLm::train("the quick brown fox jumps over the lazy dog", 3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.random_range(0..12);
            let context: Vec<usize> = (0..len)
                .map(|_| rng.random_range(0..lm.vocab_size()))
                .collect();
            let logits = lm.next_logits(&context).unwrap();
            TokenDistribution::from_logits(&logits, 0.7).unwrap();
        }
    }

    #[test]
    fn converges_to_a_stationary_source() {
        // Two-state Markov chain over {a, b}.
        let p_b_given_a = 0.8;
        let p_a_given_b = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = 'a';
        let mut corpus = String::with_capacity(100_000);
        for _ in 0..100_000 {
            corpus.push(state);
            let u: f64 = rng.random();
            state = match state {
                'a' if u < p_b_given_a => 'b',
                'a' => 'a',
                _ if u < p_a_given_b => 'a',
                _ => 'b',
            };
        }
        let lm = CharNgramLm::train(&corpus, 2, 0.5).unwrap();
        let a = lm.text_tokens("a").unwrap()[0];
        let b = lm.text_tokens("b").unwrap()[0];
        let after_a = lm.conditional(&[a]);
        let after_b = lm.conditional(&[b]);
        let tv_a = 0.5 * ((after_a[a] - 0.2).abs() + (after_a[b] - 0.8).abs());
        let tv_b = 0.5 * ((after_b[a] - 0.6).abs() + (after_b[b] - 0.4).abs());
        assert!(tv_a < 0.05, "tv after 'a' = {tv_a}");
        assert!(tv_b < 0.05, "tv after 'b' = {tv_b}");
    }
}
