//! Deterministic table language model: explicit next-token distributions
//! keyed by context suffix, with a default for unmatched contexts. The exact
//! test fixture for the decode loop.

use super::{BackendError, NextTokenSource, SourceCapabilities};
use crate::dist::{LogitVector, TokenDistribution};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Zero-probability entries are floored to this before taking logs so logits
/// stay finite; the corresponding softmax mass is ~1e-300.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableFile {
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphabet: Option<String>,
    default: Vec<f64>,
    #[serde(default)]
    transitions: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionEntry {
    suffix: SuffixSpec,
    probs: Vec<f64>,
}

/// A context suffix, as text (requires an alphabet) or as raw token ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SuffixSpec {
    Text(String),
    Ids(Vec<usize>),
}

/// Table-driven next-token source. Lookup picks the longest stored suffix
/// matching the end of the context, falling back to the default distribution.
#[derive(Debug, Clone)]
pub struct TableLm {
    vocab_size: usize,
    alphabet: Option<Vec<char>>,
    char_ids: HashMap<char, usize>,
    default: TokenDistribution,
    transitions: HashMap<Vec<usize>, TokenDistribution>,
    max_suffix_len: usize,
}

impl TableLm {
    pub fn new(
        vocab_size: usize,
        alphabet: Option<&str>,
        default: TokenDistribution,
        transitions: Vec<(Vec<usize>, TokenDistribution)>,
    ) -> Result<Self, BackendError> {
        if vocab_size == 0 {
            return Err(BackendError::BadParameter("vocab_size must be >= 1".into()));
        }
        let alphabet: Option<Vec<char>> = alphabet.map(|a| a.chars().collect());
        if let Some(chars) = &alphabet {
            if chars.len() != vocab_size {
                return Err(BackendError::BadParameter(format!(
                    "alphabet has {} chars but vocab_size is {vocab_size}",
                    chars.len()
                )));
            }
        }
        let mut char_ids = HashMap::new();
        if let Some(chars) = &alphabet {
            for (id, &c) in chars.iter().enumerate() {
                if char_ids.insert(c, id).is_some() {
                    return Err(BackendError::BadParameter(format!(
                        "alphabet repeats {c:?}"
                    )));
                }
            }
        }
        if default.vocab_size() != vocab_size {
            return Err(BackendError::BadParameter(
                "default distribution size differs from vocab_size".into(),
            ));
        }
        let mut map = HashMap::new();
        let mut max_suffix_len = 0;
        for (suffix, dist) in transitions {
            if dist.vocab_size() != vocab_size {
                return Err(BackendError::BadParameter(format!(
                    "transition for suffix {suffix:?} has wrong size"
                )));
            }
            if suffix.iter().any(|&t| t >= vocab_size) {
                return Err(BackendError::BadParameter(format!(
                    "suffix {suffix:?} contains out-of-vocab token"
                )));
            }
            max_suffix_len = max_suffix_len.max(suffix.len());
            map.insert(suffix, dist);
        }
        Ok(Self {
            vocab_size,
            alphabet,
            char_ids,
            default,
            transitions: map,
            max_suffix_len,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let file: TableFile = serde_json::from_str(text)?;
        let default = TokenDistribution::new(file.default)?;
        let mut lm = Self::new(file.vocab_size, file.alphabet.as_deref(), default, vec![])?;
        let mut transitions = Vec::with_capacity(file.transitions.len());
        for entry in file.transitions {
            let suffix = match entry.suffix {
                SuffixSpec::Ids(ids) => ids,
                SuffixSpec::Text(text) => lm.text_tokens(&text).ok_or_else(|| {
                    BackendError::BadParameter(format!(
                        "suffix {text:?} uses chars outside the alphabet"
                    ))
                })?,
            };
            transitions.push((suffix, TokenDistribution::new(entry.probs)?));
        }
        lm = Self::new(
            lm.vocab_size,
            file.alphabet.as_deref(),
            lm.default.clone(),
            transitions,
        )?;
        Ok(lm)
    }

    pub fn to_json(&self) -> String {
        let mut transitions: Vec<TransitionEntry> = self
            .transitions
            .iter()
            .map(|(suffix, dist)| TransitionEntry {
                suffix: match &self.alphabet {
                    Some(chars) => {
                        SuffixSpec::Text(suffix.iter().map(|&t| chars[t]).collect())
                    }
                    None => SuffixSpec::Ids(suffix.clone()),
                },
                probs: dist.probs().to_vec(),
            })
            .collect();
        transitions.sort_by(|a, b| format!("{:?}", a.suffix).cmp(&format!("{:?}", b.suffix)));
        let file = TableFile {
            vocab_size: self.vocab_size,
            alphabet: self.alphabet.as_ref().map(|c| c.iter().collect()),
            default: self.default.probs().to_vec(),
            transitions,
        };
        serde_json::to_string_pretty(&file).expect("table serialization")
    }

    /// The stored distribution for the longest matching context suffix, or
    /// the default.
    pub fn distribution_for(&self, context: &[usize]) -> &TokenDistribution {
        let longest = self.max_suffix_len.min(context.len());
        for len in (1..=longest).rev() {
            if let Some(dist) = self.transitions.get(&context[context.len() - len..]) {
                return dist;
            }
        }
        if let Some(dist) = self.transitions.get(&[] as &[usize]) {
            return dist;
        }
        &self.default
    }
}

impl NextTokenSource for TableLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn capabilities(&self) -> SourceCapabilities {
        SourceCapabilities::full()
    }

    fn next_logits(&self, context: &[usize]) -> Result<LogitVector, BackendError> {
        let dist = self.distribution_for(context);
        let logits = dist.probs().iter().map(|&p| p.max(LOG_FLOOR).ln()).collect();
        Ok(LogitVector::new(logits)?)
    }

    fn token_text(&self, token: usize) -> Option<String> {
        self.alphabet
            .as_ref()
            .and_then(|chars| chars.get(token))
            .map(|c| c.to_string())
    }

    fn text_tokens(&self, text: &str) -> Option<Vec<usize>> {
        if self.alphabet.is_none() {
            return None;
        }
        text.chars()
            .map(|c| self.char_ids.get(&c).copied())
            .collect()
    }
}
