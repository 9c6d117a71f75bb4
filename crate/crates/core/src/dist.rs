//! Probability-simplex data type and the numeric primitives shared by the
//! rejection criteria, the sampler and the oracles.
//!
//! Probabilities are kept in linear space; backends convert from log space at
//! the boundary via [`TokenDistribution::from_logits`].

use serde::{Deserialize, Serialize};

/// Absolute tolerance on the simplex normalization check.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("distribution must have at least one entry")]
    Empty,
    #[error("negative mass {value} at token {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("entries sum to {sum}, expected 1 within {SIMPLEX_TOLERANCE}")]
    NotNormalized { sum: f64 },
    #[error("non-finite logit at index {index}")]
    NonFinite { index: usize },
    #[error("temperature must be a positive finite number, got {value}")]
    BadTemperature { value: f64 },
    #[error("vocab size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
}

/// A point on the probability simplex over a token vocabulary.
///
/// Construction validates non-negativity and normalization (within
/// [`SIMPLEX_TOLERANCE`]), then renormalizes exactly so downstream algebra
/// sees entries that sum to 1 at full float precision. Values are immutable
/// after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates `values` as a simplex point and renormalizes.
    pub fn new(values: Vec<f64>) -> Result<Self, DistError> {
        if values.is_empty() {
            return Err(DistError::Empty);
        }
        for (index, &value) in values.iter().enumerate() {
            // `!(x >= 0)` also catches NaN.
            if !(value >= 0.0) {
                return Err(DistError::NegativeMass { index, value });
            }
            if !value.is_finite() {
                return Err(DistError::NonFinite { index });
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DistError::NotNormalized { sum });
        }
        let probs = values.into_iter().map(|v| v / sum).collect();
        Ok(Self { probs })
    }

    /// Softmax of `logits / temperature`, computed stably (max subtracted).
    pub fn from_logits(logits: &LogitVector, temperature: f64) -> Result<Self, DistError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(DistError::BadTemperature { value: temperature });
        }
        let scaled: Vec<f64> = logits.logits().iter().map(|&l| l / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Self::new(probs)
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Inverse-CDF sample over the stored token order; consumes exactly one
    /// `f64` draw from `rng`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (token, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = token;
            }
            cumulative += p;
            if u < cumulative {
                return token;
            }
        }
        // Float round-off can leave the total a hair under u; fall back to the
        // last token that carries mass.
        last_positive
    }

    /// Returns `(argmax, max)`, ties broken to the smallest token index.
    pub fn max_prob(&self) -> (usize, f64) {
        let mut best = (0, self.probs[0]);
        for (token, &p) in self.probs.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (token, p);
            }
        }
        best
    }

    /// Total variation distance `0.5 * sum_v |a_v - b_v|`.
    pub fn total_variation(&self, other: &TokenDistribution) -> Result<f64, DistError> {
        if self.vocab_size() != other.vocab_size() {
            return Err(DistError::SizeMismatch {
                left: self.vocab_size(),
                right: other.vocab_size(),
            });
        }
        let sum: f64 = self
            .probs
            .iter()
            .zip(other.probs.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(0.5 * sum)
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = DistError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

/// Unnormalized log scores over a vocabulary. All entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        for (index, &l) in logits.iter().enumerate() {
            if !l.is_finite() {
                return Err(DistError::NonFinite { index });
            }
        }
        Ok(Self { logits })
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}
