//! Rejection criteria, expressed uniformly as per-token rejection
//! probabilities.
//!
//! Four criteria are supported: nudging (distribution-level confidence
//! threshold), the dual KAD rule (token-level confidence threshold), the
//! conservative confidence bet (draft confidence vs. the proxy's best
//! confidence minus a margin), and implicit reward (the skewed mixture
//! `s_v = p_v q*_v / (q_v Z)` realized through an explicit rejection
//! distribution whenever a feasible mixing weight `alpha` exists).
//!
//! All three indicator rules use strict `<` comparisons; boundary equality
//! keeps the draft.

use crate::dist::TokenDistribution;
use serde::{Deserialize, Serialize};

/// Excursions beyond [0, 1] up to this magnitude are treated as float
/// round-off and clamped when building implicit-reward rejection
/// probabilities; anything larger is an infeasible `alpha`.
pub const MU_CLAMP_TOLERANCE: f64 = 1e-9;

/// Slack used for the division-free support check on tokens where the proxy
/// carries no mass.
const ZERO_SUPPORT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CriterionError {
    #[error("lambda must lie in [0, 1], got {value}")]
    BadLambda { value: f64 },
    #[error("vocab size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("q_{token} = 0 while p_{token} q*_{token} > 0; the implicit-reward ratio is undefined")]
    UnsupportedRatio { token: usize },
    #[error("implicit-reward normalizer Z is zero (p and q* have disjoint support)")]
    DegenerateZ,
    #[error("alpha {alpha} yields rejection probability {value} at token {token}, outside [0, 1]")]
    InfeasibleAlpha { alpha: f64, token: usize, value: f64 },
    #[error("no alpha in [0, 1] satisfies the enclosing condition (bounds [{lower}, {upper}])")]
    InfeasibleImplicitReward { lower: f64, upper: f64 },
    #[error("implicit reward requires the proxy's unaligned counterpart q")]
    ProxyBaseRequired,
    #[error(transparent)]
    Dist(#[from] crate::dist::DistError),
}

/// Per-token Bernoulli rejection parameters; every entry lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MuVector {
    mu: Vec<f64>,
}

impl MuVector {
    pub fn new(mu: Vec<f64>) -> Result<Self, CriterionError> {
        for (token, &value) in mu.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(CriterionError::InfeasibleAlpha {
                    alpha: f64::NAN,
                    token,
                    value,
                });
            }
        }
        Ok(Self { mu })
    }

    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            mu: vec![0.0; vocab_size],
        }
    }

    pub fn ones(vocab_size: usize) -> Self {
        Self {
            mu: vec![1.0; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.mu.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    pub fn value(&self, token: usize) -> f64 {
        self.mu[token]
    }
}

/// How to pick `alpha` inside a feasible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaChoice {
    /// Midpoint of the feasible interval; maximizes distance from the binding
    /// constraints, so float error never pushes the rejection probabilities
    /// outside [0, 1].
    Midpoint,
    Lower,
    Upper,
    Fixed(f64),
}

/// A rejection criterion configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "kebab-case")]
pub enum RejectionPolicy {
    /// Reject the whole distribution when `max_w p_w < lambda`.
    Nudging { lambda: f64 },
    /// Reject draft `v` when `p_v < lambda`.
    KadDual { lambda: f64 },
    /// Reject draft `v` when `p_v < max_w q*_w - lambda`.
    ConservativeBet { lambda: f64 },
    /// Realize the implicit-reward mixture through rejection.
    ImplicitReward { alpha_choice: AlphaChoice },
}

impl RejectionPolicy {
    /// Validates hyperparameter ranges (`lambda` and fixed `alpha` in [0, 1]).
    pub fn validate(&self) -> Result<(), CriterionError> {
        let lambda = match self {
            RejectionPolicy::Nudging { lambda }
            | RejectionPolicy::KadDual { lambda }
            | RejectionPolicy::ConservativeBet { lambda } => *lambda,
            RejectionPolicy::ImplicitReward { alpha_choice } => match alpha_choice {
                AlphaChoice::Fixed(alpha) => *alpha,
                _ => return Ok(()),
            },
        };
        check_lambda(lambda)
    }

    /// True when computing rejection probabilities needs the proxy
    /// distribution `q*` up front (as opposed to only on rejection).
    pub fn needs_proxy_distribution(&self) -> bool {
        matches!(
            self,
            RejectionPolicy::ConservativeBet { .. } | RejectionPolicy::ImplicitReward { .. }
        )
    }

    /// True when the criterion also needs the proxy's unaligned counterpart.
    pub fn needs_proxy_base(&self) -> bool {
        matches!(self, RejectionPolicy::ImplicitReward { .. })
    }
}

/// The feasible range for the implicit-reward mixing weight, or an
/// infeasibility marker. When infeasible, `lower`/`upper` keep the unclamped
/// bounds for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaInterval {
    pub lower: f64,
    pub upper: f64,
    pub feasible: bool,
}

impl AlphaInterval {
    pub fn select(&self, choice: AlphaChoice) -> f64 {
        match choice {
            AlphaChoice::Midpoint => 0.5 * (self.lower + self.upper),
            AlphaChoice::Lower => self.lower,
            AlphaChoice::Upper => self.upper,
            AlphaChoice::Fixed(alpha) => alpha,
        }
    }

    pub fn midpoint(&self) -> f64 {
        self.select(AlphaChoice::Midpoint)
    }
}

fn check_lambda(lambda: f64) -> Result<(), CriterionError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(CriterionError::BadLambda { value: lambda })
    }
}

fn check_sizes(a: &TokenDistribution, b: &TokenDistribution) -> Result<(), CriterionError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(CriterionError::SizeMismatch {
            left: a.vocab_size(),
            right: b.vocab_size(),
        });
    }
    Ok(())
}

/// Nudging: reject everything when the base distribution's confidence
/// `max_w p_w` falls below `lambda`. The decision is distribution-level, so
/// every entry of the result is the same indicator.
pub fn mu_nudging(p: &TokenDistribution, lambda: f64) -> Result<MuVector, CriterionError> {
    check_lambda(lambda)?;
    let (_, max) = p.max_prob();
    let mu = if max < lambda { 1.0 } else { 0.0 };
    Ok(MuVector {
        mu: vec![mu; p.vocab_size()],
    })
}

/// Dual KAD rule: reject draft `v` when the base model is not confident
/// enough in it, `p_v < lambda`.
pub fn mu_kad_dual(p: &TokenDistribution, lambda: f64) -> Result<MuVector, CriterionError> {
    check_lambda(lambda)?;
    let mu = p
        .probs()
        .iter()
        .map(|&pv| if pv < lambda { 1.0 } else { 0.0 })
        .collect();
    Ok(MuVector { mu })
}

/// Conservative confidence bet: reject draft `v` when its confidence loses to
/// the proxy's best possible confidence by more than the margin,
/// `p_v < max_w q*_w - lambda`.
pub fn mu_conservative_bet(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    lambda: f64,
) -> Result<MuVector, CriterionError> {
    check_sizes(p, q_star)?;
    check_lambda(lambda)?;
    let (_, q_star_max) = q_star.max_prob();
    let threshold = q_star_max - lambda;
    let mu = p
        .probs()
        .iter()
        .map(|&pv| if pv < threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(MuVector { mu })
}

/// The implicit-reward mixture `s_v = p_v q*_v / (q_v Z)` with
/// `Z = sum_w p_w q*_w / q_w`. Terms with `p_v q*_v = 0` contribute nothing
/// regardless of `q_v`; a zero `q_v` under positive `p_v q*_v` is an error
/// because the ratio is undefined and no smoothing rule is assumed.
pub fn implicit_reward_mixture(
    p: &TokenDistribution,
    q: &TokenDistribution,
    q_star: &TokenDistribution,
) -> Result<TokenDistribution, CriterionError> {
    check_sizes(p, q)?;
    check_sizes(p, q_star)?;
    let mut unnormalized = vec![0.0; p.vocab_size()];
    for token in 0..p.vocab_size() {
        let numerator = p.prob(token) * q_star.prob(token);
        if numerator == 0.0 {
            continue;
        }
        if q.prob(token) == 0.0 {
            return Err(CriterionError::UnsupportedRatio { token });
        }
        unnormalized[token] = numerator / q.prob(token);
    }
    let z: f64 = unnormalized.iter().sum();
    if z == 0.0 {
        return Err(CriterionError::DegenerateZ);
    }
    for value in &mut unnormalized {
        *value /= z;
    }
    Ok(TokenDistribution::new(unnormalized)?)
}

/// The admissible range for `alpha` under the enclosing condition
/// `q*_v alpha <= s_v <= p_v + q*_v alpha` for all `v`, intersected with
/// [0, 1].
///
/// Tokens with `q*_v = 0` impose the division-free requirement
/// `0 <= s_v <= p_v` and no bound on `alpha`; if that requirement fails, no
/// `alpha` can work at all.
pub fn alpha_interval(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    s: &TokenDistribution,
) -> Result<AlphaInterval, CriterionError> {
    check_sizes(p, q_star)?;
    check_sizes(p, s)?;
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    let mut zero_support_ok = true;
    for token in 0..p.vocab_size() {
        let (pv, qv, sv) = (p.prob(token), q_star.prob(token), s.prob(token));
        if qv == 0.0 {
            if sv > pv + ZERO_SUPPORT_SLACK {
                zero_support_ok = false;
            }
            continue;
        }
        lower = lower.max((sv - pv) / qv);
        upper = upper.min(sv / qv);
    }
    let clamped_lower = lower.max(0.0);
    let clamped_upper = upper.min(1.0);
    if zero_support_ok && clamped_lower <= clamped_upper {
        Ok(AlphaInterval {
            lower: clamped_lower,
            upper: clamped_upper,
            feasible: true,
        })
    } else {
        Ok(AlphaInterval {
            lower,
            upper,
            feasible: false,
        })
    }
}

/// The rejection distribution that realizes the mixture `s` at a feasible
/// `alpha`: `mu_v = (p_v + q*_v alpha - s_v) / p_v`.
///
/// Tokens with `p_v = 0` take `mu_v = 1`: the draft never lands there, so the
/// value is immaterial to the marginal, and 1 makes impossible drafts defer.
pub fn mu_implicit_reward(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    s: &TokenDistribution,
    alpha: f64,
) -> Result<MuVector, CriterionError> {
    check_sizes(p, q_star)?;
    check_sizes(p, s)?;
    let mut mu = Vec::with_capacity(p.vocab_size());
    for token in 0..p.vocab_size() {
        let pv = p.prob(token);
        if pv == 0.0 {
            mu.push(1.0);
            continue;
        }
        let raw = (pv + q_star.prob(token) * alpha - s.prob(token)) / pv;
        if !(-MU_CLAMP_TOLERANCE..=1.0 + MU_CLAMP_TOLERANCE).contains(&raw) {
            return Err(CriterionError::InfeasibleAlpha {
                alpha,
                token,
                value: raw,
            });
        }
        mu.push(raw.clamp(0.0, 1.0));
    }
    Ok(MuVector { mu })
}

/// Dispatches a policy to its rejection probabilities.
///
/// `q` (the proxy's unaligned counterpart) is only consulted for implicit
/// reward, where the mixture and a feasible `alpha` are derived first; an
/// empty interval surfaces as [`CriterionError::InfeasibleImplicitReward`]
/// and the caller decides the fallback.
pub fn policy_mu(
    policy: &RejectionPolicy,
    p: &TokenDistribution,
    q: Option<&TokenDistribution>,
    q_star: &TokenDistribution,
) -> Result<MuVector, CriterionError> {
    match policy {
        RejectionPolicy::Nudging { lambda } => mu_nudging(p, *lambda),
        RejectionPolicy::KadDual { lambda } => mu_kad_dual(p, *lambda),
        RejectionPolicy::ConservativeBet { lambda } => mu_conservative_bet(p, q_star, *lambda),
        RejectionPolicy::ImplicitReward { alpha_choice } => {
            let q = q.ok_or(CriterionError::ProxyBaseRequired)?;
            let s = implicit_reward_mixture(p, q, q_star)?;
            let interval = alpha_interval(p, q_star, &s)?;
            if !interval.feasible {
                return Err(CriterionError::InfeasibleImplicitReward {
                    lower: interval.lower,
                    upper: interval.upper,
                });
            }
            let alpha = interval.select(*alpha_choice);
            mu_implicit_reward(p, q_star, &s, alpha)
        }
    }
}
