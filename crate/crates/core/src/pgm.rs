//! The draft/reject/fallback generative story, as a single-step sampler, an
//! exact marginal evaluator, and a full autoregressive decode loop over two
//! model backends.
//!
//! One step: sample a draft token from the base distribution `p`, flip a
//! Bernoulli coin with the draft's rejection probability, and on rejection
//! replace the draft with a sample from the aligned proxy `q*`. The random
//! draw order is fixed (draft, rejection, fallback) and deterministic
//! rejection outcomes consume no randomness, so a policy that never rejects
//! consumes exactly the draws of base-only sampling.

use crate::backends::{BackendError, NextTokenSource};
use crate::criteria::{
    mu_conservative_bet, mu_kad_dual, mu_nudging, policy_mu, CriterionError, MuVector,
    RejectionPolicy,
};
use crate::dist::{DistError, TokenDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("bad decode parameters: {0}")]
    BadParams(String),
    #[error("vocab mismatch: {0}")]
    VocabMismatch(String),
    #[error("{policy} requires full-vocabulary sources, but {role} reports top-k only")]
    FullVocabRequired { policy: String, role: String },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("criterion: {0}")]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// One realized (draft, rejection, final) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct PgmStep {
    /// Draft token sampled from the base distribution.
    pub draft: usize,
    /// Whether the draft was rejected in favor of a proxy sample.
    pub rejected: bool,
    /// The emitted token; equals `draft` unless `rejected`.
    pub token: usize,
    /// Rejection probability consulted for the draft.
    pub mu_draft: f64,
    /// Set when the implicit-reward interval was empty at this step and the
    /// policy fell back to keeping the draft.
    pub infeasible_fallback: bool,
}

/// Decode-loop parameters. The temperature applies to every distribution in
/// the pipeline, both for sampling and for the rejection criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token_ids: BTreeSet<usize>,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_new_tokens: 128,
            stop_token_ids: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl DecodeParams {
    fn validate(&self) -> Result<(), DecodeError> {
        if self.max_new_tokens == 0 {
            return Err(DecodeError::BadParams("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(DecodeError::BadParams(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-generation log of deferral decisions.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub steps: Vec<PgmStep>,
    pub wall_time: Duration,
    /// Number of `next_logits` calls issued; proxy queries are lazy for
    /// criteria that do not need the proxy distribution up front.
    pub backend_calls: usize,
}

impl DecodeTrace {
    pub fn tokens_generated(&self) -> usize {
        self.steps.len()
    }

    pub fn deferrals(&self) -> usize {
        self.steps.iter().filter(|s| s.rejected).count()
    }

    pub fn deferral_rate(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.deferrals() as f64 / self.steps.len() as f64
        }
    }

    pub fn infeasible_fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.infeasible_fallback).count()
    }
}

/// The model ensemble for one decode: base `p`, aligned proxy `q*`, and for
/// implicit reward the proxy's unaligned counterpart `q`.
pub struct DecodeModels<'a> {
    pub base: &'a dyn NextTokenSource,
    pub proxy: &'a dyn NextTokenSource,
    pub proxy_base: Option<&'a dyn NextTokenSource>,
}

impl<'a> DecodeModels<'a> {
    pub fn pair(base: &'a dyn NextTokenSource, proxy: &'a dyn NextTokenSource) -> Self {
        Self {
            base,
            proxy,
            proxy_base: None,
        }
    }
}

/// Result of a decode; `error` is set when generation aborted early, with the
/// partial tokens and trace preserved.
#[derive(Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace,
    pub error: Option<DecodeError>,
}

/// Samples one step of the generative story. Consumes rng draws in the fixed
/// order draft / rejection / fallback.
pub fn step_sample<R: Rng + ?Sized>(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    mu: &MuVector,
    rng: &mut R,
) -> Result<PgmStep, DecodeError> {
    if p.vocab_size() != q_star.vocab_size() || p.vocab_size() != mu.vocab_size() {
        return Err(DecodeError::VocabMismatch(format!(
            "p: {}, q*: {}, mu: {}",
            p.vocab_size(),
            q_star.vocab_size(),
            mu.vocab_size()
        )));
    }
    let draft = p.sample(rng);
    let mu_draft = mu.value(draft);
    let rejected = bernoulli(mu_draft, rng);
    let token = if rejected { q_star.sample(rng) } else { draft };
    Ok(PgmStep {
        draft,
        rejected,
        token,
        mu_draft,
        infeasible_fallback: false,
    })
}

fn bernoulli<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> bool {
    if mu <= 0.0 {
        false
    } else if mu >= 1.0 {
        true
    } else {
        rng.random::<f64>() < mu
    }
}

/// Closed-form marginal of the generative story:
/// `pi_v = p_v (1 - mu_v) + q*_v sum_w p_w mu_w`.
pub fn exact_marginal(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    mu: &MuVector,
) -> Result<TokenDistribution, DecodeError> {
    if p.vocab_size() != q_star.vocab_size() || p.vocab_size() != mu.vocab_size() {
        return Err(DecodeError::VocabMismatch(format!(
            "p: {}, q*: {}, mu: {}",
            p.vocab_size(),
            q_star.vocab_size(),
            mu.vocab_size()
        )));
    }
    let rejected_mass: f64 = p
        .probs()
        .iter()
        .zip(mu.values())
        .map(|(&pw, &mw)| pw * mw)
        .sum();
    let probs = (0..p.vocab_size())
        .map(|v| p.prob(v) * (1.0 - mu.value(v)) + q_star.prob(v) * rejected_mass)
        .collect();
    Ok(TokenDistribution::new(probs)?)
}

fn fetch(
    source: &dyn NextTokenSource,
    context: &[usize],
    temperature: f64,
    expected_vocab: usize,
    calls: &mut usize,
) -> Result<TokenDistribution, DecodeError> {
    *calls += 1;
    let logits = source.next_logits(context)?;
    if logits.vocab_size() != expected_vocab {
        return Err(DecodeError::VocabMismatch(format!(
            "backend returned {} logits, expected {expected_vocab}",
            logits.vocab_size()
        )));
    }
    Ok(TokenDistribution::from_logits(&logits, temperature)?)
}

fn require_full_vocab(
    source: &dyn NextTokenSource,
    policy: &RejectionPolicy,
    name: &str,
) -> Result<(), DecodeError> {
    if !source.capabilities().full_vocab {
        return Err(DecodeError::FullVocabRequired {
            policy: format!("{policy:?}"),
            role: name.to_string(),
        });
    }
    Ok(())
}

/// Autoregressive decode. Both models consume the same realized token stream;
/// the loop stops once a stop token is emitted (after appending it) or after
/// `max_new_tokens`.
///
/// Configuration problems return `Err`; backend or criterion failures during
/// generation abort it and come back in [`DecodeOutput::error`] alongside the
/// partial trace. An empty implicit-reward interval is not an abort: that
/// step keeps the draft (`mu = 0`) and is flagged in the trace.
pub fn decode(
    prompt_tokens: &[usize],
    models: &DecodeModels<'_>,
    policy: &RejectionPolicy,
    params: &DecodeParams,
) -> Result<DecodeOutput, DecodeError> {
    policy.validate()?;
    params.validate()?;
    let vocab = models.base.vocab_size();
    if models.proxy.vocab_size() != vocab {
        return Err(DecodeError::VocabMismatch(format!(
            "base has {vocab} tokens, proxy has {}",
            models.proxy.vocab_size()
        )));
    }
    let proxy_base = if policy.needs_proxy_base() {
        let q = models
            .proxy_base
            .ok_or(DecodeError::Criterion(CriterionError::ProxyBaseRequired))?;
        if q.vocab_size() != vocab {
            return Err(DecodeError::VocabMismatch(format!(
                "base has {vocab} tokens, proxy-base has {}",
                q.vocab_size()
            )));
        }
        Some(q)
    } else {
        None
    };
    if matches!(policy, RejectionPolicy::ImplicitReward { .. }) {
        require_full_vocab(models.base, policy, "base")?;
        require_full_vocab(models.proxy, policy, "proxy")?;
        if let Some(q) = proxy_base {
            require_full_vocab(q, policy, "proxy-base")?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut context = prompt_tokens.to_vec();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut calls = 0usize;
    let mut error = None;
    let start = Instant::now();

    while tokens.len() < params.max_new_tokens {
        let step = match decode_step(
            models,
            proxy_base,
            policy,
            params,
            vocab,
            &context,
            &mut rng,
            &mut calls,
        ) {
            Ok(step) => step,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        context.push(step.token);
        tokens.push(step.token);
        let stop = params.stop_token_ids.contains(&step.token);
        steps.push(step);
        if stop {
            break;
        }
    }

    Ok(DecodeOutput {
        tokens,
        trace: DecodeTrace {
            steps,
            wall_time: start.elapsed(),
            backend_calls: calls,
        },
        error,
    })
}

#[allow(clippy::too_many_arguments)]
fn decode_step(
    models: &DecodeModels<'_>,
    proxy_base: Option<&dyn NextTokenSource>,
    policy: &RejectionPolicy,
    params: &DecodeParams,
    vocab: usize,
    context: &[usize],
    rng: &mut ChaCha8Rng,
    calls: &mut usize,
) -> Result<PgmStep, DecodeError> {
    let p = fetch(models.base, context, params.temperature, vocab, calls)?;
    // The proxy distribution is only needed up front for criteria that
    // consult it; nudging and KAD defer the query until a rejection happens.
    let mut q_star = if policy.needs_proxy_distribution() {
        Some(fetch(models.proxy, context, params.temperature, vocab, calls)?)
    } else {
        None
    };

    let mut infeasible_fallback = false;
    let mu = match policy {
        RejectionPolicy::Nudging { lambda } => mu_nudging(&p, *lambda)?,
        RejectionPolicy::KadDual { lambda } => mu_kad_dual(&p, *lambda)?,
        RejectionPolicy::ConservativeBet { lambda } => {
            mu_conservative_bet(&p, q_star.as_ref().expect("proxy fetched"), *lambda)?
        }
        RejectionPolicy::ImplicitReward { .. } => {
            let q = fetch(
                proxy_base.expect("checked in decode"),
                context,
                params.temperature,
                vocab,
                calls,
            )?;
            match policy_mu(policy, &p, Some(&q), q_star.as_ref().expect("proxy fetched")) {
                Ok(mu) => mu,
                Err(CriterionError::InfeasibleImplicitReward { lower, upper }) => {
                    log::debug!(
                        "implicit-reward interval empty at step (bounds [{lower}, {upper}]); keeping the draft"
                    );
                    infeasible_fallback = true;
                    MuVector::zeros(vocab)
                }
                Err(e) => return Err(e.into()),
            }
        }
    };

    let draft = p.sample(rng);
    let mu_draft = mu.value(draft);
    let rejected = bernoulli(mu_draft, rng);
    let token = if rejected {
        let q_star = match &q_star {
            Some(q) => q,
            None => {
                q_star = Some(fetch(models.proxy, context, params.temperature, vocab, calls)?);
                q_star.as_ref().unwrap()
            }
        };
        q_star.sample(rng)
    } else {
        draft
    };
    Ok(PgmStep {
        draft,
        rejected,
        token,
        mu_draft,
        infeasible_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::TableLm;
    use crate::criteria::AlphaChoice;
    use crate::oracle::{enumerate_marginal, fixtures};

    fn dist(values: &[f64]) -> TokenDistribution {
        TokenDistribution::new(values.to_vec()).unwrap()
    }

    fn empirical_law(
        p: &TokenDistribution,
        q_star: &TokenDistribution,
        mu: &MuVector,
        draws: usize,
        seed: u64,
    ) -> TokenDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; p.vocab_size()];
        for _ in 0..draws {
            let step = step_sample(p, q_star, mu, &mut rng).unwrap();
            counts[step.token] += 1;
        }
        TokenDistribution::new(counts.iter().map(|&c| c as f64 / draws as f64).collect()).unwrap()
    }

    #[test]
    fn exact_marginal_identities() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q_star = dist(&[0.2, 0.7, 0.1]);
        let pi = exact_marginal(&p, &q_star, &MuVector::zeros(3)).unwrap();
        assert_eq!(pi.probs(), p.probs());
        let pi = exact_marginal(&p, &q_star, &MuVector::ones(3)).unwrap();
        for v in 0..3 {
            assert!((pi.prob(v) - q_star.prob(v)).abs() < 1e-15);
        }
        let mu = MuVector::new(vec![0.0, 1.0, 1.0]).unwrap();
        let pi = exact_marginal(&p, &q_star, &mu).unwrap();
        for (v, expect) in [(0, 0.6), (1, 0.35), (2, 0.05)] {
            assert!((pi.prob(v) - expect).abs() < 1e-15);
        }
        let oracle = enumerate_marginal(&p, &q_star, mu.values()).unwrap();
        assert!(pi.total_variation(&oracle).unwrap() < 1e-15);
    }

    #[test]
    fn step_sample_laws() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q_star = dist(&[0.2, 0.7, 0.1]);

        // never reject: law of the final token is p, and final == draft
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let step = step_sample(&p, &q_star, &MuVector::zeros(3), &mut rng).unwrap();
            assert!(!step.rejected);
            assert_eq!(step.token, step.draft);
        }
        let law = empirical_law(&p, &q_star, &MuVector::zeros(3), 100_000, 2);
        assert!(law.total_variation(&p).unwrap() < 0.01);

        // always reject: law of the final token is q*
        let law = empirical_law(&p, &q_star, &MuVector::ones(3), 100_000, 3);
        assert!(law.total_variation(&q_star).unwrap() < 0.01);

        // mixed: law matches the closed-form marginal (0.6, 0.35, 0.05)
        let mu = MuVector::new(vec![0.0, 1.0, 1.0]).unwrap();
        let law = empirical_law(&p, &q_star, &mu, 100_000, 4);
        let expect = exact_marginal(&p, &q_star, &mu).unwrap();
        for v in 0..3 {
            assert!((law.prob(v) - expect.prob(v)).abs() < 0.01);
        }
    }

    #[test]
    fn step_sample_rejects_size_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let q_star = dist(&[0.2, 0.7, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            step_sample(&p, &q_star, &MuVector::zeros(2), &mut rng),
            Err(DecodeError::VocabMismatch(_))
        ));
    }

    #[test]
    fn kad_zero_matches_base_only_sampling() {
        let (base, proxy) = fixtures::arith_toy_tables();
        let prompt = base.text_tokens("1+1=").unwrap();
        let params = DecodeParams {
            temperature: 0.7,
            max_new_tokens: 64,
            stop_token_ids: BTreeSet::new(),
            seed: 123,
        };
        let output = decode(
            &prompt,
            &DecodeModels::pair(&base, &proxy),
            &RejectionPolicy::KadDual { lambda: 0.0 },
            &params,
        )
        .unwrap();
        assert!(output.error.is_none());
        assert_eq!(output.trace.deferrals(), 0);

        // reference loop: sample the base model alone with the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut context = prompt.clone();
        let mut reference = Vec::new();
        for _ in 0..params.max_new_tokens {
            let logits = base.next_logits(&context).unwrap();
            let d = TokenDistribution::from_logits(&logits, params.temperature).unwrap();
            let token = d.sample(&mut rng);
            reference.push(token);
            context.push(token);
        }
        assert_eq!(output.tokens, reference);
    }

    #[test]
    fn nudging_lambda_one_defers_every_step() {
        // the arith-toy base never produces a point mass, so max p < 1 always
        let (base, proxy) = fixtures::arith_toy_tables();
        let prompt = base.text_tokens("1+1=").unwrap();
        let params = DecodeParams {
            max_new_tokens: 40,
            seed: 7,
            ..DecodeParams::default()
        };
        let output = decode(
            &prompt,
            &DecodeModels::pair(&base, &proxy),
            &RejectionPolicy::Nudging { lambda: 1.0 },
            &params,
        )
        .unwrap();
        assert!(output.error.is_none());
        assert_eq!(output.trace.deferrals(), output.trace.tokens_generated());
        assert!((output.trace.deferral_rate() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_is_deterministic() {
        let (base, proxy) = fixtures::arith_toy_tables();
        let prompt = base.text_tokens("1+1=").unwrap();
        let params = DecodeParams {
            max_new_tokens: 50,
            seed: 99,
            ..DecodeParams::default()
        };
        let policy = RejectionPolicy::ConservativeBet { lambda: 0.1 };
        let models = DecodeModels::pair(&base, &proxy);
        let a = decode(&prompt, &models, &policy, &params).unwrap();
        let b = decode(&prompt, &models, &policy, &params).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace.steps, b.trace.steps);
        assert_eq!(a.trace.backend_calls, b.trace.backend_calls);
    }

    #[test]
    fn per_step_law_matches_exact_marginal() {
        let (base, proxy) = fixtures::arith_toy_tables();
        let prompt = base.text_tokens("1+1=").unwrap();
        let params = DecodeParams {
            max_new_tokens: 6,
            seed: 11,
            ..DecodeParams::default()
        };
        let policy = RejectionPolicy::ConservativeBet { lambda: 0.0 };
        let models = DecodeModels::pair(&base, &proxy);
        let output = decode(&prompt, &models, &policy, &params).unwrap();
        assert!(output.error.is_none());

        // replay every realized context: the per-step law of the emitted
        // token must match the closed-form marginal
        let mut context = prompt.clone();
        for (index, step) in output.trace.steps.iter().enumerate() {
            let p = TokenDistribution::from_logits(
                &base.next_logits(&context).unwrap(),
                params.temperature,
            )
            .unwrap();
            let q_star = TokenDistribution::from_logits(
                &proxy.next_logits(&context).unwrap(),
                params.temperature,
            )
            .unwrap();
            let mu = mu_conservative_bet(&p, &q_star, 0.0).unwrap();
            let expect = exact_marginal(&p, &q_star, &mu).unwrap();
            let law = empirical_law(&p, &q_star, &mu, 10_000, 1000 + index as u64);
            assert!(
                law.total_variation(&expect).unwrap() < 0.03,
                "step {index}: tv too large"
            );
            context.push(step.token);
        }
    }

    #[test]
    fn nudging_rejection_is_independent_of_the_draft() {
        // nudging's rejection indicator depends only on the distribution, so
        // within one step every draft value sees the same outcome
        let p = dist(&[0.4, 0.35, 0.25]);
        let q_star = dist(&[0.2, 0.5, 0.3]);
        for lambda in [0.3, 0.45, 0.9] {
            let mu = mu_nudging(&p, lambda).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut by_draft: Vec<Vec<bool>> = vec![Vec::new(); 3];
            for _ in 0..3000 {
                let step = step_sample(&p, &q_star, &mu, &mut rng).unwrap();
                by_draft[step.draft].push(step.rejected);
            }
            let rates: Vec<f64> = by_draft
                .iter()
                .map(|v| v.iter().filter(|&&r| r).count() as f64 / v.len().max(1) as f64)
                .collect();
            for rate in &rates {
                assert_eq!(*rate, rates[0], "lambda {lambda}: rates {rates:?}");
            }
        }
    }

    #[test]
    fn stop_token_terminates_after_append() {
        let point_on = |token: usize| {
            let mut probs = vec![0.0; 3];
            probs[token] = 1.0;
            TokenDistribution::new(probs).unwrap()
        };
        let base = TableLm::new(
            3,
            None,
            point_on(2),
            vec![(vec![2], point_on(0)), (vec![0], point_on(1))],
        )
        .unwrap();
        let proxy = base.clone();
        let params = DecodeParams {
            temperature: 1.0,
            max_new_tokens: 50,
            stop_token_ids: [1].into_iter().collect(),
            seed: 0,
        };
        let output = decode(
            &[],
            &DecodeModels::pair(&base, &proxy),
            &RejectionPolicy::KadDual { lambda: 0.0 },
            &params,
        )
        .unwrap();
        // emits 2, 0, then the stop token 1 and halts
        assert_eq!(output.tokens, vec![2, 0, 1]);

        let capped = DecodeParams {
            stop_token_ids: BTreeSet::new(),
            max_new_tokens: 4,
            ..params
        };
        let output = decode(
            &[],
            &DecodeModels::pair(&base, &proxy),
            &RejectionPolicy::KadDual { lambda: 0.0 },
            &capped,
        )
        .unwrap();
        assert_eq!(output.tokens.len(), 4);
    }

    #[test]
    fn infeasible_implicit_reward_falls_back_per_step() {
        // single-state tables reproducing the infeasible fixture at every step
        let f = fixtures::infeasible_triple();
        let base = TableLm::new(2, None, f.p.clone(), vec![]).unwrap();
        let proxy = TableLm::new(2, None, f.q_star.clone(), vec![]).unwrap();
        let proxy_base = TableLm::new(2, None, f.q.clone(), vec![]).unwrap();
        let params = DecodeParams {
            temperature: 1.0,
            max_new_tokens: 20,
            stop_token_ids: BTreeSet::new(),
            seed: 1,
        };
        let models = DecodeModels {
            base: &base,
            proxy: &proxy,
            proxy_base: Some(&proxy_base),
        };
        let policy = RejectionPolicy::ImplicitReward {
            alpha_choice: AlphaChoice::Midpoint,
        };
        let output = decode(&[], &models, &policy, &params).unwrap();
        assert!(output.error.is_none());
        assert_eq!(output.trace.infeasible_fallbacks(), 20);
        assert_eq!(output.trace.deferrals(), 0);

        // with the fallback active the decode equals base-only sampling
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut reference = Vec::new();
        let d = TokenDistribution::from_logits(&base.next_logits(&[]).unwrap(), 1.0).unwrap();
        for _ in 0..20 {
            reference.push(d.sample(&mut rng));
        }
        assert_eq!(output.tokens, reference);
    }

    #[test]
    fn implicit_reward_decode_realizes_the_mixture() {
        // single-state tables from the feasible worked triple; the per-step
        // marginal must equal s
        let f = fixtures::feasible_triple();
        let base = TableLm::new(3, None, f.p.clone(), vec![]).unwrap();
        let proxy = TableLm::new(3, None, f.q_star.clone(), vec![]).unwrap();
        let proxy_base = TableLm::new(3, None, f.q.clone(), vec![]).unwrap();
        let params = DecodeParams {
            temperature: 1.0,
            max_new_tokens: 100_000,
            stop_token_ids: BTreeSet::new(),
            seed: 21,
        };
        let models = DecodeModels {
            base: &base,
            proxy: &proxy,
            proxy_base: Some(&proxy_base),
        };
        let policy = RejectionPolicy::ImplicitReward {
            alpha_choice: AlphaChoice::Midpoint,
        };
        let output = decode(&[], &models, &policy, &params).unwrap();
        assert!(output.error.is_none());
        assert_eq!(output.trace.infeasible_fallbacks(), 0);
        let mut counts = vec![0usize; 3];
        for &t in &output.tokens {
            counts[t] += 1;
        }
        let s = crate::criteria::implicit_reward_mixture(&f.p, &f.q, &f.q_star).unwrap();
        let law = TokenDistribution::new(
            counts.iter().map(|&c| c as f64 / 100_000.0).collect(),
        )
        .unwrap();
        assert!(law.total_variation(&s).unwrap() < 0.01);
    }

    #[test]
    fn implicit_reward_requires_proxy_base_and_full_vocab() {
        let f = fixtures::feasible_triple();
        let base = TableLm::new(3, None, f.p.clone(), vec![]).unwrap();
        let proxy = TableLm::new(3, None, f.q_star.clone(), vec![]).unwrap();
        let policy = RejectionPolicy::ImplicitReward {
            alpha_choice: AlphaChoice::Midpoint,
        };
        let err = decode(
            &[],
            &DecodeModels::pair(&base, &proxy),
            &policy,
            &DecodeParams::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DecodeError::Criterion(CriterionError::ProxyBaseRequired)
        ));
    }

    #[test]
    fn decode_rejects_mismatched_vocabs() {
        let base = TableLm::new(3, None, dist(&[0.5, 0.3, 0.2]), vec![]).unwrap();
        let proxy = TableLm::new(2, None, dist(&[0.5, 0.5]), vec![]).unwrap();
        assert!(matches!(
            decode(
                &[],
                &DecodeModels::pair(&base, &proxy),
                &RejectionPolicy::KadDual { lambda: 0.2 },
                &DecodeParams::default(),
            ),
            Err(DecodeError::VocabMismatch(_))
        ));
    }

    #[test]
    fn decode_validates_policy_and_params() {
        let base = TableLm::new(2, None, dist(&[0.5, 0.5]), vec![]).unwrap();
        let models = DecodeModels::pair(&base, &base);
        assert!(matches!(
            decode(
                &[],
                &models,
                &RejectionPolicy::KadDual { lambda: 1.5 },
                &DecodeParams::default(),
            ),
            Err(DecodeError::Criterion(CriterionError::BadLambda { .. }))
        ));
        assert!(matches!(
            decode(
                &[],
                &models,
                &RejectionPolicy::KadDual { lambda: 0.5 },
                &DecodeParams {
                    max_new_tokens: 0,
                    ..DecodeParams::default()
                },
            ),
            Err(DecodeError::BadParams(_))
        ));
    }
}
