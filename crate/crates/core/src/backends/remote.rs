//! HTTP client for logprob-exposing completions servers.
//!
//! One request per next-token query: `POST {endpoint}/v1/completions` with
//! `max_tokens = 1` and `temperature = 1.0` (temperature is applied
//! client-side, the server is asked for raw scores). The response's
//! `top_logprobs` map for the first position is rebuilt into a full-size
//! logit vector; token ids missing from a top-k response are floored at
//! `min returned logprob - 20`.

use super::{BackendError, NextTokenSource, SourceCapabilities};
use crate::dist::LogitVector;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

/// How many logprobs to request per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopKRequest {
    All,
    K(usize),
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a [usize],
    max_tokens: usize,
    logprobs: LogprobsField,
    temperature: f64,
}

#[derive(Serialize)]
#[serde(untagged)]
enum LogprobsField {
    All(&'static str),
    K(usize),
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    top_logprobs: Option<Vec<HashMap<String, f64>>>,
}

const NOT_OBSERVED: usize = usize::MAX;

/// Remote next-token source. Concurrent in-flight requests are fine; each
/// request is independent and idempotent.
pub struct RemoteLm {
    endpoint: String,
    model: String,
    vocab_size: usize,
    top_k: TopKRequest,
    client: reqwest::blocking::Client,
    /// Smallest partial coverage seen in any response; a top-k answer from
    /// the server downgrades the reported capabilities immediately.
    observed_top_k: AtomicUsize,
}

impl RemoteLm {
    pub fn new(
        endpoint: String,
        model: String,
        vocab_size: usize,
        top_k: TopKRequest,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        if vocab_size == 0 {
            return Err(BackendError::BadParameter("vocab_size must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model,
            vocab_size,
            top_k,
            client,
            observed_top_k: AtomicUsize::new(NOT_OBSERVED),
        })
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.endpoint)
    }

    fn rebuild_logits(&self, top: &HashMap<String, f64>) -> Result<LogitVector, BackendError> {
        if top.is_empty() {
            return Err(BackendError::ProtocolError(
                "empty top_logprobs map".into(),
            ));
        }
        let mut entries = Vec::with_capacity(top.len());
        for (key, &logprob) in top {
            let token: usize = key.parse().map_err(|_| {
                BackendError::VocabMismatch(format!("non-integer token id key `{key}`"))
            })?;
            if token >= self.vocab_size {
                return Err(BackendError::VocabMismatch(format!(
                    "token id {token} >= configured vocab_size {}",
                    self.vocab_size
                )));
            }
            if !logprob.is_finite() {
                return Err(BackendError::ProtocolError(format!(
                    "non-finite logprob for token {token}"
                )));
            }
            entries.push((token, logprob));
        }
        if entries.len() < self.vocab_size {
            self.observed_top_k
                .fetch_min(entries.len(), Ordering::SeqCst);
        }
        let min = entries
            .iter()
            .map(|&(_, lp)| lp)
            .fold(f64::INFINITY, f64::min);
        let mut logits = vec![min - 20.0; self.vocab_size];
        for (token, logprob) in entries {
            logits[token] = logprob;
        }
        Ok(LogitVector::new(logits)?)
    }
}

impl NextTokenSource for RemoteLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn capabilities(&self) -> SourceCapabilities {
        let observed = self.observed_top_k.load(Ordering::SeqCst);
        let configured_k = match self.top_k {
            TopKRequest::All => None,
            TopKRequest::K(k) => Some(k),
        };
        let top_k_limit = match (configured_k, observed) {
            (Some(k), NOT_OBSERVED) => Some(k),
            (Some(k), seen) => Some(k.min(seen)),
            (None, NOT_OBSERVED) => None,
            (None, seen) => Some(seen),
        };
        SourceCapabilities {
            full_vocab: top_k_limit.is_none(),
            top_k_limit,
        }
    }

    fn next_logits(&self, context: &[usize]) -> Result<LogitVector, BackendError> {
        let request = CompletionRequest {
            model: &self.model,
            prompt: context,
            max_tokens: 1,
            logprobs: match self.top_k {
                TopKRequest::All => LogprobsField::All("all"),
                TopKRequest::K(k) => LogprobsField::K(k),
            },
            temperature: 1.0,
        };
        let response = self
            .client
            .post(self.completions_url())
            .json(&request)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::HttpError(status.as_u16()));
        }
        let body: CompletionResponse = response.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::ProtocolError(e.to_string())
            }
        })?;
        let choice = body
            .choices
            .first()
            .ok_or_else(|| BackendError::ProtocolError("no choices in response".into()))?;
        let top = choice
            .logprobs
            .as_ref()
            .and_then(|lp| lp.top_logprobs.as_ref())
            .and_then(|maps| maps.first())
            .ok_or_else(|| BackendError::ProtocolError("missing logprobs field".into()))?;
        self.rebuild_logits(top)
    }
}
