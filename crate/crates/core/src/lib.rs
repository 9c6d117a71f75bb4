//! Rejection-based proxy test-time alignment.
//!
//! A large base model drafts each token; a pluggable rejection criterion
//! decides, per token, whether to keep the draft or defer to a small aligned
//! proxy model. The crate provides the probability-simplex primitives, the
//! four rejection criteria (nudging, dual KAD, conservative confidence bet,
//! implicit reward), the draft/reject/fallback sampler with its exact
//! marginal, exact-enumeration oracles for verification, pluggable model
//! backends (tables, character n-grams, HTTP logprob servers), and an
//! evaluation harness with answer extraction and throughput metrics.

pub mod backends;
pub mod criteria;
pub mod dist;
pub mod eval;
pub mod kv;
pub mod oracle;
pub mod pgm;

pub use backends::{BackendConfig, BackendError, NextTokenSource, SourceCapabilities};
pub use criteria::{AlphaChoice, AlphaInterval, CriterionError, MuVector, RejectionPolicy};
pub use dist::{DistError, LogitVector, TokenDistribution};
pub use eval::{EvalError, EvalResult, Example, TaskSpec};
pub use pgm::{decode, DecodeError, DecodeModels, DecodeOutput, DecodeParams, DecodeTrace, PgmStep};
