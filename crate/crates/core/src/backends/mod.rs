//! Next-token-distribution sources.
//!
//! Three implementations share one behavioral contract: deterministic table
//! LMs for exact tests, character n-gram LMs for realistic toy decoding, and
//! an HTTP client for logprob-exposing inference servers. Contexts are
//! token-id sequences throughout; text/token mapping only exists where a
//! backend naturally has one (characters for the n-gram model, an optional
//! alphabet for tables).

mod ngram;
mod remote;
mod table;

pub use ngram::CharNgramLm;
pub use remote::{RemoteLm, TopKRequest};
pub use table::TableLm;

use crate::dist::LogitVector;
use crate::kv::{KvError, KvFile};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("server returned HTTP {0}")]
    HttpError(u16),
    #[error("malformed server response: {0}")]
    ProtocolError(String),
    #[error("vocab mismatch: {0}")]
    VocabMismatch(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("bad backend parameter: {0}")]
    BadParameter(String),
    #[error("config: {0}")]
    Config(#[from] KvError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dist(#[from] crate::dist::DistError),
    #[error("transport: {0}")]
    Transport(String),
}

/// What a source can actually deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceCapabilities {
    /// True when `next_logits` covers the whole vocabulary exactly. Top-k
    /// sources report false; policies that need full-vocabulary sums must
    /// refuse them.
    pub full_vocab: bool,
    pub top_k_limit: Option<usize>,
}

impl SourceCapabilities {
    pub fn full() -> Self {
        Self {
            full_vocab: true,
            top_k_limit: None,
        }
    }
}

/// A conditional next-token distribution, exposed as raw log scores.
///
/// `vocab_size` is constant over the source's lifetime and every returned
/// vector has exactly that length.
pub trait NextTokenSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn capabilities(&self) -> SourceCapabilities;

    fn next_logits(&self, context: &[usize]) -> Result<LogitVector, BackendError>;

    /// Text rendering of one token, when the backend has a natural mapping.
    fn token_text(&self, _token: usize) -> Option<String> {
        None
    }

    /// Token encoding of a text, when the backend has a natural mapping.
    fn text_tokens(&self, _text: &str) -> Option<Vec<usize>> {
        None
    }
}

/// Renders a token sequence as text. Tokens without a text mapping fall back
/// to their decimal id followed by a space, which keeps toy numeric tasks
/// usable with bare table models.
pub fn render_tokens(source: &dyn NextTokenSource, tokens: &[usize]) -> String {
    let mut out = String::new();
    for &token in tokens {
        match source.token_text(token) {
            Some(text) => out.push_str(&text),
            None => {
                out.push_str(&token.to_string());
                out.push(' ');
            }
        }
    }
    out
}

/// A parsed backend config file.
///
/// The format is line-oriented `key = value` (see [`crate::kv`]). Every file
/// carries a `kind` plus kind-specific keys:
///
/// * `kind = table`: `path` (TableLm JSON), optional `vocab_hash`
/// * `kind = ngram`: `corpus` (text file), `n`, `delta`, optional `alphabet`,
///   optional `vocab_hash`
/// * `kind = remote`: `endpoint`, `model`, `vocab_size`, `top_k`
///   (`all` or an integer), `timeout_ms`, optional `vocab_hash`
///
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Optional tokenizer fingerprint; paired sources with differing hashes
    /// are refused at assembly time.
    pub vocab_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Table {
        path: PathBuf,
    },
    Ngram {
        corpus: PathBuf,
        n: usize,
        delta: f64,
        alphabet: Option<String>,
    },
    Remote {
        endpoint: String,
        model: String,
        vocab_size: usize,
        top_k: TopKRequest,
        timeout_ms: u64,
    },
}

impl BackendConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, BackendError> {
        let kv = KvFile::parse(text)?;
        let vocab_hash = kv.get("vocab_hash").map(str::to_string);
        let resolve = |raw: &str| -> PathBuf {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let kind = match kv.require("kind")? {
            "table" => BackendKind::Table {
                path: resolve(kv.require("path")?),
            },
            "ngram" => BackendKind::Ngram {
                corpus: resolve(kv.require("corpus")?),
                n: kv
                    .get_parsed::<usize>("n")?
                    .ok_or_else(|| KvError::MissingKey { key: "n".into() })?,
                delta: kv.get_parsed::<f64>("delta")?.unwrap_or(0.5),
                alphabet: kv.get("alphabet").map(str::to_string),
            },
            "remote" => {
                let top_k = match kv.require("top_k")? {
                    "all" => TopKRequest::All,
                    raw => TopKRequest::K(raw.parse().map_err(|_| KvError::BadValue {
                        key: "top_k".into(),
                        message: format!("expected `all` or an integer, got `{raw}`"),
                    })?),
                };
                BackendKind::Remote {
                    endpoint: kv.require("endpoint")?.to_string(),
                    model: kv.require("model")?.to_string(),
                    vocab_size: kv.get_parsed::<usize>("vocab_size")?.ok_or_else(|| {
                        KvError::MissingKey {
                            key: "vocab_size".into(),
                        }
                    })?,
                    top_k,
                    timeout_ms: kv.get_parsed::<u64>("timeout_ms")?.unwrap_or(30_000),
                }
            }
            other => {
                return Err(BackendError::BadParameter(format!(
                    "unknown backend kind `{other}`"
                )))
            }
        };
        Ok(Self { kind, vocab_hash })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base_dir)
    }

    /// Re-emits the config in the same key-value format. Paths are written as
    /// given (already resolved), so emit of a parsed config parses back to an
    /// equal config with `base_dir = "."`.
    pub fn emit(&self) -> String {
        let mut kv = KvFile::default();
        if let Some(hash) = &self.vocab_hash {
            kv.set("vocab_hash", hash.clone());
        }
        match &self.kind {
            BackendKind::Table { path } => {
                kv.set("kind", "table");
                kv.set("path", path.display().to_string());
            }
            BackendKind::Ngram {
                corpus,
                n,
                delta,
                alphabet,
            } => {
                kv.set("kind", "ngram");
                kv.set("corpus", corpus.display().to_string());
                kv.set("n", n.to_string());
                kv.set("delta", delta.to_string());
                if let Some(alphabet) = alphabet {
                    kv.set("alphabet", alphabet.clone());
                }
            }
            BackendKind::Remote {
                endpoint,
                model,
                vocab_size,
                top_k,
                timeout_ms,
            } => {
                kv.set("kind", "remote");
                kv.set("endpoint", endpoint.clone());
                kv.set("model", model.clone());
                kv.set("vocab_size", vocab_size.to_string());
                kv.set(
                    "top_k",
                    match top_k {
                        TopKRequest::All => "all".to_string(),
                        TopKRequest::K(k) => k.to_string(),
                    },
                );
                kv.set("timeout_ms", timeout_ms.to_string());
            }
        }
        kv.emit()
    }

    /// Instantiates the configured source.
    pub fn build(&self) -> Result<Box<dyn NextTokenSource>, BackendError> {
        match &self.kind {
            BackendKind::Table { path } => {
                let text = std::fs::read_to_string(path)?;
                Ok(Box::new(TableLm::from_json(&text)?))
            }
            BackendKind::Ngram {
                corpus,
                n,
                delta,
                alphabet,
            } => {
                let text = std::fs::read_to_string(corpus)?;
                let lm = match alphabet {
                    Some(alphabet) => {
                        CharNgramLm::train_with_alphabet(&text, *n, *delta, alphabet)?
                    }
                    None => CharNgramLm::train(&text, *n, *delta)?,
                };
                Ok(Box::new(lm))
            }
            BackendKind::Remote {
                endpoint,
                model,
                vocab_size,
                top_k,
                timeout_ms,
            } => Ok(Box::new(RemoteLm::new(
                endpoint.clone(),
                model.clone(),
                *vocab_size,
                *top_k,
                std::time::Duration::from_millis(*timeout_ms),
            )?)),
        }
    }
}
