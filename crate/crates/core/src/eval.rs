//! Evaluation harness: chat-format task ingestion, prompt construction,
//! regex answer extraction, accuracy and throughput metrics.
//!
//! Tasks are JSONL files of `{"messages": [{"role", "content"}, ...],
//! "gold": "..."}` records. Task specs name one of three extraction rules
//! (last number, last `\boxed{}` content, last standalone capital A-J) and
//! the prompt wrapping applied to the user query.

use crate::backends::render_tokens;
use crate::criteria::RejectionPolicy;
use crate::pgm::{decode, DecodeModels, DecodeParams};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

/// System prompt shared by every benchmark task.
pub const SHARED_SYSTEM_PROMPT: &str =
    "Answer the question by walking through the reasoning step by step.";

/// Prefix prepended to multiple-choice user queries.
pub const MCQ_USER_PREFIX: &str =
    "Choose the correct answer to the following multiple-choice question.\n\n";

/// Suffix appended to multiple-choice user queries.
pub const MCQ_USER_SUFFIX: &str = "\nProvide your reasoning about the answer and finish your answer with the letter corresponding to the correct option (e.g., A, B, C, or D).\n\n";

/// Suffix appended to math user queries asking for a boxed answer.
pub const MATH_USER_SUFFIX: &str =
    "\n\nPresent the answer in LaTex format: \\boxed{{Your answer}}";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("parse error at line {line}")]
    ParseError { line: usize },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("example has no user message")]
    NoUserMessage,
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("unknown extraction rule `{0}`")]
    UnknownExtraction(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(#[from] crate::kv::KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// One benchmark example: the chat messages and the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub messages: Vec<ChatMessage>,
    pub gold: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionRule {
    LastNumber,
    LastBoxedNumber,
    LastCapitalLetterAToJ,
}

impl ExtractionRule {
    pub fn name(&self) -> &'static str {
        match self {
            ExtractionRule::LastNumber => "last_number",
            ExtractionRule::LastBoxedNumber => "last_boxed_number",
            ExtractionRule::LastCapitalLetterAToJ => "last_capital_letter_A_to_J",
        }
    }

    pub fn parse(raw: &str) -> Result<Self, EvalError> {
        match raw {
            "last_number" => Ok(ExtractionRule::LastNumber),
            "last_boxed_number" => Ok(ExtractionRule::LastBoxedNumber),
            "last_capital_letter_A_to_J" => Ok(ExtractionRule::LastCapitalLetterAToJ),
            other => Err(EvalError::UnknownExtraction(other.to_string())),
        }
    }
}

/// A benchmark task: its extraction rule and prompt wrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub extraction: ExtractionRule,
    pub user_prefix: String,
    pub user_suffix: String,
    pub system_prompt: String,
}

impl TaskSpec {
    pub fn gsm8k() -> Self {
        Self {
            name: "gsm8k".into(),
            extraction: ExtractionRule::LastNumber,
            user_prefix: String::new(),
            user_suffix: String::new(),
            system_prompt: SHARED_SYSTEM_PROMPT.into(),
        }
    }

    pub fn svamp() -> Self {
        Self {
            name: "svamp".into(),
            ..Self::gsm8k()
        }
    }

    pub fn math500() -> Self {
        Self {
            name: "math500".into(),
            extraction: ExtractionRule::LastBoxedNumber,
            user_prefix: String::new(),
            user_suffix: MATH_USER_SUFFIX.into(),
            system_prompt: SHARED_SYSTEM_PROMPT.into(),
        }
    }

    pub fn arc_challenge() -> Self {
        Self {
            name: "arc-challenge".into(),
            extraction: ExtractionRule::LastCapitalLetterAToJ,
            user_prefix: MCQ_USER_PREFIX.into(),
            user_suffix: MCQ_USER_SUFFIX.into(),
            system_prompt: SHARED_SYSTEM_PROMPT.into(),
        }
    }

    pub fn commonsense_qa() -> Self {
        Self {
            name: "commonsense-qa".into(),
            ..Self::arc_challenge()
        }
    }

    /// Parses a task spec from the key-value format: `name`, `extraction`,
    /// and optional `user_prefix` / `user_suffix` / `system_prompt`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let kv = crate::kv::KvFile::parse(text)?;
        Ok(Self {
            name: kv.require("name")?.to_string(),
            extraction: ExtractionRule::parse(kv.require("extraction")?)?,
            user_prefix: kv.get("user_prefix").unwrap_or_default().to_string(),
            user_suffix: kv.get("user_suffix").unwrap_or_default().to_string(),
            system_prompt: kv.get("system_prompt").unwrap_or_default().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn emit(&self) -> String {
        let mut kv = crate::kv::KvFile::default();
        kv.set("name", self.name.clone());
        kv.set("extraction", self.extraction.name());
        kv.set("user_prefix", self.user_prefix.clone());
        kv.set("user_suffix", self.user_suffix.clone());
        kv.set("system_prompt", self.system_prompt.clone());
        kv.emit()
    }
}

/// Parses a JSONL task file: one `{"messages": [...], "gold": "..."}` object
/// per line, in file order. Blank lines are skipped.
pub fn parse_examples(text: &str) -> Result<Vec<Example>, EvalError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|_| EvalError::ParseError { line })?;
        let object = value.as_object().ok_or(EvalError::ParseError { line })?;
        let messages = object
            .get("messages")
            .ok_or_else(|| EvalError::MissingField {
                line,
                field: "messages".into(),
            })?;
        let gold = object.get("gold").ok_or_else(|| EvalError::MissingField {
            line,
            field: "gold".into(),
        })?;
        let messages: Vec<ChatMessage> = serde_json::from_value(messages.clone())
            .map_err(|_| EvalError::ParseError { line })?;
        let gold = gold
            .as_str()
            .ok_or(EvalError::ParseError { line })?
            .to_string();
        out.push(Example { messages, gold });
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>, EvalError> {
    parse_examples(&std::fs::read_to_string(path)?)
}

/// Builds the chat prompt for one example: the task's system message first
/// (omitted when empty, for toy tasks with restricted alphabets), then the
/// example's messages with the first user message wrapped in the task's
/// prefix and suffix. Wrapping is unconditional, never idempotent.
pub fn build_prompt(task: &TaskSpec, example: &Example) -> Result<Vec<ChatMessage>, EvalError> {
    let mut out = Vec::new();
    if !task.system_prompt.is_empty() {
        out.push(ChatMessage::system(task.system_prompt.clone()));
    }
    let mut wrapped = false;
    for message in &example.messages {
        let mut message = message.clone();
        if message.role == Role::User && !wrapped {
            message.content = format!(
                "{}{}{}",
                task.user_prefix, message.content, task.user_suffix
            );
            wrapped = true;
        }
        out.push(message);
    }
    if !wrapped {
        return Err(EvalError::NoUserMessage);
    }
    Ok(out)
}

/// Flattens a chat prompt to plain text: message contents joined by newlines.
pub fn flatten_prompt(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

fn last_number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("valid regex")
    })
}

/// Applies an extraction rule to generated text; absence is a value, not an
/// error.
pub fn extract_answer(rule: ExtractionRule, text: &str) -> Option<String> {
    match rule {
        ExtractionRule::LastNumber => last_number_regex()
            .find_iter(text)
            .last()
            .map(|m| m.as_str().replace(',', "")),
        ExtractionRule::LastBoxedNumber => extract_last_boxed(text),
        ExtractionRule::LastCapitalLetterAToJ => extract_last_capital(text),
    }
}

fn extract_last_boxed(text: &str) -> Option<String> {
    let marker = "\\boxed{";
    let mut result = None;
    let mut from = 0;
    while let Some(found) = text[from..].find(marker) {
        let content_start = from + found + marker.len();
        if let Some(content) = balanced_brace_prefix(&text[content_start..]) {
            result = Some(content.to_string());
        }
        from = content_start;
    }
    result
}

/// The prefix of `text` up to the brace closing an already-open group,
/// tracking nesting so LaTeX like `\frac{\pi}{2}` stays intact.
fn balanced_brace_prefix(text: &str) -> Option<&str> {
    let mut depth = 1usize;
    for (idx, c) in text.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[..idx]);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract_last_capital(text: &str) -> Option<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut result = None;
    for (idx, &c) in chars.iter().enumerate() {
        if !('A'..='J').contains(&c) {
            continue;
        }
        let standalone_before = idx == 0 || !chars[idx - 1].is_ascii_alphanumeric();
        let standalone_after =
            idx + 1 == chars.len() || !chars[idx + 1].is_ascii_alphanumeric();
        if standalone_before && standalone_after {
            result = Some(c.to_string());
        }
    }
    result
}

fn parse_numeric(raw: &str) -> Option<f64> {
    let cleaned: String = raw
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',' && *c != '$')
        .collect();
    cleaned.parse().ok()
}

fn numbers_equal(a: &str, b: &str) -> bool {
    match (parse_numeric(a), parse_numeric(b)) {
        (Some(x), Some(y)) => x == y || (x - y).abs() <= 1e-6 * x.abs().max(y.abs()),
        _ => false,
    }
}

fn collapse_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Scores an extracted answer against gold. Absent extraction is incorrect.
/// Numeric rules compare after normalization (commas, `$`, whitespace
/// stripped; 1e-6 relative tolerance); boxed answers compare as
/// whitespace-collapsed strings first, then numerically when both sides
/// parse; letters compare exactly.
pub fn score(rule: ExtractionRule, extracted: Option<&str>, gold: &str) -> bool {
    let Some(extracted) = extracted else {
        return false;
    };
    match rule {
        ExtractionRule::LastNumber => numbers_equal(extracted, gold),
        ExtractionRule::LastBoxedNumber => {
            collapse_whitespace(extracted) == collapse_whitespace(gold)
                || numbers_equal(extracted, gold)
        }
        ExtractionRule::LastCapitalLetterAToJ => extracted.trim() == gold.trim(),
    }
}

/// Source of the time measurement behind the throughput metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThroughputClock {
    /// Real per-decode wall time.
    Wall,
    /// One virtual millisecond per backend call. Fully deterministic, for
    /// reproducibility comparisons; the number then reads as tokens per
    /// thousand backend calls.
    BackendCalls,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Worker threads; examples are independent and each one is seeded as
    /// `mix(seed, example id)`, so results are order-independent.
    pub parallelism: usize,
    pub clock: ThroughputClock,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            clock: ThroughputClock::Wall,
        }
    }
}

/// Per-example outcome record, one JSON object per line in result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub generated_len: usize,
    pub extracted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub deferral_rate: f64,
}

/// Summary object written after the per-example records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub tokens_per_second: f64,
    pub deferral_rate_mean: f64,
    pub n_failed: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_example: Vec<ExampleRecord>,
    pub accuracy: f64,
    pub tokens_per_second: f64,
    pub deferral_rate_mean: f64,
    pub n_failed: usize,
}

impl EvalResult {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            accuracy: self.accuracy,
            tokens_per_second: self.tokens_per_second,
            deferral_rate_mean: self.deferral_rate_mean,
            n_failed: self.n_failed,
        }
    }

    /// Writes per-example records, then the summary, one JSON object per
    /// line.
    pub fn write_jsonl<W: Write>(&self, writer: &mut W) -> std::io::Result<()> {
        for record in &self.per_example {
            serde_json::to_writer(&mut *writer, record)?;
            writer.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut *writer, &self.summary())?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}

// SplitMix-style mixing of the run seed with the example id.
fn mix_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ExampleOutcome {
    record: ExampleRecord,
    tokens: usize,
    seconds: f64,
    failed: bool,
}

fn evaluate_example(
    task: &TaskSpec,
    id: usize,
    example: &Example,
    models: &DecodeModels<'_>,
    policy: &RejectionPolicy,
    params: &DecodeParams,
    clock: ThroughputClock,
) -> ExampleOutcome {
    let failed_record = |extracted: Option<String>, generated_len: usize| ExampleRecord {
        id,
        generated_len,
        extracted,
        gold: example.gold.clone(),
        correct: false,
        deferral_rate: 0.0,
    };

    let messages = match build_prompt(task, example) {
        Ok(messages) => messages,
        Err(_) => {
            return ExampleOutcome {
                record: failed_record(None, 0),
                tokens: 0,
                seconds: 0.0,
                failed: true,
            }
        }
    };
    let prompt_text = flatten_prompt(&messages);
    let Some(prompt_tokens) = models.base.text_tokens(&prompt_text) else {
        log::warn!("example {id}: base backend cannot encode the prompt text");
        return ExampleOutcome {
            record: failed_record(None, 0),
            tokens: 0,
            seconds: 0.0,
            failed: true,
        };
    };

    let mut params = params.clone();
    params.seed = mix_seed(params.seed, id as u64);
    let output = match decode(&prompt_tokens, models, policy, &params) {
        Ok(output) => output,
        Err(e) => {
            log::warn!("example {id}: decode refused: {e}");
            return ExampleOutcome {
                record: failed_record(None, 0),
                tokens: 0,
                seconds: 0.0,
                failed: true,
            };
        }
    };

    let text = render_tokens(models.base, &output.tokens);
    let tokens = output.trace.tokens_generated();
    let seconds = match clock {
        ThroughputClock::Wall => output.trace.wall_time.as_secs_f64(),
        ThroughputClock::BackendCalls => output.trace.backend_calls as f64 * 1e-3,
    };
    if let Some(e) = output.error {
        log::warn!("example {id}: decode aborted: {e}");
        return ExampleOutcome {
            record: failed_record(None, text.chars().count()),
            tokens,
            seconds,
            failed: true,
        };
    }

    let extracted = extract_answer(task.extraction, &text);
    let correct = score(task.extraction, extracted.as_deref(), &example.gold);
    ExampleOutcome {
        record: ExampleRecord {
            id,
            generated_len: text.chars().count(),
            extracted,
            gold: example.gold.clone(),
            correct,
            deferral_rate: output.trace.deferral_rate(),
        },
        tokens,
        seconds,
        failed: false,
    }
}

/// Decodes, extracts and scores every example. Per-example failures (backend
/// errors, unencodable prompts) degrade to incorrect and are counted in
/// `n_failed`; the run continues.
pub fn run_eval(
    task: &TaskSpec,
    examples: &[Example],
    models: &DecodeModels<'_>,
    policy: &RejectionPolicy,
    params: &DecodeParams,
    options: &EvalOptions,
) -> Result<EvalResult, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    let evaluate = |(id, example): (usize, &Example)| {
        evaluate_example(task, id, example, models, policy, params, options.clock)
    };
    let outcomes: Vec<ExampleOutcome> = if options.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism)
            .build()
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        pool.install(|| examples.par_iter().enumerate().map(evaluate).collect())
    } else {
        examples.iter().enumerate().map(evaluate).collect()
    };

    let n = outcomes.len();
    let accuracy = outcomes.iter().filter(|o| o.record.correct).count() as f64 / n as f64;
    let total_tokens: usize = outcomes.iter().map(|o| o.tokens).sum();
    let total_seconds: f64 = outcomes.iter().map(|o| o.seconds).sum();
    let tokens_per_second = if total_seconds > 0.0 {
        total_tokens as f64 / total_seconds
    } else {
        0.0
    };
    let deferral_rate_mean =
        outcomes.iter().map(|o| o.record.deferral_rate).sum::<f64>() / n as f64;
    let n_failed = outcomes.iter().filter(|o| o.failed).count();
    Ok(EvalResult {
        per_example: outcomes.into_iter().map(|o| o.record).collect(),
        accuracy,
        tokens_per_second,
        deferral_rate_mean,
        n_failed,
    })
}
