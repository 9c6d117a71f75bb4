//! Line-oriented `key = value` config format used by backend and task files.
//!
//! Blank lines and `#` comments are ignored. Values may contain `\n`, `\t`
//! and `\\` escapes so multi-line strings survive the line-based format;
//! [`emit`] writes the same escapes back, so parse -> emit -> parse
//! round-trips.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

/// Parsed key-value pairs, kept sorted by key for stable emission.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(KvError::BadLine { line })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(KvError::BadLine { line });
            }
            let value = unescape(value.trim());
            if entries.insert(key.clone(), value).is_some() {
                return Err(KvError::DuplicateKey { line, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&escape(value));
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::MissingKey {
            key: key.to_string(),
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| KvError::BadValue {
                key: key.to_string(),
                message: format!("cannot parse `{raw}`"),
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KvFile::parse("# header\n\nname = toy\n n = 3 \n").unwrap();
        assert_eq!(kv.get("name"), Some("toy"));
        assert_eq!(kv.get_parsed::<usize>("n").unwrap(), Some(3));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn escapes_round_trip() {
        let mut kv = KvFile::new_with(&[("suffix", "\n\nPresent: \\boxed{{x}}\t.")]);
        kv.set("plain", "hello world");
        let emitted = kv.emit();
        let reparsed = KvFile::parse(&emitted).unwrap();
        assert_eq!(kv, reparsed);
        assert_eq!(reparsed.get("suffix"), Some("\n\nPresent: \\boxed{{x}}\t."));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            KvFile::parse("just some text"),
            Err(KvError::BadLine { line: 1 })
        ));
        assert!(matches!(
            KvFile::parse("a = 1\na = 2"),
            Err(KvError::DuplicateKey { line: 2, .. })
        ));
    }

    impl KvFile {
        fn new_with(pairs: &[(&str, &str)]) -> Self {
            let mut kv = KvFile::default();
            for (k, v) in pairs {
                kv.set(k, *v);
            }
            kv
        }
    }
}
