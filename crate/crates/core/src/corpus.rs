//! Documents, queries, tokenization and hashed features.
//!
//! Records are line-delimited JSON objects. Documents carry
//! `id, lang, title, text`; queries carry `id, lang, text` plus optional
//! `answers` and `gold_doc_ids`. Invalid lines are collected in a reject report
//! (`line<TAB>reason`) instead of aborting the ingest; duplicate ids are fatal.
//!
//! Text is turned into features in two steps: [`tokenize`] (NFC, lowercase,
//! split on anything that is not alphanumeric, per-character tokens for
//! space-free scripts, prefix truncation) and [`featurize`] (hashed whole
//! tokens plus hashed character n-grams, with counts).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::hashing::hash_bytes;

/// Two-letter ISO 639-1 language code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lang(String);

impl Lang {
    pub fn new(code: impl Into<String>) -> Self {
        Lang(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// English display name used when rendering instructions.
    pub fn display_name(&self) -> &str {
        match self.0.as_str() {
            "ar" => "Arabic",
            "bn" => "Bengali",
            "de" => "German",
            "el" => "Greek",
            "en" => "English",
            "es" => "Spanish",
            "fi" => "Finnish",
            "fr" => "French",
            "he" => "Hebrew",
            "hi" => "Hindi",
            "hy" => "Armenian",
            "ja" => "Japanese",
            "ka" => "Georgian",
            "ko" => "Korean",
            "ru" => "Russian",
            "te" => "Telugu",
            "th" => "Thai",
            "zh" => "Chinese",
            other => other,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub lang: Lang,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Title and body as one string, the unit every model sees.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub lang: Lang,
    pub text: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

/// An invalid input line that was skipped during ingest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Ordered records with unique ids and an id lookup.
#[derive(Debug, Clone, Default)]
pub struct Records<T> {
    items: Vec<T>,
    by_id: HashMap<String, usize>,
    pub rejects: Vec<Reject>,
}

pub type DocumentCollection = Records<Document>;
pub type QuerySet = Records<Query>;

pub trait Record: Serialize + for<'de> Deserialize<'de> {
    const KIND: &'static str;
    fn id(&self) -> &str;
    fn lang(&self) -> &Lang;
    /// Field-level validation beyond JSON shape; returns a reject reason.
    fn check(&self) -> Option<String>;
}

impl Record for Document {
    const KIND: &'static str = "document";
    fn id(&self) -> &str {
        &self.id
    }
    fn lang(&self) -> &Lang {
        &self.lang
    }
    fn check(&self) -> Option<String> {
        if self.id.is_empty() {
            Some("empty id".into())
        } else if self.text.trim().is_empty() {
            Some("empty text".into())
        } else {
            None
        }
    }
}

impl Record for Query {
    const KIND: &'static str = "query";
    fn id(&self) -> &str {
        &self.id
    }
    fn lang(&self) -> &Lang {
        &self.lang
    }
    fn check(&self) -> Option<String> {
        if self.id.is_empty() {
            Some("empty id".into())
        } else if self.text.trim().is_empty() {
            Some("empty text".into())
        } else {
            None
        }
    }
}

impl<T: Record> Records<T> {
    /// Build from in-memory records; duplicate ids are an error.
    pub fn from_vec(items: Vec<T>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if let Some(prev) = by_id.insert(item.id().to_string(), i) {
                return Err(Error::DuplicateId {
                    path: "<memory>".into(),
                    id: item.id().to_string(),
                    first_line: prev + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Records {
            items,
            by_id,
            rejects: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Read line-delimited records. Lines that fail to parse, fail field
    /// validation, or use a language outside `config.languages` are rejected;
    /// blank lines are skipped.
    pub fn ingest(path: &Path, config: &CorpusConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let known: HashSet<&str> = config.languages.iter().map(String::as_str).collect();
        let mut items = Vec::new();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        let mut rejects = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: T = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    rejects.push(Reject {
                        line: line_no,
                        reason: format!("malformed {}: {e}", T::KIND),
                    });
                    continue;
                }
            };
            if let Some(reason) = record.check() {
                rejects.push(Reject { line: line_no, reason });
                continue;
            }
            if !known.contains(record.lang().as_str()) {
                rejects.push(Reject {
                    line: line_no,
                    reason: format!("unknown language {:?}", record.lang().as_str()),
                });
                continue;
            }
            if let Some(&prev) = first_line.get(record.id()) {
                return Err(Error::DuplicateId {
                    path: path.to_path_buf(),
                    id: record.id().to_string(),
                    first_line: prev,
                    second_line: line_no,
                });
            }
            first_line.insert(record.id().to_string(), line_no);
            items.push(record);
        }
        let mut out = Self::from_vec(items)?;
        out.rejects = rejects;
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for item in &self.items {
            let line = serde_json::to_string(item).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_reject_report(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.rejects {
            out.push_str(&format!("{}\t{}\n", r.line, r.reason.replace(['\t', '\n'], " ")));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl<'a, T> IntoIterator for &'a Records<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;
    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Tokens of one text after truncation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    /// Set to `max_seq_len` when the text had more tokens than that.
    pub truncated_at: Option<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// NFC-normalize and lowercase.
pub fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

/// Split normalized text into tokens without truncation.
pub fn split_tokens(text: &str, char_level: bool) -> Vec<String> {
    let norm = normalize(text);
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in norm.chars() {
        if ch.is_alphanumeric() {
            if char_level {
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokenize and keep at most `max_seq_len` leading tokens.
pub fn tokenize(text: &str, lang: &Lang, config: &CorpusConfig) -> TokenSeq {
    let char_level = config.char_level_languages.iter().any(|l| l == lang.as_str());
    let mut tokens = split_tokens(text, char_level);
    let max = config.max_seq_len.max(1);
    let truncated_at = if tokens.len() > max {
        tokens.truncate(max);
        Some(max)
    } else {
        None
    };
    TokenSeq { tokens, truncated_at }
}

/// Sparse hashed feature counts over `[0, dim)`, sorted by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub dim: usize,
    pub entries: Vec<(u32, u32)>,
}

impl FeatureVector {
    pub fn empty(dim: usize) -> Self {
        FeatureVector {
            dim,
            entries: Vec::new(),
        }
    }

    /// Build from arbitrary (index, count) pairs; duplicate indices add up and
    /// zero counts are dropped.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut map: HashMap<u32, u32> = HashMap::new();
        for (i, c) in pairs {
            if c > 0 {
                *map.entry(i).or_insert(0) += c;
            }
        }
        let mut entries: Vec<(u32, u32)> = map.into_iter().collect();
        entries.sort_unstable();
        FeatureVector { dim, entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    /// Multiset union.
    pub fn merged(&self, other: &FeatureVector) -> FeatureVector {
        FeatureVector::from_pairs(self.dim, self.entries.iter().chain(&other.entries).copied())
    }
}

/// Namespace byte for whole-token features; n-grams use `n` itself.
const TOKEN_NAMESPACE: u8 = 0;

/// Hash every token and every character n-gram of every token into
/// `[0, dim)`. Whole tokens are hashed under namespace 0 and n-grams under
/// namespace `n`, so the token `"ab"` and the bigram `"ab"` are distinct
/// features unless they collide. The hash is [`hash_bytes`] reduced mod `dim`.
pub fn featurize(tokens: &TokenSeq, dim: usize, ngram_orders: &[usize], hash_seed: u64) -> FeatureVector {
    debug_assert!(dim.is_power_of_two());
    let mask = (dim - 1) as u64;
    let mut counts: HashMap<u32, u32> = HashMap::new();
    let mut buf = String::new();
    for tok in &tokens.tokens {
        let h = hash_bytes(hash_seed, TOKEN_NAMESPACE, tok.as_bytes()) & mask;
        *counts.entry(h as u32).or_insert(0) += 1;
        let chars: Vec<char> = tok.chars().collect();
        for &n in ngram_orders {
            if n == 0 || chars.len() < n {
                continue;
            }
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window.iter());
                let h = hash_bytes(hash_seed, n as u8, buf.as_bytes()) & mask;
                *counts.entry(h as u32).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(u32, u32)> = counts.into_iter().collect();
    entries.sort_unstable();
    FeatureVector { dim, entries }
}

/// Tokenizer plus featurizer bound to one corpus config.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub config: CorpusConfig,
}

impl Featurizer {
    pub fn new(config: CorpusConfig) -> Self {
        Featurizer { config }
    }

    pub fn dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn tokenize(&self, text: &str, lang: &Lang) -> TokenSeq {
        tokenize(text, lang, &self.config)
    }

    pub fn featurize_tokens(&self, tokens: &TokenSeq) -> FeatureVector {
        featurize(tokens, self.config.feature_dim, &self.config.ngram_orders, self.config.hash_seed)
    }

    pub fn featurize_text(&self, text: &str, lang: &Lang) -> FeatureVector {
        self.featurize_tokens(&self.tokenize(text, lang))
    }

    pub fn document(&self, doc: &Document) -> FeatureVector {
        self.featurize_text(&doc.full_text(), &doc.lang)
    }

    pub fn query(&self, query: &Query) -> FeatureVector {
        self.featurize_text(&query.text, &query.lang)
    }
}
