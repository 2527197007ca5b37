//! Run configuration.
//!
//! A config file is TOML: a top-level `seed` plus one table per module.
//! Unknown keys are rejected and every value is validated against the
//! preconditions of the module that reads it. Individual keys can be
//! overridden with dotted paths (`distill.temperature = 1.0`), which is how
//! the CLI applies flags on top of a file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing;

/// Instruction prefix handed to the likelihood model; `{L}` is replaced by the
/// target language name.
pub const DEFAULT_INSTRUCTION: &str = "Based on the passage, please write a question in {L}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Single source of randomness; every stage derives its own stream from it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalConfig,
    pub lexical: LexicalConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 13,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            retrieval: RetrievalConfig::default(),
            lexical: LexicalConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            pipeline: PipelineConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Recognized ISO 639-1 codes; records in other languages are rejected.
    pub languages: Vec<String>,
    /// Languages written without spaces; tokenized per character.
    pub char_level_languages: Vec<String>,
    pub max_seq_len: usize,
    /// Hashed feature space size `F`; must be a power of two.
    pub feature_dim: usize,
    /// Character n-gram orders emitted in addition to whole tokens.
    pub ngram_orders: Vec<usize>,
    pub hash_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            languages: [
                "ar", "bn", "en", "fi", "ja", "ko", "ru", "te", "el", "hy", "ka", "he", "hi", "zh",
                "th", "de", "fr", "es",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            char_level_languages: ["ja", "zh", "th"].iter().map(|s| s.to_string()).collect(),
            max_seq_len: 256,
            feature_dim: 1 << 18,
            ngram_orders: vec![2, 3, 4],
            hash_seed: 0x5eed_f00d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Candidates retrieved per query and handed to the teacher.
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexicalConfig {
    pub k1: f64,
    pub b: f64,
    /// Restrict BM25 to documents in the query's language (baseline mode).
    /// The bootstrap retrieval always runs unrestricted.
    pub target_language_only: bool,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        LexicalConfig {
            k1: 0.9,
            b: 0.4,
            target_language_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub instruction: String,
    /// Weight of the translation component; `1 - alpha` goes to the
    /// query-language unigram backoff.
    pub alpha: f64,
    /// Probability a document token "translates" to itself when it is also a
    /// query-vocabulary token. The rest of the mass follows co-occurrence.
    pub self_translation: f64,
    /// Add-lambda smoothing of the co-occurrence translation rows.
    pub translation_lambda: f64,
    /// Add-lambda smoothing of the per-language unigram models.
    pub unigram_lambda: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            alpha: 0.9,
            self_translation: 0.9,
            translation_lambda: 0.01,
            unigram_lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Queries per batch `b`.
    pub batch_size: usize,
    /// Teacher-scored documents per query `n`.
    pub docs_per_query: usize,
    /// Teacher temperature `tau`.
    pub temperature: f64,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    /// Teacher logit assigned to in-batch negatives.
    pub neg_logit: f64,
    /// When false, each query's softmax only ranges over its own documents.
    pub in_batch_negatives: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            batch_size: 16,
            docs_per_query: 16,
            temperature: 0.1,
            epochs: 10,
            grad_accum_steps: 1,
            neg_logit: -1e4,
            in_batch_negatives: true,
            // 2e-5 is the usual value for transformer encoders; a randomly
            // initialized linear encoder needs a larger step.
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    /// BM25 over the whole collection.
    Lexical,
    /// The randomly initialized encoder.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub bootstrap: BootstrapMode,
    /// Re-initialize the encoder at the start of every iteration instead of
    /// continuing from the previous checkpoint.
    pub reinit: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iterations: 2,
            bootstrap: BootstrapMode::Lexical,
            reinit: false,
        }
    }
}

/// Shape of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of languages, each with its own script (at most 8).
    pub num_languages: usize,
    pub topics: usize,
    pub docs_per_topic: usize,
    pub queries_per_topic: usize,
    /// Latent content words shared by all languages.
    pub vocab_size: usize,
    /// Content words available to each topic, drawn from the latent vocabulary.
    pub topic_words: usize,
    /// Topic-independent filler words.
    pub background_words: usize,
    /// Body length of a document in tokens (marker excluded), drawn
    /// uniformly from `doc_len_min..=doc_len_max`.
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// Distinct salient words per document.
    pub salient_words: usize,
    /// Fraction of body tokens that are one of the document's salient words.
    pub salient_rate: f64,
    /// Salient words per query.
    pub query_words: usize,
    /// Probability that a query is written in a language absent from its gold document.
    pub cross_lingual_leak: f64,
    /// Probability that a document also carries its text in a second language.
    pub code_mix: f64,
    /// Fraction of body tokens that are filler words.
    pub background_rate: f64,
    /// Probability that a token is replaced by a random content word.
    pub noise: f64,
    /// Surface forms per latent word. Forms share a three-letter stem and
    /// differ in a one-letter ending; 1 disables endings.
    pub inflections: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_languages: 4,
            topics: 50,
            docs_per_topic: 20,
            queries_per_topic: 4,
            vocab_size: 400,
            topic_words: 30,
            background_words: 100,
            doc_len_min: 20,
            doc_len_max: 20,
            salient_words: 3,
            salient_rate: 0.3,
            query_words: 3,
            cross_lingual_leak: 0.5,
            code_mix: 1.0,
            background_rate: 0.2,
            noise: 0.05,
            inflections: 4,
        }
    }
}

fn set_value(root: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: not a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) || table[*part].is_table() {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
    }
    Ok(())
}

impl Config {
    /// Smaller hashed feature space used by the synthetic benchmark and the
    /// acceptance suite, so checkpoints stay small. Everything else keeps its
    /// default.
    pub fn benchmark() -> Self {
        let mut cfg = Config::default();
        cfg.corpus.feature_dim = 1 << 15;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn snapshot_hash(&self) -> String {
        hashing::sha256_hex(self.to_toml_string().as_bytes())
    }

    /// Override one key given as `section.key` (or `seed`). The value is parsed
    /// as a TOML value, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(&[(key.to_string(), value.to_string())])
    }

    /// Apply several overrides and validate once at the end, so keys that
    /// constrain each other can be changed together.
    pub fn apply(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_value(&mut root, key, value)?;
        }
        let updated: Config = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Every dotted key a config file may set.
    pub fn keys() -> Vec<String> {
        fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
            match v.as_table() {
                Some(t) => {
                    for (k, child) in t {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                None => out.push(prefix.to_string()),
            }
        }
        let root = toml::Value::try_from(Config::default()).expect("config always serializes");
        let mut out = Vec::new();
        walk("", &root, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let c = &self.corpus;
        if c.languages.is_empty() {
            return fail("corpus.languages must not be empty".into());
        }
        for l in c.languages.iter().chain(&c.char_level_languages) {
            if l.chars().count() != 2 || !l.chars().all(|ch| ch.is_ascii_lowercase()) {
                return fail(format!("{l:?} is not a two-letter ISO 639-1 code"));
            }
        }
        if c.max_seq_len < 1 {
            return fail("corpus.max_seq_len must be >= 1".into());
        }
        if !c.feature_dim.is_power_of_two() || c.feature_dim > (1 << 31) {
            return fail(format!("corpus.feature_dim {} is not a power of two <= 2^31", c.feature_dim));
        }
        if c.ngram_orders.iter().any(|&n| n == 0) {
            return fail("corpus.ngram_orders must be >= 1".into());
        }
        if self.encoder.dim < 1 {
            return fail("encoder.dim must be >= 1".into());
        }
        if self.retrieval.k < 1 {
            return fail("retrieval.k must be >= 1".into());
        }
        let l = &self.lexical;
        if !(l.k1 >= 0.0 && l.k1.is_finite()) || !(0.0..=1.0).contains(&l.b) {
            return fail("lexical.k1 must be >= 0 and lexical.b in [0, 1]".into());
        }
        let t = &self.teacher;
        if !t.instruction.contains("{L}") {
            return fail("teacher.instruction must contain the {L} placeholder".into());
        }
        if !(t.alpha > 0.0 && t.alpha <= 1.0) {
            return fail("teacher.alpha must be in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&t.self_translation) {
            return fail("teacher.self_translation must be in [0, 1)".into());
        }
        if !(t.translation_lambda > 0.0) || !(t.unigram_lambda > 0.0) {
            return fail("teacher smoothing lambdas must be > 0".into());
        }
        let d = &self.distill;
        if d.batch_size < 1 || d.docs_per_query < 1 || d.epochs < 1 || d.grad_accum_steps < 1 {
            return fail("distill batch_size, docs_per_query, epochs, grad_accum_steps must be >= 1".into());
        }
        if !(d.temperature > 0.0 && d.temperature.is_finite()) {
            return fail("distill.temperature must be > 0".into());
        }
        if !d.neg_logit.is_finite() {
            return fail("distill.neg_logit must be finite".into());
        }
        if !(d.lr > 0.0) || !(0.0..1.0).contains(&d.beta1) || !(0.0..1.0).contains(&d.beta2) {
            return fail("distill.lr must be > 0 and betas in [0, 1)".into());
        }
        if !(d.eps > 0.0) || !(d.weight_decay >= 0.0) {
            return fail("distill.eps must be > 0 and weight_decay >= 0".into());
        }
        let s = &self.synth;
        if s.num_languages < 1 || s.num_languages > 8 {
            return fail("synth.num_languages must be in 1..=8".into());
        }
        for (name, v) in [
            ("topics", s.topics),
            ("docs_per_topic", s.docs_per_topic),
            ("queries_per_topic", s.queries_per_topic),
            ("vocab_size", s.vocab_size),
            ("topic_words", s.topic_words),
            ("background_words", s.background_words),
            ("doc_len_min", s.doc_len_min),
            ("salient_words", s.salient_words),
            ("query_words", s.query_words),
        ] {
            if v < 1 {
                return fail(format!("synth.{name} must be >= 1"));
            }
        }
        if s.topic_words > s.vocab_size || s.salient_words > s.topic_words || s.query_words > s.salient_words {
            return fail("synth needs query_words <= salient_words <= topic_words <= vocab_size".into());
        }
        if !(1..=16).contains(&s.inflections) {
            return fail("synth.inflections must be in 1..=16".into());
        }
        if s.doc_len_max < s.doc_len_min {
            return fail("synth.doc_len_max must be >= doc_len_min".into());
        }
        if s.queries_per_topic > s.docs_per_topic {
            return fail("synth.queries_per_topic must be <= docs_per_topic".into());
        }
        if s.vocab_size + s.background_words > 4096 {
            return fail("synth.vocab_size + background_words must be <= 4096".into());
        }
        for (name, p) in [
            ("cross_lingual_leak", s.cross_lingual_leak),
            ("code_mix", s.code_mix),
            ("background_rate", s.background_rate),
            ("salient_rate", s.salient_rate),
            ("noise", s.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("synth.{name} must be in [0, 1]"));
            }
        }
        if s.background_rate + s.noise + s.salient_rate > 1.0 {
            return fail("synth.background_rate + noise + salient_rate must be <= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_table() {
        let c = Config::default();
        assert_eq!(c.distill.batch_size, 16);
        assert_eq!(c.distill.docs_per_query, 16);
        assert_eq!(c.distill.temperature, 0.1);
        assert_eq!(c.distill.epochs, 10);
        assert_eq!(c.distill.grad_accum_steps, 1);
        assert_eq!(c.corpus.max_seq_len, 256);
        assert_eq!(c.retrieval.k, 100);
        assert_eq!(c.pipeline.iterations, 2);
        assert_eq!(c.corpus.feature_dim, 1 << 18);
        assert_eq!(c.encoder.dim, 256);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::benchmark();
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.snapshot_hash(), back.snapshot_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Config::from_toml_str("[distill]\nbatchsize = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let mut c = Config::default();
        assert!(c.set("distill.nope", "1").is_err());
        assert!(c.set("nosection.x", "1").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml_str("seed = 5\n[distill]\ntemperature = 1.0\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.distill.temperature, 1.0);
        assert_eq!(c.distill.batch_size, 16);
    }

    #[test]
    fn set_overrides_and_validates() {
        let mut c = Config::default();
        c.set("distill.temperature", "0.5").unwrap();
        assert_eq!(c.distill.temperature, 0.5);
        c.set("pipeline.bootstrap", "random").unwrap();
        assert_eq!(c.pipeline.bootstrap, BootstrapMode::Random);
        c.set("seed", "99").unwrap();
        assert_eq!(c.seed, 99);
        assert!(c.set("distill.temperature", "0").is_err());
        assert!(c.set("corpus.feature_dim", "1000").is_err());
        // A failed override leaves the config untouched.
        assert_eq!(c.distill.temperature, 0.5);
    }

    #[test]
    fn overrides_are_validated_together() {
        let mut c = Config::default();
        let pair = |k: &str, v: &str| (k.to_string(), v.to_string());
        // Raising query_words alone would exceed salient_words.
        assert!(c.set("synth.query_words", "4").is_err());
        c.apply(&[pair("synth.query_words", "4"), pair("synth.salient_words", "4")]).unwrap();
        assert_eq!((c.synth.query_words, c.synth.salient_words), (4, 4));
        assert!(c.set("distill", "1").is_err());
    }

    #[test]
    fn keys_cover_every_section() {
        let keys = Config::keys();
        assert!(keys.contains(&"seed".to_string()));
        assert!(keys.contains(&"distill.temperature".to_string()));
        assert!(keys.contains(&"pipeline.bootstrap".to_string()));
        let mut c = Config::default();
        for k in &keys {
            let v = toml::Value::try_from(&c).unwrap();
            let current = k.split('.').fold(&v, |node, part| &node[part]).to_string();
            c.set(k, &current).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, Config::default());
    }
}
