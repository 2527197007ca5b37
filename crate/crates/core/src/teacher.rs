//! Query-likelihood reranking.
//!
//! A document is scored by how likely a language model would produce the
//! query after reading it and an instruction naming the query language:
//!
//! ```text
//! nll(q, d) = (1/|q|) * sum_j -log p(q_j | d, q_<j, I)
//! ```
//!
//! The reranked list stores `-nll` (the mean log-likelihood) as its score, so
//! the usual "higher is better" ordering applies and the same number is used
//! as the distillation logit.
//!
//! [`LikelihoodModel`] is the plug-in point. [`LexicalTeacher`] is the
//! built-in model: a translation language model whose translation table is
//! counted from co-occurrence inside single documents and single queries,
//! interpolated with a per-language unigram model of the query language.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::config::{CorpusConfig, TeacherConfig};
use crate::corpus::{tokenize, DocumentCollection, Lang, Query, QuerySet, TokenSeq};
use crate::error::{Error, Result};
use crate::index::{sort_entries, RankedEntry, RankedList, Source};

pub const TEACHER_MAGIC: &[u8; 7] = b"UMRTCH1";
const TEACHER_VERSION: u32 = 1;

/// An instruction rendered for one target language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub lang: Lang,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionTemplate {
    template: String,
    renderings: BTreeMap<Lang, String>,
}

impl InstructionTemplate {
    pub fn new(template: &str, languages: &[String]) -> Result<Self> {
        if !template.contains("{L}") {
            return Err(Error::Config("instruction template lacks {L}".into()));
        }
        let mut renderings = BTreeMap::new();
        for code in languages {
            let lang = Lang::new(code.clone());
            let text = template.replace("{L}", lang.display_name());
            if text.trim().is_empty() {
                return Err(Error::Config(format!("empty instruction for {code}")));
            }
            renderings.insert(lang, text);
        }
        Ok(InstructionTemplate {
            template: template.to_string(),
            renderings,
        })
    }

    pub fn render(&self, lang: &Lang) -> Result<Instruction> {
        let text = self
            .renderings
            .get(lang)
            .ok_or_else(|| Error::Invalid(format!("no instruction rendering for language {lang}")))?;
        Ok(Instruction {
            lang: lang.clone(),
            text: text.clone(),
        })
    }

    pub fn template(&self) -> &str {
        &self.template
    }
}

/// Conditional token probabilities of an autoregressive model reading a
/// document and an instruction.
///
/// Implementations must be read-only once built; reranking calls them from
/// several threads. Returned log-probabilities are finite and `<= 0` for a
/// proper distribution.
pub trait LikelihoodModel: Sync {
    fn conditional_token_logprob(&self, prefix: &[String], next: &str, doc: &TokenSeq, instruction: &Instruction) -> f64;

    /// Log-probability of every query token in order. Override when per-document
    /// work can be shared across tokens.
    fn query_logprobs(&self, query: &TokenSeq, doc: &TokenSeq, instruction: &Instruction) -> Vec<f64> {
        (0..query.len())
            .map(|j| self.conditional_token_logprob(&query.tokens[..j], &query.tokens[j], doc, instruction))
            .collect()
    }
}

/// Mean negative log-likelihood of the query tokens.
pub fn query_nll<M: LikelihoodModel + ?Sized>(
    model: &M,
    query: &TokenSeq,
    doc: &TokenSeq,
    instruction: &Instruction,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::EmptyQuery(String::new()));
    }
    let lps = model.query_logprobs(query, doc, instruction);
    let nll = -lps.iter().sum::<f64>() / lps.len() as f64;
    if !nll.is_finite() {
        return Err(Error::Invalid("likelihood model returned a non-finite log-probability".into()));
    }
    Ok(nll)
}

/// Everything reranking needs besides the model.
#[derive(Debug, Clone)]
pub struct RerankContext<'a> {
    pub corpus: &'a CorpusConfig,
    pub template: &'a InstructionTemplate,
    pub docs: &'a DocumentCollection,
}

/// Reorder a retriever list by ascending query NLL (score = -NLL), ties by
/// ascending doc id.
pub fn rerank<M: LikelihoodModel + ?Sized>(
    model: &M,
    query: &Query,
    ranked: &RankedList,
    ctx: &RerankContext<'_>,
) -> Result<RankedList> {
    if ranked.source != Source::Retriever {
        return Err(Error::Invalid(format!(
            "{}: only retriever lists can be reranked",
            ranked.query_id
        )));
    }
    let q_tokens = tokenize(&query.text, &query.lang, ctx.corpus);
    if q_tokens.is_empty() {
        return Err(Error::EmptyQuery(query.id.clone()));
    }
    let instruction = ctx.template.render(&query.lang)?;
    let mut entries = Vec::with_capacity(ranked.len());
    for e in &ranked.entries {
        let doc = ctx
            .docs
            .get(&e.doc_id)
            .ok_or_else(|| Error::MissingDocument(e.doc_id.clone()))?;
        let d_tokens = tokenize(&doc.full_text(), &doc.lang, ctx.corpus);
        let nll = query_nll(model, &q_tokens, &d_tokens, &instruction)?;
        entries.push(RankedEntry {
            doc_id: e.doc_id.clone(),
            score: -nll,
        });
    }
    sort_entries(&mut entries);
    Ok(RankedList {
        query_id: ranked.query_id.clone(),
        entries,
        source: Source::Teacher,
        short: ranked.short,
    })
}

/// Rerank many lists in parallel; output order follows `lists`. Every list's
/// query must be in `queries`.
pub fn rerank_all<M: LikelihoodModel + ?Sized>(
    model: &M,
    queries: &QuerySet,
    lists: &[RankedList],
    ctx: &RerankContext<'_>,
) -> Result<Vec<RankedList>> {
    lists
        .par_iter()
        .map(|list| {
            let q = queries
                .get(&list.query_id)
                .ok_or_else(|| Error::Invalid(format!("query {:?} not in query set", list.query_id)))?;
            rerank(model, q, list, ctx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
struct CountRow {
    total: f64,
    counts: HashMap<u32, f64>,
}

impl CountRow {
    fn add(&mut self, id: u32, c: f64) {
        *self.counts.entry(id).or_insert(0.0) += c;
        self.total += c;
    }

    fn get(&self, id: u32) -> f64 {
        self.counts.get(&id).copied().unwrap_or(0.0)
    }
}

/// Raw inputs of a [`LexicalTeacher`], for building one by hand.
#[derive(Debug, Clone, Default)]
pub struct LexicalTables {
    /// Every token the model knows (document and query side).
    pub vocab: Vec<String>,
    /// Tokens that can be generated as query tokens; must be in `vocab`.
    pub query_vocab: Vec<String>,
    /// `(doc token, query token, co-occurrence count)`.
    pub cooccurrence: Vec<(String, String, f64)>,
    /// `(language, token, count)`.
    pub unigram_counts: Vec<(Lang, String, f64)>,
}

/// Translation language model with unigram backoff:
///
/// ```text
/// p(q | d, L) = alpha * sum_w t(q | w) * c(w, d) / |d| + (1 - alpha) * p_L(q)
/// t(q | w)    = beta * [q == w] + (1 - beta) * (c(w, q) + lt) / (C(w) + lt * |Vq|)
/// p_L(q)      = (n_L(q) + lu) / (N_L + lu * |V|)
/// ```
///
/// `c(w, q)` counts the documents and queries in which `w` and `q` both occur
/// (never a query together with its relevant document: no pairs are used).
/// `beta` applies only when `w` itself is in the query vocabulary `Vq`. Both
/// `|Vq|` and `|V|` include one slot for unseen tokens, so every row sums to
/// one over its vocabulary and no probability is ever zero. A doc token with
/// no counts translates uniformly. Prefix tokens are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalTeacher {
    alpha: f64,
    self_translation: f64,
    translation_lambda: f64,
    unigram_lambda: f64,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    in_query_vocab: Vec<bool>,
    query_vocab_size: usize,
    rows: HashMap<u32, CountRow>,
    unigrams: BTreeMap<Lang, CountRow>,
}

impl LexicalTeacher {
    /// Count tables from the unpaired document collection and query set.
    pub fn fit(docs: &DocumentCollection, queries: &QuerySet, corpus: &CorpusConfig, config: &TeacherConfig) -> Result<Self> {
        if docs.is_empty() || queries.is_empty() {
            return Err(Error::Invalid("teacher needs non-empty documents and queries".into()));
        }
        let mut vocab: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut intern = |tok: &str, vocab: &mut Vec<String>| -> u32 {
            if let Some(&id) = ids.get(tok) {
                return id;
            }
            let id = vocab.len() as u32;
            vocab.push(tok.to_string());
            ids.insert(tok.to_string(), id);
            id
        };

        let mut contexts: Vec<(Lang, Vec<u32>)> = Vec::with_capacity(docs.len() + queries.len());
        for d in docs {
            let toks = tokenize(&d.full_text(), &d.lang, corpus);
            contexts.push((d.lang.clone(), toks.tokens.iter().map(|t| intern(t, &mut vocab)).collect()));
        }
        let first_query = contexts.len();
        for q in queries {
            let toks = tokenize(&q.text, &q.lang, corpus);
            contexts.push((q.lang.clone(), toks.tokens.iter().map(|t| intern(t, &mut vocab)).collect()));
        }
        drop(intern);

        let mut in_query_vocab = vec![false; vocab.len()];
        for (_, toks) in &contexts[first_query..] {
            for &t in toks {
                in_query_vocab[t as usize] = true;
            }
        }

        let mut rows: HashMap<u32, CountRow> = HashMap::new();
        let mut unigrams: BTreeMap<Lang, CountRow> = BTreeMap::new();
        for (lang, toks) in &contexts {
            let uni = unigrams.entry(lang.clone()).or_default();
            for &t in toks {
                uni.add(t, 1.0);
            }
            let mut types = toks.clone();
            types.sort_unstable();
            types.dedup();
            let q_types: Vec<u32> = types.iter().copied().filter(|&t| in_query_vocab[t as usize]).collect();
            if q_types.is_empty() {
                continue;
            }
            for &w in &types {
                let row = rows.entry(w).or_default();
                for &q in &q_types {
                    row.add(q, 1.0);
                }
            }
        }
        let query_vocab_size = in_query_vocab.iter().filter(|&&b| b).count();
        Ok(LexicalTeacher {
            alpha: config.alpha,
            self_translation: config.self_translation,
            translation_lambda: config.translation_lambda,
            unigram_lambda: config.unigram_lambda,
            vocab,
            ids,
            in_query_vocab,
            query_vocab_size,
            rows,
            unigrams,
        })
    }

    pub fn from_tables(tables: &LexicalTables, config: &TeacherConfig) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, t) in tables.vocab.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let lookup = |t: &str| {
            ids.get(t)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("token {t:?} not in vocabulary")))
        };
        let mut in_query_vocab = vec![false; tables.vocab.len()];
        for t in &tables.query_vocab {
            in_query_vocab[lookup(t)? as usize] = true;
        }
        let mut rows: HashMap<u32, CountRow> = HashMap::new();
        for (w, q, c) in &tables.cooccurrence {
            let (w, q) = (lookup(w)?, lookup(q)?);
            if !in_query_vocab[q as usize] {
                return Err(Error::Invalid(format!("{:?} is not a query-vocabulary token", tables.vocab[q as usize])));
            }
            rows.entry(w).or_default().add(q, *c);
        }
        let mut unigrams: BTreeMap<Lang, CountRow> = BTreeMap::new();
        for (lang, t, c) in &tables.unigram_counts {
            unigrams.entry(lang.clone()).or_default().add(lookup(t)?, *c);
        }
        let query_vocab_size = in_query_vocab.iter().filter(|&&b| b).count();
        Ok(LexicalTeacher {
            alpha: config.alpha,
            self_translation: config.self_translation,
            translation_lambda: config.translation_lambda,
            unigram_lambda: config.unigram_lambda,
            vocab: tables.vocab.clone(),
            ids,
            in_query_vocab,
            query_vocab_size,
            rows,
            unigrams,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn query_vocab_size(&self) -> usize {
        self.query_vocab_size
    }

    fn id(&self, tok: &str) -> Option<u32> {
        self.ids.get(tok).copied()
    }

    /// Query-vocabulary id, or `None` for the unseen-token slot.
    fn query_id(&self, tok: &str) -> Option<u32> {
        self.id(tok).filter(|&i| self.in_query_vocab[i as usize])
    }

    /// `t(q | w)`; `None` stands for an unseen token.
    pub fn translation_prob(&self, w: Option<u32>, q: Option<u32>) -> f64 {
        let vq = (self.query_vocab_size + 1) as f64;
        let base = match w.and_then(|w| self.rows.get(&w)) {
            Some(row) if row.total > 0.0 => {
                let c = q.map_or(0.0, |q| row.get(q));
                (c + self.translation_lambda) / (row.total + self.translation_lambda * vq)
            }
            _ => 1.0 / vq,
        };
        match w {
            Some(w) if self.in_query_vocab[w as usize] => {
                let hit = if q == Some(w) { 1.0 } else { 0.0 };
                self.self_translation * hit + (1.0 - self.self_translation) * base
            }
            _ => base,
        }
    }

    /// Translation probability by surface form.
    pub fn translation_prob_str(&self, w: &str, q: &str) -> f64 {
        self.translation_prob(self.id(w), self.query_id(q))
    }

    /// `p_L(q)`; an unseen language falls back to uniform.
    pub fn unigram_prob(&self, lang: &Lang, q: Option<u32>) -> f64 {
        let v = (self.vocab.len() + 1) as f64;
        match self.unigrams.get(lang) {
            Some(row) => {
                let c = q.map_or(0.0, |q| row.get(q));
                (c + self.unigram_lambda) / (row.total + self.unigram_lambda * v)
            }
            None => 1.0 / v,
        }
    }

    pub fn unigram_prob_str(&self, lang: &Lang, q: &str) -> f64 {
        self.unigram_prob(lang, self.id(q))
    }

    /// Sum over the query vocabulary (plus the unseen slot) of `t(. | w)`.
    pub fn translation_row_mass(&self, w: &str) -> f64 {
        let wid = self.id(w);
        let mut s = self.translation_prob(wid, None);
        for (i, &inq) in self.in_query_vocab.iter().enumerate() {
            if inq {
                s += self.translation_prob(wid, Some(i as u32));
            }
        }
        s
    }

    /// Sum over the vocabulary (plus the unseen slot) of `p_L(.)`.
    pub fn unigram_mass(&self, lang: &Lang) -> f64 {
        let mut s = self.unigram_prob(lang, None);
        for i in 0..self.vocab.len() {
            s += self.unigram_prob(lang, Some(i as u32));
        }
        s
    }

    fn doc_distribution(&self, doc: &TokenSeq) -> Vec<(Option<u32>, f64)> {
        if doc.is_empty() {
            return Vec::new();
        }
        let mut counts: BTreeMap<(u32, &str), usize> = BTreeMap::new();
        for t in &doc.tokens {
            // Unknown tokens are grouped under one key but keep their text so
            // the map stays deterministic.
            let key = match self.id(t) {
                Some(id) => (id, ""),
                None => (u32::MAX, t.as_str()),
            };
            *counts.entry(key).or_insert(0) += 1;
        }
        let n = doc.len() as f64;
        counts
            .into_iter()
            .map(|((id, _), c)| ((id != u32::MAX).then_some(id), c as f64 / n))
            .collect()
    }

    fn token_prob(&self, q: &str, dist: &[(Option<u32>, f64)], lang: &Lang) -> f64 {
        let qid = self.query_id(q);
        let trans: f64 = dist.iter().map(|&(w, pw)| pw * self.translation_prob(w, qid)).sum();
        let trans = if dist.is_empty() {
            // An empty passage carries no evidence; translate uniformly.
            1.0 / (self.query_vocab_size + 1) as f64
        } else {
            trans
        };
        self.alpha * trans + (1.0 - self.alpha) * self.unigram_prob(lang, qid)
    }

    /// ```text
    /// "UMRTCH1" | version u32 | alpha f64 | beta f64 | lt f64 | lu f64
    /// | V u32 | V x (len u32, utf8) | V x u8 query-vocab flag
    /// | L u32 | L x (lang len u32, utf8, total f64, n u32, n x (id u32, count f64))
    /// | R u32 | R x (w u32, total f64, n u32, n x (q u32, count f64))
    /// ```
    /// Little-endian; languages, rows and row entries sorted by key.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(TEACHER_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(TEACHER_VERSION).map_err(io)?;
        for v in [self.alpha, self.self_translation, self.translation_lambda, self.unigram_lambda] {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
        w.write_u32::<LittleEndian>(self.vocab.len() as u32).map_err(io)?;
        for t in &self.vocab {
            write_str(&mut w, t).map_err(io)?;
        }
        for &b in &self.in_query_vocab {
            w.write_u8(b as u8).map_err(io)?;
        }
        w.write_u32::<LittleEndian>(self.unigrams.len() as u32).map_err(io)?;
        for (lang, row) in &self.unigrams {
            write_str(&mut w, lang.as_str()).map_err(io)?;
            write_row(&mut w, row).map_err(io)?;
        }
        let mut keys: Vec<u32> = self.rows.keys().copied().collect();
        keys.sort_unstable();
        w.write_u32::<LittleEndian>(keys.len() as u32).map_err(io)?;
        for k in keys {
            w.write_u32::<LittleEndian>(k).map_err(io)?;
            write_row(&mut w, &self.rows[&k]).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("teacher", path, reason);
        let io = |e: std::io::Error| bad(e.to_string());
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TEACHER_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != TEACHER_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut h = [0.0f64; 4];
        for v in h.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io)?;
        }
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut vocab = Vec::with_capacity(n);
        let mut ids = HashMap::with_capacity(n);
        for i in 0..n {
            let t = read_str(&mut r).map_err(io)?;
            ids.insert(t.clone(), i as u32);
            vocab.push(t);
        }
        let mut in_query_vocab = Vec::with_capacity(n);
        for _ in 0..n {
            in_query_vocab.push(r.read_u8().map_err(io)? != 0);
        }
        let nl = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut unigrams = BTreeMap::new();
        for _ in 0..nl {
            let lang = Lang::new(read_str(&mut r).map_err(io)?);
            unigrams.insert(lang, read_row(&mut r, n).map_err(io)?);
        }
        let nr = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut rows = HashMap::with_capacity(nr as usize);
        for _ in 0..nr {
            let k = r.read_u32::<LittleEndian>().map_err(io)?;
            if k as usize >= n {
                return Err(bad(format!("row id {k} out of range")));
            }
            rows.insert(k, read_row(&mut r, n).map_err(io)?);
        }
        let query_vocab_size = in_query_vocab.iter().filter(|&&b| b).count();
        Ok(LexicalTeacher {
            alpha: h[0],
            self_translation: h[1],
            translation_lambda: h[2],
            unigram_lambda: h[3],
            vocab,
            ids,
            in_query_vocab,
            query_vocab_size,
            rows,
            unigrams,
        })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_row(w: &mut impl Write, row: &CountRow) -> std::io::Result<()> {
    w.write_f64::<LittleEndian>(row.total)?;
    let mut entries: Vec<(u32, f64)> = row.counts.iter().map(|(&k, &v)| (k, v)).collect();
    entries.sort_unstable_by_key(|e| e.0);
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (k, v) in entries {
        w.write_u32::<LittleEndian>(k)?;
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_row(r: &mut impl Read, vocab: usize) -> std::io::Result<CountRow> {
    let total = r.read_f64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()?;
    let mut counts = HashMap::with_capacity(n as usize);
    for _ in 0..n {
        let k = r.read_u32::<LittleEndian>()?;
        if k as usize >= vocab {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "token id out of range"));
        }
        counts.insert(k, r.read_f64::<LittleEndian>()?);
    }
    Ok(CountRow { total, counts })
}

impl LikelihoodModel for LexicalTeacher {
    fn conditional_token_logprob(&self, _prefix: &[String], next: &str, doc: &TokenSeq, instruction: &Instruction) -> f64 {
        let dist = self.doc_distribution(doc);
        self.token_prob(next, &dist, &instruction.lang).ln()
    }

    fn query_logprobs(&self, query: &TokenSeq, doc: &TokenSeq, instruction: &Instruction) -> Vec<f64> {
        let dist = self.doc_distribution(doc);
        query
            .tokens
            .iter()
            .map(|q| self.token_prob(q, &dist, &instruction.lang).ln())
            .collect()
    }
}
