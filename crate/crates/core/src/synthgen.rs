//! Seeded synthetic multilingual benchmark.
//!
//! All languages share one latent vocabulary. A latent word is rendered in a
//! language by spelling its id in base 16 with sixteen letters of that
//! language's script; the scripts are pairwise disjoint, so two languages
//! never share a surface token. Words inflect: every occurrence picks one of
//! a few one-letter endings, so exact token matching misses many occurrences
//! that share a stem.
//!
//! Every topic owns a pool of latent words (pools of different topics
//! overlap). A document draws its body from the pool plus filler words and
//! keeps returning to a handful of salient pool words; a query asks for some
//! of the salient words of one gold document.
//!
//! A fraction of documents (by default all of them) is code-mixed: the same
//! latent token sequence is written out in a second language after the
//! first. Those documents are the only place where renderings of the same
//! latent word co-occur, which is the alignment signal an unsupervised method
//! can pick up across scripts.
//!
//! Each document carries a unique marker made of digits. The marker of the
//! gold document is the query's answer, so answer matching works across
//! languages.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::corpus::{Document, DocumentCollection, Lang, Query, QuerySet};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;

const SCRIPTS: [(&str, &str); 8] = [
    ("en", "bcdfghjklmnprstv"),
    ("ru", "абвгдежзиклмнопр"),
    ("el", "αβγδεζηθικλμνξοπ"),
    ("hy", "աբգդեզէըթժիլխծկհ"),
    ("ka", "აბგდევზთიკლმნოპჟ"),
    ("he", "אבגדהוזחטיכלמנסע"),
    ("ar", "ابتثجحخدذرزسشصضط"),
    ("hi", "कखगघचछजझटठडढणतथद"),
];

/// Languages used for `n` synthetic languages, in order.
pub fn languages(n: usize) -> Vec<Lang> {
    SCRIPTS.iter().take(n).map(|(code, _)| Lang::new(*code)).collect()
}

/// Surface form of latent word `id` in language number `lang`.
///
/// Ids are first scattered over the 4096 spellings by an affine bijection so
/// that consecutive ids do not share their leading letters.
pub fn render_word(id: u32, lang: usize) -> String {
    let letters: Vec<char> = SCRIPTS[lang].1.chars().collect();
    let s = id.wrapping_mul(0x9e5).wrapping_add(0x3a7) & 0xfff;
    [(s >> 8) & 15, (s >> 4) & 15, s & 15]
        .iter()
        .map(|&d| letters[d as usize])
        .collect()
}

/// Form `form` of latent word `id`: the stem from [`render_word`] plus an
/// ending letter, or the bare stem when `form` is 0.
pub fn render_form(id: u32, form: u8, lang: usize) -> String {
    let mut w = render_word(id, lang);
    if form > 0 {
        w.push(SCRIPTS[lang].1.chars().nth(form as usize - 1).expect("form < 16"));
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    /// Latent word and its surface form.
    Word(u32, u8),
    Marker,
}

/// Generator-side facts about one query, kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInfo {
    pub query_id: String,
    pub gold_doc_id: String,
    /// The query language does not occur in the gold document.
    pub cross_lingual: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub docs: DocumentCollection,
    pub queries: QuerySet,
    /// `(query_id, doc_id)` sorted by query id.
    pub gold: Vec<(String, String)>,
    pub info: Vec<QueryInfo>,
}

struct DocDraft {
    lang: usize,
    second: Option<usize>,
    salient: Vec<u32>,
}

fn render(seq: &[Tok], lang: usize, marker: &str) -> String {
    seq.iter()
        .map(|t| match t {
            Tok::Word(w, f) => render_form(*w, *f, lang),
            Tok::Marker => marker.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(4)
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    let mut check = crate::config::Config::default();
    check.synth = cfg.clone();
    check.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth", &[]));
    let form = |rng: &mut ChaCha8Rng| -> u8 {
        if cfg.inflections == 1 {
            0
        } else {
            rng.gen_range(1..=cfg.inflections as u8)
        }
    };
    let n_lang = cfg.num_languages;
    let n_docs = cfg.topics * cfg.docs_per_topic;
    let n_queries = cfg.topics * cfg.queries_per_topic;

    let mut doc_perm: Vec<usize> = (0..n_docs).collect();
    doc_perm.shuffle(&mut rng);
    let mut marker_perm: Vec<usize> = (0..n_docs).collect();
    marker_perm.shuffle(&mut rng);
    let mut query_perm: Vec<usize> = (0..n_queries).collect();
    query_perm.shuffle(&mut rng);
    let dw = id_width(n_docs);
    let qw = id_width(n_queries);
    let mw = n_docs.to_string().len().max(6);

    let mut docs = Vec::with_capacity(n_docs);
    let mut drafts = Vec::with_capacity(n_docs);
    for t in 0..cfg.topics {
        let pool: Vec<u32> = index::sample(&mut rng, cfg.vocab_size, cfg.topic_words)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        for j in 0..cfg.docs_per_topic {
            let k = t * cfg.docs_per_topic + j;
            let lang = (t + j) % n_lang;
            let salient: Vec<u32> = index::sample(&mut rng, pool.len(), cfg.salient_words)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let len = rng.gen_range(cfg.doc_len_min..=cfg.doc_len_max);
            let mut seq: Vec<Tok> = (0..len)
                .map(|_| {
                    let r: f64 = rng.gen();
                    if r < cfg.noise {
                        Tok::Word(rng.gen_range(0..cfg.vocab_size as u32), form(&mut rng))
                    } else if r < cfg.noise + cfg.background_rate {
                        Tok::Word((cfg.vocab_size + rng.gen_range(0..cfg.background_words)) as u32, form(&mut rng))
                    } else if r < cfg.noise + cfg.background_rate + cfg.salient_rate {
                        Tok::Word(salient[rng.gen_range(0..salient.len())], form(&mut rng))
                    } else {
                        Tok::Word(pool[rng.gen_range(0..pool.len())], form(&mut rng))
                    }
                })
                .collect();
            let at = rng.gen_range(0..=seq.len());
            seq.insert(at, Tok::Marker);
            let second = (n_lang > 1 && rng.gen_bool(cfg.code_mix)).then(|| {
                let o = rng.gen_range(0..n_lang - 1);
                if o >= lang {
                    o + 1
                } else {
                    o
                }
            });

            let marker = format!("{:0mw$}", marker_perm[k]);
            let mut text = render(&seq, lang, &marker);
            if let Some(s) = second {
                text.push(' ');
                text.push_str(&render(&seq, s, &marker));
            }
            let title = salient
                .iter()
                .take(2)
                .map(|&w| render_word(w, lang))
                .collect::<Vec<_>>()
                .join(" ");
            docs.push(Document {
                id: format!("d{:0dw$}", doc_perm[k]),
                lang: Lang::new(SCRIPTS[lang].0),
                title,
                text,
            });
            drafts.push(DocDraft { lang, second, salient });
        }
    }

    let mut queries = Vec::with_capacity(n_queries);
    let mut info = Vec::with_capacity(n_queries);
    for t in 0..cfg.topics {
        let golds = index::sample(&mut rng, cfg.docs_per_topic, cfg.queries_per_topic);
        for (i, g) in golds.into_iter().enumerate() {
            let k = t * cfg.docs_per_topic + g;
            let draft = &drafts[k];
            let present: BTreeSet<usize> = std::iter::once(draft.lang).chain(draft.second).collect();
            let others: Vec<usize> = (0..n_lang).filter(|l| !present.contains(l)).collect();
            let leak = n_lang > 1 && rng.gen_bool(cfg.cross_lingual_leak);
            let qlang = if leak && !others.is_empty() {
                others[rng.gen_range(0..others.len())]
            } else {
                draft.lang
            };
            let words: Vec<String> = index::sample(&mut rng, draft.salient.len(), cfg.query_words)
                .into_iter()
                .map(|s| {
                    let w = if rng.gen_bool(cfg.noise) {
                        rng.gen_range(0..cfg.vocab_size as u32)
                    } else {
                        draft.salient[s]
                    };
                    render_form(w, form(&mut rng), qlang)
                })
                .collect();
            let qid = format!("q{:0qw$}", query_perm[t * cfg.queries_per_topic + i]);
            let doc = &docs[k];
            queries.push(Query {
                id: qid.clone(),
                lang: Lang::new(SCRIPTS[qlang].0),
                text: format!("{}?", words.join(" ")),
                answers: vec![format!("{:0mw$}", marker_perm[k])],
                gold_doc_ids: vec![doc.id.clone()],
            });
            info.push(QueryInfo {
                query_id: qid,
                gold_doc_id: doc.id.clone(),
                cross_lingual: !present.contains(&qlang),
            });
        }
    }

    docs.sort_by(|a, b| a.id.cmp(&b.id));
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    info.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let gold = info.iter().map(|i| (i.query_id.clone(), i.gold_doc_id.clone())).collect();
    Ok(SynthCorpus {
        docs: DocumentCollection::from_vec(docs)?,
        queries: QuerySet::from_vec(queries)?,
        gold,
        info,
    })
}

/// Write `docs.jsonl`, `queries.jsonl` and `gold.tsv` into `dir`.
pub fn emit(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    corpus.docs.write_jsonl(&dir.join("docs.jsonl"))?;
    corpus.queries.write_jsonl(&dir.join("queries.jsonl"))?;
    write_gold(&corpus.gold, &dir.join("gold.tsv"))
}

pub fn write_gold(gold: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for (q, d) in gold {
        writeln!(out, "{q}\t{d}").expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CorpusConfig;
    use crate::corpus::tokenize;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            topics: 6,
            docs_per_topic: 8,
            queries_per_topic: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn scripts_are_disjoint_and_stable() {
        let mut seen = HashSet::new();
        for (_, letters) in SCRIPTS {
            assert_eq!(letters.chars().count(), 16);
            for c in letters.chars() {
                assert!(seen.insert(c), "{c} reused");
                assert!(c.is_alphanumeric());
                let w = c.to_string();
                assert_eq!(crate::corpus::normalize(&w), w);
            }
        }
        // 0 * 0x9e5 + 0x3a7 = 0x3a7 -> letters 3, 10, 7
        assert_eq!(render_word(0, 0), "fnk");
        let all: BTreeSet<String> = (0..4096).map(|i| render_word(i, 1)).collect();
        assert_eq!(all.len(), 4096);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        emit(&generate(&small(), 4).unwrap(), &a).unwrap();
        emit(&generate(&small(), 4).unwrap(), &b).unwrap();
        for f in ["docs.jsonl", "queries.jsonl", "gold.tsv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        let c = generate(&small(), 5).unwrap();
        assert_ne!(c.docs.as_slice(), generate(&small(), 4).unwrap().docs.as_slice());
    }

    #[test]
    fn full_leak_means_no_shared_tokens() {
        let cfg = SynthConfig {
            cross_lingual_leak: 1.0,
            ..small()
        };
        let corpus = generate(&cfg, 1).unwrap();
        let cc = CorpusConfig::default();
        for q in &corpus.queries {
            let gold = corpus.docs.get(&q.gold_doc_ids[0]).unwrap();
            let dt: HashSet<String> = tokenize(&gold.full_text(), &gold.lang, &cc).tokens.into_iter().collect();
            let qt = tokenize(&q.text, &q.lang, &cc).tokens;
            assert!(qt.iter().all(|t| !dt.contains(t)), "{}", q.id);
            assert_ne!(q.lang, gold.lang);
            // The answer is still found in the gold document.
            assert!(gold.text.contains(&q.answers[0]));
        }
    }

    #[test]
    fn emit_ingest_emit_round_trip() {
        let corpus = generate(&small(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit(&corpus, dir.path()).unwrap();
        let cc = CorpusConfig::default();
        let docs = DocumentCollection::ingest(&dir.path().join("docs.jsonl"), &cc).unwrap();
        let queries = QuerySet::ingest(&dir.path().join("queries.jsonl"), &cc).unwrap();
        assert!(docs.rejects.is_empty() && queries.rejects.is_empty());
        let again = SynthCorpus {
            docs,
            queries,
            gold: corpus.gold.clone(),
            info: corpus.info.clone(),
        };
        let dir2 = tempfile::tempdir().unwrap();
        emit(&again, dir2.path()).unwrap();
        for f in ["docs.jsonl", "queries.jsonl", "gold.tsv"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
        let lines = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
        assert_eq!(lines("docs.jsonl"), 48);
        assert_eq!(lines("queries.jsonl"), 18);
        assert_eq!(lines("gold.tsv"), 18);
    }

    #[test]
    fn gold_map_matches_queries() {
        let corpus = generate(&small(), 3).unwrap();
        assert_eq!(corpus.gold.len(), corpus.queries.len());
        for (q, d) in &corpus.gold {
            assert_eq!(corpus.queries.get(q).unwrap().gold_doc_ids, vec![d.clone()]);
            assert!(corpus.docs.get(d).is_some());
        }
    }
}
