//! Exact maximum-inner-product search over a flat embedding matrix.
//!
//! Rankings are total: higher score first, equal scores by ascending doc id.
//! Every ranked list in the crate, dense or lexical or teacher, follows the
//! same rule.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::corpus::{DocumentCollection, Featurizer};
use crate::encoder::{dot, Embedding, EncoderParams, Side};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 7] = b"UMRIDX1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Retriever,
    Teacher,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Retriever => "retriever",
            Source::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub source: Source,
    /// More results were requested than the pool held.
    pub short: bool,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// Rank (1-based) of `doc_id`, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|p| p + 1)
    }

    /// Check the list invariants: non-increasing scores, distinct ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(Error::Invalid(format!("{}: non-finite score at rank {}", self.query_id, i + 1)));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::Invalid(format!("{}: duplicate doc {:?}", self.query_id, e.doc_id)));
            }
            if i > 0 && self.entries[i - 1].score < e.score {
                return Err(Error::Invalid(format!("{}: scores increase at rank {}", self.query_id, i + 1)));
            }
        }
        Ok(())
    }
}

/// Ranking order: descending score, then ascending doc id.
#[inline]
pub fn rank_cmp(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    // Adding 0.0 folds -0.0 into +0.0 so signed zeros tie.
    (b_score + 0.0).total_cmp(&(a_score + 0.0)).then_with(|| a_id.cmp(b_id))
}

/// Sort entries into ranking order.
pub fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| rank_cmp(a.score, &a.doc_id, b.score, &b.doc_id));
}

struct HeapItem<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

// "Greater" means ranked worse, so the max-heap keeps the worst kept item on top.
impl Ord for HeapItem<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(self.score, self.id, other.score, other.id)
    }
}
impl PartialOrd for HeapItem<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for HeapItem<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem<'_> {}

/// Top-k of `(id, score)` candidates under [`rank_cmp`] using a bounded heap.
pub fn top_k<'a>(candidates: impl Iterator<Item = (usize, &'a str, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<HeapItem<'a>> = BinaryHeap::with_capacity(k + 1);
    for (row, id, score) in candidates {
        let item = HeapItem { score, id, row };
        if heap.len() < k {
            heap.push(item);
        } else if let Some(worst) = heap.peek() {
            if item < *worst {
                heap.pop();
                heap.push(item);
            }
        }
    }
    heap.into_sorted_vec().into_iter().map(|h| (h.row, h.score)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    doc_ids: Vec<String>,
    dim: usize,
    /// Row-major `N x d`.
    matrix: Vec<f32>,
    fingerprint: u64,
}

impl VectorIndex {
    /// Encode every document with the document encoder, in collection order.
    pub fn build(collection: &DocumentCollection, featurizer: &Featurizer, params: &EncoderParams) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::Invalid("cannot index an empty collection".into()));
        }
        if featurizer.dim() != params.feature_dim() {
            return Err(Error::Shape(format!(
                "corpus feature dimension {} does not match encoder feature dimension {}",
                featurizer.dim(),
                params.feature_dim()
            )));
        }
        let rows: Vec<Embedding> = collection
            .as_slice()
            .par_iter()
            .map(|doc| params.encode(Side::Document, &featurizer.document(doc)))
            .collect::<Result<_>>()?;
        let dim = params.dim();
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            matrix.extend_from_slice(&r.0);
        }
        Ok(VectorIndex {
            doc_ids: collection.iter().map(|d| d.id.clone()).collect(),
            dim,
            matrix,
            fingerprint: params.fingerprint(),
        })
    }

    /// Build from precomputed rows (row-major `N x d`).
    pub fn from_rows(doc_ids: Vec<String>, dim: usize, matrix: Vec<f32>, fingerprint: u64) -> Result<Self> {
        if dim == 0 || matrix.len() != doc_ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids with {} values is not an N x {dim} matrix",
                doc_ids.len(),
                matrix.len()
            )));
        }
        Ok(VectorIndex {
            doc_ids,
            dim,
            matrix,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` best documents for one query embedding. Asking for more than
    /// the index holds returns everything with `short` set.
    pub fn search(&self, query_id: &str, query: &Embedding, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::Shape(format!(
                "query embedding has dimension {} but the index has {}",
                query.dim(),
                self.dim
            )));
        }
        let q = query.as_slice();
        let scored = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (i, id.as_str(), dot(q, self.row(i))));
        let entries = top_k(scored, k)
            .into_iter()
            .map(|(row, score)| RankedEntry {
                doc_id: self.doc_ids[row].clone(),
                score,
            })
            .collect();
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries,
            source: Source::Retriever,
            short: k > self.len(),
        })
    }

    /// [`search`](Self::search) for many queries, run in parallel; output order
    /// follows input order.
    pub fn batch_search(&self, queries: &[(String, Embedding)], k: usize) -> Result<Vec<RankedList>> {
        queries.par_iter().map(|(id, e)| self.search(id, e, k)).collect()
    }

    /// ```text
    /// "UMRIDX1" | N u64 | d u32 | fingerprint u64
    /// | N x (len u32, utf8 doc id) | N*d f32 row-major
    /// ```
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_u64::<LittleEndian>(self.len() as u64).map_err(io)?;
        w.write_u32::<LittleEndian>(self.dim as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(self.fingerprint).map_err(io)?;
        for id in &self.doc_ids {
            w.write_u32::<LittleEndian>(id.len() as u32).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
        }
        for v in &self.matrix {
            w.write_f32::<LittleEndian>(*v).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Load an index and check that it was built by `params`.
    pub fn load(path: &Path, params: &EncoderParams) -> Result<Self> {
        let bad = |reason: String| Error::format("index", path, reason);
        let io = |e: std::io::Error| bad(e.to_string());
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let fingerprint = r.read_u64::<LittleEndian>().map_err(io)?;
        if fingerprint != params.fingerprint() {
            return Err(bad(format!(
                "fingerprint {fingerprint:016x} does not match checkpoint {:016x}",
                params.fingerprint()
            )));
        }
        let mut doc_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io)?;
            doc_ids.push(String::from_utf8(buf).map_err(|e| bad(e.to_string()))?);
        }
        let mut matrix = vec![0.0f32; n * dim];
        r.read_f32_into::<LittleEndian>(&mut matrix).map_err(io)?;
        Self::from_rows(doc_ids, dim, matrix, fingerprint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, d: usize, seed: u64) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("doc{:04}", (i * 7919) % 10007)).collect();
        let m = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        VectorIndex::from_rows(ids, d, m, 0).unwrap()
    }

    fn brute_force(index: &VectorIndex, q: &Embedding, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|i| (index.doc_ids[i].clone(), dot(q.as_slice(), index.row(i))))
            .collect();
        all.sort_by(|a, b| rank_cmp(a.1, &a.0, b.1, &b.0));
        all.truncate(k);
        all
    }

    #[test]
    fn single_document() {
        let idx = VectorIndex::from_rows(vec!["only".into()], 2, vec![1.0, 0.0], 0).unwrap();
        let r = idx.search("q", &Embedding(vec![0.3, 0.3]), 1).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].doc_id, "only");
        assert!(!r.short);
        let r = idx.search("q", &Embedding(vec![0.3, 0.3]), 5).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.short);
    }

    #[test]
    fn zero_query_ranks_by_doc_id() {
        let idx = random_index(30, 4, 1);
        let r = idx.search("q", &Embedding(vec![0.0; 4]), 30).unwrap();
        let ids: Vec<&str> = r.doc_ids().collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert!(r.entries.iter().all(|e| e.score == 0.0));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let idx = random_index(200, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q = Embedding((0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
            let got = idx.search("q", &q, 10).unwrap();
            let want = brute_force(&idx, &q, 10);
            let got: Vec<(String, f64)> = got.entries.into_iter().map(|e| (e.doc_id, e.score)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn prefix_consistency() {
        let idx = random_index(100, 8, 3);
        let q = Embedding(vec![0.5; 8]);
        let a = idx.search("q", &q, 10).unwrap();
        let b = idx.search("q", &q, 11).unwrap();
        assert_eq!(a.entries[..], b.entries[..10]);
    }

    #[test]
    fn batch_matches_sequential_and_permutes() {
        let idx = random_index(150, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<(String, Embedding)> = (0..64)
            .map(|i| (format!("q{i}"), Embedding((0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect())))
            .collect();
        let batch = idx.batch_search(&qs, 7).unwrap();
        let seq: Vec<RankedList> = qs.iter().map(|(id, e)| idx.search(id, e, 7).unwrap()).collect();
        assert_eq!(batch, seq);
        let rev: Vec<(String, Embedding)> = qs.iter().rev().cloned().collect();
        let mut rev_out = idx.batch_search(&rev, 7).unwrap();
        rev_out.reverse();
        assert_eq!(rev_out, batch);
        assert_eq!(idx.batch_search(&qs[..1], 7).unwrap(), vec![seq[0].clone()]);
    }

    #[test]
    fn k_zero_is_rejected() {
        let idx = random_index(3, 2, 0);
        assert!(idx.search("q", &Embedding(vec![0.0; 2]), 0).is_err());
    }

    #[test]
    fn save_load_checks_fingerprint() {
        let params = EncoderParams::init(4, 16, 1).unwrap();
        let other = EncoderParams::init(4, 16, 2).unwrap();
        let mut idx = random_index(10, 4, 2);
        idx.fingerprint = params.fingerprint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        idx.save(&p).unwrap();
        assert_eq!(VectorIndex::load(&p, &params).unwrap(), idx);
        assert!(VectorIndex::load(&p, &other).is_err());
    }
}
