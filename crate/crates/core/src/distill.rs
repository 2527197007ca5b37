//! Distilling teacher rankings into the dual encoder.
//!
//! For query `q` in a batch, the student distribution ranges over every
//! document in the batch:
//!
//! ```text
//! P(d | q)  = exp(r(q, d))     / sum_{d' in D_B} exp(r(q, d'))
//! P^(d | q) = exp(h(q, d) / t) / sum_{d' in D_B} exp(h(q, d') / t)
//! L         = 1/|B| * sum_q KL(P^(. | q) || P(. | q))
//! ```
//!
//! `h` is the teacher score (mean log-likelihood) for the query's own `n`
//! documents and `neg_logit` for the `n * (b - 1)` documents that belong to the
//! other queries of the batch. The teacher is a constant, so
//! `dL/dr(q, d) = (P - P^) / |B|`, which the bilinear score turns into
//! gradients for both projections.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::DistillConfig;
use crate::corpus::{DocumentCollection, FeatureVector, Featurizer, QuerySet};
use crate::encoder::{apply_gradients, AdamW, EncoderParams, Gradients, OptimizerState, Side};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::index::{RankedList, Source};

/// `b` queries, each with `n` teacher-scored documents. Document `j` belongs
/// to query `j / n`; for every other query it is an in-batch negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub n: usize,
    pub query_ids: Vec<String>,
    pub queries: Vec<FeatureVector>,
    pub doc_ids: Vec<String>,
    pub docs: Vec<FeatureVector>,
    /// `b x n` teacher scores of each query's own documents.
    pub teacher_logits: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn b(&self) -> usize {
        self.queries.len()
    }

    pub fn owner(&self, doc: usize) -> usize {
        doc / self.n
    }

    pub fn is_negative(&self, query: usize, doc: usize) -> bool {
        self.owner(doc) != query
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.b();
        if b == 0 || self.n == 0 {
            return Err(Error::Invalid("empty training batch".into()));
        }
        if self.query_ids.len() != b
            || self.docs.len() != b * self.n
            || self.doc_ids.len() != b * self.n
            || self.teacher_logits.len() != b
            || self.teacher_logits.iter().any(|r| r.len() != self.n)
        {
            return Err(Error::Shape(format!("batch is not {b} x {} documents", self.n)));
        }
        for (i, row) in self.teacher_logits.iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "teacher logits",
                    query_id: self.query_ids[i].clone(),
                });
            }
        }
        Ok(())
    }

    /// Teacher logits over the whole batch (`b x b*n`), negatives set to
    /// `neg_logit`.
    pub fn masked_logits(&self, neg_logit: f64) -> Vec<Vec<f64>> {
        (0..self.b())
            .map(|i| {
                (0..self.docs.len())
                    .map(|j| {
                        if self.is_negative(i, j) {
                            neg_logit
                        } else {
                            self.teacher_logits[i][j % self.n]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn student_dist(scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    scores.iter().map(|r| softmax(r)).collect()
}

pub fn teacher_dist(logits: &[Vec<f64>], temperature: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|r| softmax(&r.iter().map(|x| x / temperature).collect::<Vec<_>>()))
        .collect()
}

/// Mean over rows of `sum_i t_i (ln t_i - ln s_i)`, with `0 ln 0 = 0`.
pub fn kl_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> f64 {
    let total: f64 = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| {
            t.iter()
                .zip(s)
                .filter(|(&ti, _)| ti > 0.0)
                .map(|(&ti, &si)| ti * (ti.ln() - si.ln()))
                .sum::<f64>()
        })
        .sum();
    total / teacher.len() as f64
}

/// Columns of the batch that query `i` normalizes over.
fn domain(batch: &TrainBatch, i: usize, in_batch_negatives: bool) -> std::ops::Range<usize> {
    if in_batch_negatives {
        0..batch.docs.len()
    } else {
        i * batch.n..(i + 1) * batch.n
    }
}

/// Loss and its exact gradient with respect to both projections, plus the
/// score-level gradient `(P - P^) / b` for each query row (over that row's
/// softmax domain).
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub score_grads: Vec<Vec<f64>>,
}

pub fn loss_and_grads(params: &EncoderParams, batch: &TrainBatch, config: &DistillConfig) -> Result<LossOutput> {
    batch.validate()?;
    let b = batch.b();
    let d = params.dim();
    let q_emb = batch
        .queries
        .iter()
        .map(|f| params.encode_f64(Side::Query, f))
        .collect::<Result<Vec<_>>>()?;
    let d_emb = batch
        .docs
        .iter()
        .map(|f| params.encode_f64(Side::Document, f))
        .collect::<Result<Vec<_>>>()?;
    let masked = batch.masked_logits(config.neg_logit);

    let mut loss = 0.0;
    let mut dq = vec![vec![0.0f64; d]; b];
    let mut dd = vec![vec![0.0f64; d]; batch.docs.len()];
    let mut score_grads = Vec::with_capacity(b);
    for i in 0..b {
        let cols = domain(batch, i, config.in_batch_negatives);
        let scores: Vec<f64> = cols
            .clone()
            .map(|j| q_emb[i].iter().zip(&d_emb[j]).map(|(x, y)| x * y).sum())
            .collect();
        let logits: Vec<f64> = cols.clone().map(|j| masked[i][j] / config.temperature).collect();
        let log_p = log_softmax(&scores);
        let log_t = log_softmax(&logits);
        let mut row_loss = 0.0;
        let mut g_row = Vec::with_capacity(scores.len());
        for (lp, lt) in log_p.iter().zip(&log_t) {
            let t = lt.exp();
            if t > 0.0 {
                row_loss += t * (lt - lp);
            }
            g_row.push((lp.exp() - t) / b as f64);
        }
        if !row_loss.is_finite() || g_row.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                stage: "distillation loss",
                query_id: batch.query_ids[i].clone(),
            });
        }
        loss += row_loss;
        for (g, j) in g_row.iter().zip(cols) {
            for k in 0..d {
                dq[i][k] += g * d_emb[j][k];
                dd[j][k] += g * q_emb[i][k];
            }
        }
        score_grads.push(g_row);
    }

    let mut grads = Gradients::new(d);
    for (fv, g) in batch.queries.iter().zip(&dq) {
        for &(f, c) in &fv.entries {
            grads.add_column(Side::Query, f, c as f64, g);
        }
    }
    for (fv, g) in batch.docs.iter().zip(&dd) {
        for &(f, c) in &fv.entries {
            grads.add_column(Side::Document, f, c as f64, g);
        }
    }
    Ok(LossOutput {
        loss: loss / b as f64,
        grads,
        score_grads,
    })
}

/// Batches for one training run plus the queries that could not be used.
#[derive(Debug, Clone, Default)]
pub struct BatchPlan {
    pub batches: Vec<TrainBatch>,
    /// Queries without a teacher list.
    pub skipped: Vec<String>,
    /// Queries left over in the final partial batch.
    pub dropped: Vec<String>,
    /// Queries whose teacher list was shorter than `n` and was padded.
    pub padded: Vec<String>,
}

/// Shuffle the queries that have a teacher list, cut them into batches of
/// `b` (dropping the remainder) and attach each query's top `n` teacher
/// documents. A list with fewer than `n` entries is padded by repeating its
/// entries in rank order.
pub fn assemble_batches(
    queries: &QuerySet,
    teacher_lists: &[RankedList],
    docs: &DocumentCollection,
    featurizer: &Featurizer,
    config: &DistillConfig,
    seed: u64,
) -> Result<BatchPlan> {
    let (b, n) = (config.batch_size, config.docs_per_query);
    let by_query: HashMap<&str, &RankedList> = teacher_lists.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let mut plan = BatchPlan::default();
    let mut usable = Vec::new();
    for q in queries {
        match by_query.get(q.id.as_str()) {
            Some(list) if !list.is_empty() => {
                if list.source != Source::Teacher {
                    return Err(Error::Invalid(format!("{}: training needs a teacher list", q.id)));
                }
                usable.push((q, *list));
            }
            _ => {
                log::warn!("query {} has no teacher list; skipped", q.id);
                plan.skipped.push(q.id.clone());
            }
        }
    }
    usable.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches", &[])));

    let full = usable.len() / b * b;
    for (q, _) in &usable[full..] {
        plan.dropped.push(q.id.clone());
    }
    for chunk in usable[..full].chunks(b) {
        let mut batch = TrainBatch {
            n,
            query_ids: Vec::with_capacity(b),
            queries: Vec::with_capacity(b),
            doc_ids: Vec::with_capacity(b * n),
            docs: Vec::with_capacity(b * n),
            teacher_logits: Vec::with_capacity(b),
        };
        for (q, list) in chunk {
            if list.len() < n {
                plan.padded.push(q.id.clone());
            }
            batch.query_ids.push(q.id.clone());
            batch.queries.push(featurizer.query(q));
            let mut row = Vec::with_capacity(n);
            for e in list.entries.iter().cycle().take(n) {
                let doc = docs.get(&e.doc_id).ok_or_else(|| Error::MissingDocument(e.doc_id.clone()))?;
                batch.doc_ids.push(e.doc_id.clone());
                batch.docs.push(featurizer.document(doc));
                row.push(e.score);
            }
            batch.teacher_logits.push(row);
        }
        batch.validate()?;
        plan.batches.push(batch);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Step {
        epoch: usize,
        step: u64,
        loss: f64,
        grad_norm: f64,
        wall_ms: u64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        steps: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<ReportRecord>,
}

impl TrainingReport {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                ReportRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Run `epochs` passes over `batches` with AdamW, starting from fresh
/// optimizer moments. Batch order is reshuffled every epoch from `seed`;
/// gradients of `grad_accum_steps` consecutive batches are averaged before
/// each update (a trailing group shorter than that is applied as is).
/// `on_epoch` runs after every epoch, typically to write a checkpoint.
pub fn train(
    params: &mut EncoderParams,
    batches: &[TrainBatch],
    config: &DistillConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &EncoderParams, &OptimizerState) -> Result<()>,
) -> Result<(OptimizerState, TrainingReport)> {
    if batches.is_empty() {
        return Err(Error::Invalid("no training batches".into()));
    }
    let mut state = OptimizerState::new(params, AdamW::from(config));
    let mut report = TrainingReport::default();
    let accum = config.grad_accum_steps.max(1);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", &[epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0u64;
        for group in order.chunks(accum) {
            let started = Instant::now();
            let mut total = Gradients::new(params.dim());
            let mut loss = 0.0;
            let scale = 1.0 / group.len() as f64;
            for &bi in group {
                let out = loss_and_grads(params, &batches[bi], config)?;
                loss += out.loss * scale;
                total.accumulate(&out.grads, scale);
            }
            let grad_norm = total.norm();
            apply_gradients(params, &mut state, &total)?;
            epoch_loss += loss;
            epoch_steps += 1;
            report.records.push(ReportRecord::Step {
                epoch,
                step: state.step,
                loss,
                grad_norm,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        report.records.push(ReportRecord::Epoch {
            epoch,
            mean_loss: epoch_loss / epoch_steps as f64,
            steps: epoch_steps,
        });
        on_epoch(epoch, params, &state)?;
    }
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Lang, Query};
    use crate::index::RankedEntry;
    use rand::Rng;

    #[test]
    fn equal_scores_give_uniform_rows() {
        let p = student_dist(&[vec![3.0; 5]]);
        for x in &p[0] {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn teacher_temperature_examples() {
        let p = teacher_dist(&[vec![0.0, 0.0], vec![0.1, 0.0]], 0.1);
        assert_eq!(p[0], vec![0.5, 0.5]);
        let e = 1f64.exp();
        assert!((p[1][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1][0] - 0.7311).abs() < 1e-4 && (p[1][1] - 0.2689).abs() < 1e-4);
        let sharp = teacher_dist(&[vec![0.3, 0.1, -0.2]], 0.001);
        assert!((sharp[0][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_entries_vanish_at_defaults() {
        let cfg = DistillConfig::default();
        let p = teacher_dist(&[vec![-2.0, -3.0, cfg.neg_logit, cfg.neg_logit]], cfg.temperature);
        assert!(p[0][2] < 1e-30 && p[0][3] < 1e-30);
    }

    #[test]
    fn kl_closed_forms() {
        assert!((kl_loss(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]) - 2f64.ln()).abs() < 1e-15);
        let p = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(kl_loss(&p, &p), 0.0);
    }

    fn feature(dim: usize, rng: &mut ChaCha8Rng) -> FeatureVector {
        FeatureVector::from_pairs(dim, (0..3).map(|_| (rng.gen_range(0..dim as u32), rng.gen_range(1..3))))
    }

    pub(crate) fn random_batch(b: usize, n: usize, f: usize, rng: &mut ChaCha8Rng) -> TrainBatch {
        TrainBatch {
            n,
            query_ids: (0..b).map(|i| format!("q{i}")).collect(),
            queries: (0..b).map(|_| feature(f, rng)).collect(),
            doc_ids: (0..b * n).map(|j| format!("d{j}")).collect(),
            docs: (0..b * n).map(|_| feature(f, rng)).collect(),
            teacher_logits: (0..b).map(|_| (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect()).collect(),
        }
    }

    #[test]
    fn teacher_equal_to_student_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(4, 32, 1).unwrap();
        let mut batch = random_batch(1, 3, 32, &mut rng);
        let cfg = DistillConfig {
            temperature: 1.0,
            ..DistillConfig::default()
        };
        // With b = 1 there are no negatives; make teacher logits equal the scores.
        for j in 0..3 {
            let q = params.encode_f64(Side::Query, &batch.queries[0]).unwrap();
            let d = params.encode_f64(Side::Document, &batch.docs[j]).unwrap();
            batch.teacher_logits[0][j] = q.iter().zip(&d).map(|(x, y)| x * y).sum();
        }
        let out = loss_and_grads(&params, &batch, &cfg).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.grads.norm() < 1e-12);
    }

    #[test]
    fn non_finite_logit_names_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = EncoderParams::init(4, 32, 1).unwrap();
        let mut batch = random_batch(2, 2, 32, &mut rng);
        batch.teacher_logits[1][0] = f64::NAN;
        match loss_and_grads(&params, &batch, &DistillConfig::default()) {
            Err(Error::NonFinite { query_id, .. }) => assert_eq!(query_id, "q1"),
            other => panic!("{:?}", other.map(|o| o.loss)),
        }
    }

    fn corpus(nq: usize, nd: usize) -> (QuerySet, DocumentCollection) {
        let queries = QuerySet::from_vec(
            (0..nq)
                .map(|i| Query {
                    id: format!("q{i:02}"),
                    lang: Lang::new("en"),
                    text: format!("word{i} other{}", i % 3),
                    answers: vec![],
                    gold_doc_ids: vec![],
                })
                .collect(),
        )
        .unwrap();
        let docs = DocumentCollection::from_vec(
            (0..nd)
                .map(|i| Document {
                    id: format!("d{i:02}"),
                    lang: Lang::new("en"),
                    title: String::new(),
                    text: format!("word{i} filler{}", i % 4),
                })
                .collect(),
        )
        .unwrap();
        (queries, docs)
    }

    fn teacher_lists(queries: &QuerySet, docs: &[&str]) -> Vec<RankedList> {
        queries
            .iter()
            .map(|q| RankedList {
                query_id: q.id.clone(),
                entries: docs
                    .iter()
                    .enumerate()
                    .map(|(r, d)| RankedEntry {
                        doc_id: d.to_string(),
                        score: -(r as f64),
                    })
                    .collect(),
                source: Source::Teacher,
                short: false,
            })
            .collect()
    }

    fn small_featurizer() -> Featurizer {
        let mut c = crate::config::CorpusConfig::default();
        c.feature_dim = 1 << 10;
        Featurizer::new(c)
    }

    #[test]
    fn sixteen_queries_make_one_full_batch() {
        let (queries, docs) = corpus(17, 20);
        let ids: Vec<String> = (0..20).map(|i| format!("d{i:02}")).collect();
        let ids: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let lists = teacher_lists(&queries, &ids);
        let plan = assemble_batches(&queries, &lists, &docs, &small_featurizer(), &DistillConfig::default(), 3).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.dropped.len(), 1);
        let batch = &plan.batches[0];
        assert_eq!(batch.docs.len(), 256);
        assert_eq!(batch.masked_logits(-1e4)[0].len(), 256);
        // Each query keeps its top 16 teacher documents.
        assert_eq!(&batch.doc_ids[..16], &ids[..16]);
    }

    #[test]
    fn duplicates_across_queries_are_kept_and_masked() {
        let (queries, docs) = corpus(2, 4);
        let lists = teacher_lists(&queries, &["d00", "d01"]);
        let cfg = DistillConfig {
            batch_size: 2,
            docs_per_query: 2,
            ..DistillConfig::default()
        };
        let plan = assemble_batches(&queries, &lists, &docs, &small_featurizer(), &cfg, 0).unwrap();
        let batch = &plan.batches[0];
        assert_eq!(batch.doc_ids, vec!["d00", "d01", "d00", "d01"]);
        let m = batch.masked_logits(cfg.neg_logit);
        assert_eq!(m[0][2], cfg.neg_logit);
        assert_eq!(m[1][0], cfg.neg_logit);
        assert_eq!(m[0][0], 0.0);
    }

    #[test]
    fn missing_and_short_lists() {
        let (queries, docs) = corpus(3, 4);
        let mut lists = teacher_lists(&queries, &["d00", "d01"]);
        lists.remove(1);
        let cfg = DistillConfig {
            batch_size: 1,
            docs_per_query: 3,
            ..DistillConfig::default()
        };
        let plan = assemble_batches(&queries, &lists, &docs, &small_featurizer(), &cfg, 0).unwrap();
        assert_eq!(plan.skipped, vec!["q01"]);
        assert_eq!(plan.batches.len(), 2);
        assert_eq!(plan.padded.len(), 2);
        assert_eq!(plan.batches[0].doc_ids, vec!["d00", "d01", "d00"]);
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batches: Vec<TrainBatch> = (0..4).map(|_| random_batch(4, 3, 64, &mut rng)).collect();
        let cfg = DistillConfig {
            epochs: 8,
            lr: 5e-3,
            temperature: 1.0,
            ..DistillConfig::default()
        };
        let run = || {
            let mut p = EncoderParams::init(8, 64, 2).unwrap();
            let (_, report) = train(&mut p, &batches, &cfg, 9, |_, _, _| Ok(())).unwrap();
            (p, report)
        };
        let (p1, r1) = run();
        let (p2, _) = run();
        assert_eq!(p1, p2);
        let losses = r1.epoch_losses();
        assert_eq!(losses.len(), 8);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{losses:?}");
        }
    }

    #[test]
    fn no_signal_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = EncoderParams::init(4, 32, 1).unwrap();
        let mut batch = random_batch(1, 2, 32, &mut rng);
        // Identical documents with identical teacher scores: both
        // distributions are exactly (1/2, 1/2).
        batch.docs[1] = batch.docs[0].clone();
        batch.teacher_logits[0] = vec![-1.0, -1.0];
        let cfg = DistillConfig {
            weight_decay: 0.0,
            epochs: 2,
            ..DistillConfig::default()
        };
        assert!(loss_and_grads(&params, &batch, &cfg).unwrap().grads.is_zero());
        let before = params.clone();
        let mut epochs_seen = 0;
        train(&mut params, &[batch], &cfg, 0, |_, _, _| {
            epochs_seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs_seen, 2);
        assert_eq!(params, before);
    }
}
