//! Iterative training driver and its on-disk state.
//!
//! Iteration 0 fits the teacher, initializes the encoder and writes the
//! bootstrap run. Iteration `t >= 1` builds an index with the retriever left
//! by iteration `t - 1`, retrieves the top `k`, reranks with the frozen
//! teacher and distills the reranked lists into the encoder.
//!
//! ```text
//! <dir>/config.snapshot        config the run was started with (TOML)
//! <dir>/state                  PipelineState as JSON; replacing it commits an iteration
//! <dir>/manifest               role, path, SHA-256 per artifact (tab separated)
//! <dir>/lock                   held by the process that owns the directory
//! <dir>/corpus/docs.jsonl
//! <dir>/corpus/queries.jsonl
//! <dir>/teacher.bin
//! <dir>/iter_0/checkpoint      initial encoder
//! <dir>/iter_0/run.retriever   bootstrap run
//! <dir>/iter_<t>/run.retriever candidates from the previous retriever
//! <dir>/iter_<t>/run.teacher   the same candidates reranked
//! <dir>/iter_<t>/train.report
//! <dir>/iter_<t>/checkpoint
//! ```
//!
//! Every iteration is assembled in `iter_<t>.partial` and renamed into place
//! once all stages succeeded. The manifest and then the state file are
//! replaced last, so an aborted iteration leaves the previous state as it was.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BootstrapMode, Config};
use crate::corpus::{DocumentCollection, Featurizer, QuerySet};
use crate::distill::{assemble_batches, train, TrainingReport};
use crate::encoder::{load_checkpoint, save_checkpoint, AdamW, EncoderParams, OptimizerState, Side};
use crate::error::{Error, Result};
use crate::evalkit::{lexical_retrieve, read_run, write_run, Bm25Index};
use crate::hashing::{derive_seed, sha256_file, sha256_hex};
use crate::index::{RankedList, VectorIndex};
use crate::teacher::{rerank_all, InstructionTemplate, LexicalTeacher, RerankContext};

pub const STATE_VERSION: u32 = 1;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const STATE_FILE: &str = "state";
pub const MANIFEST_FILE: &str = "manifest";
pub const LOCK_FILE: &str = "lock";
pub const DOCS_FILE: &str = "corpus/docs.jsonl";
pub const QUERIES_FILE: &str = "corpus/queries.jsonl";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const CHECKPOINT: &str = "checkpoint";
pub const RETRIEVER_RUN: &str = "run.retriever";
pub const TEACHER_RUN: &str = "run.teacher";
pub const TRAIN_REPORT: &str = "train.report";

/// Directory of iteration `t`, relative to the state directory.
pub fn iter_dir(t: usize) -> String {
    format!("iter_{t}")
}

fn iter_path(t: usize, name: &str) -> String {
    format!("{}/{name}", iter_dir(t))
}

fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    /// Relative to the state directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.role, e.path, e.sha256))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::State(format!("manifest line {}: expected 3 columns", i + 1)));
            }
            entries.push(ManifestEntry {
                role: cols[0].into(),
                path: cols[1].into(),
                sha256: cols[2].into(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn get(&self, role: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.role == role)
    }

    fn record(&mut self, dir: &Path, role: String, path: String) -> Result<()> {
        let sha256 = sha256_file(&dir.join(&path))?;
        self.entries.retain(|e| e.role != role);
        self.entries.push(ManifestEntry { role, path, sha256 });
        Ok(())
    }

    /// Every entry must exist with its recorded hash. The error names the
    /// first entry that does not.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            let path = dir.join(&e.path);
            if !path.is_file() {
                return Err(Error::State(format!("{} ({}) is missing", e.path, e.role)));
            }
            let actual = sha256_file(&path)?;
            if actual != e.sha256 {
                return Err(Error::State(format!(
                    "{} ({}) has hash {actual}, manifest records {}",
                    e.path, e.role, e.sha256
                )));
            }
        }
        Ok(())
    }
}

/// What happened in one iteration, enough to re-check the chain of
/// checkpoints and indexes afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Retriever behind this iteration's candidates: `lexical`, `random` or
    /// `encoder`.
    pub retriever: String,
    /// Checkpoint the candidate index was built from; none for BM25.
    pub index_checkpoint: Option<String>,
    /// Weight fingerprint of that index.
    pub index_fingerprint: Option<String>,
    /// Checkpoint training started from; none when the encoder was
    /// re-initialized (and for iteration 0).
    pub start_checkpoint: Option<String>,
    pub checkpoint: String,
    pub checkpoint_fingerprint: String,
    pub batches: usize,
    pub skipped: usize,
    pub dropped: usize,
    pub padded: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub version: u32,
    /// Last completed iteration; 0 right after the bootstrap.
    pub iteration: usize,
    pub target_iterations: usize,
    /// SHA-256 of the config snapshot file.
    pub config_hash: String,
    pub bootstrap: BootstrapMode,
    /// Latest checkpoint.
    pub checkpoint: String,
    /// Index consumed by the latest iteration.
    pub index_fingerprint: Option<String>,
    pub iterations: Vec<IterationRecord>,
    pub manifest: Manifest,
}

impl PipelineState {
    pub fn is_complete(&self) -> bool {
        self.iteration >= self.target_iterations
    }

    /// Structural checks: consecutive iterations, and each iteration's index
    /// built from the checkpoint the previous iteration produced.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::State(msg));
        if self.version != STATE_VERSION {
            return bad(format!("unsupported state version {}", self.version));
        }
        if self.iterations.len() != self.iteration + 1 {
            return bad(format!(
                "state claims iteration {} but records {} iterations",
                self.iteration,
                self.iterations.len()
            ));
        }
        for (t, rec) in self.iterations.iter().enumerate() {
            if rec.iteration != t {
                return bad(format!("iteration record {t} is labelled {}", rec.iteration));
            }
            if t >= 2 {
                let prev = &self.iterations[t - 1];
                if rec.index_checkpoint.as_deref() != Some(prev.checkpoint.as_str())
                    || rec.index_fingerprint.as_deref() != Some(prev.checkpoint_fingerprint.as_str())
                {
                    return bad(format!("iteration {t} did not index the checkpoint of iteration {}", t - 1));
                }
            }
        }
        let last = &self.iterations[self.iteration];
        if self.checkpoint != last.checkpoint || self.index_fingerprint != last.index_fingerprint {
            return bad("latest checkpoint or index does not match the last iteration".into());
        }
        Ok(())
    }
}

/// How a call to [`resume`] ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeOutcome {
    /// Nothing left to do.
    AlreadyComplete,
    /// Ran this many iterations and is now complete.
    Completed { ran: usize },
}

/// Exclusive ownership of a state directory, released on drop.
#[derive(Debug)]
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::State(format!(
                    "{} is locked by process {}; remove {} if that process is gone",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encode every query with the query encoder.
pub fn encode_queries(
    params: &EncoderParams,
    featurizer: &Featurizer,
    queries: &QuerySet,
) -> Result<Vec<(String, crate::encoder::Embedding)>> {
    queries
        .as_slice()
        .par_iter()
        .map(|q| Ok((q.id.clone(), params.encode(Side::Query, &featurizer.query(q))?)))
        .collect()
}

/// Dense retrieval of the top `k` documents for every query, in query
/// order. Also returns the fingerprint of the index.
pub fn dense_retrieve(
    params: &EncoderParams,
    featurizer: &Featurizer,
    docs: &DocumentCollection,
    queries: &QuerySet,
    k: usize,
) -> Result<(Vec<RankedList>, u64)> {
    let index = VectorIndex::build(docs, featurizer, params)?;
    let lists = index.batch_search(&encode_queries(params, featurizer, queries)?, k)?;
    Ok((lists, index.fingerprint()))
}

/// Unrestricted BM25 over the whole collection, in query order.
pub fn lexical_bootstrap(docs: &DocumentCollection, queries: &QuerySet, config: &Config) -> Result<Vec<RankedList>> {
    let index = Bm25Index::build(docs, &config.corpus);
    let mut params = config.lexical.clone();
    params.target_language_only = false;
    queries
        .as_slice()
        .par_iter()
        .map(|q| lexical_retrieve(&index, q, config.retrieval.k, &params))
        .collect()
}

/// An open state directory.
pub struct Pipeline {
    dir: PathBuf,
    config: Config,
    state: PipelineState,
    docs: DocumentCollection,
    queries: QuerySet,
    teacher: LexicalTeacher,
    #[cfg(test)]
    fault: Option<&'static str>,
    _lock: DirLock,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("dir", &self.dir)
            .field("iteration", &self.state.iteration)
            .finish()
    }
}

impl Pipeline {
    /// Create a state directory and run iteration 0: snapshot config and
    /// corpora, fit the teacher, initialize the encoder and write the
    /// bootstrap run. An existing state directory is only replaced when
    /// `force` is set.
    pub fn bootstrap(
        dir: &Path,
        config: &Config,
        docs: DocumentCollection,
        queries: QuerySet,
        force: bool,
    ) -> Result<Pipeline> {
        config.validate()?;
        if docs.is_empty() || queries.is_empty() {
            return Err(Error::Invalid("the pipeline needs documents and queries".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = DirLock::acquire(dir)?;
        let existing: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().is_some_and(|n| n != LOCK_FILE))
            .collect();
        if !existing.is_empty() {
            if !force {
                return Err(Error::State(format!(
                    "{} is not empty; refusing to overwrite without force",
                    dir.display()
                )));
            }
            for p in existing {
                let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                r.map_err(|e| Error::io(&p, e))?;
            }
        }

        let mut manifest = Manifest::default();
        let snapshot = config.to_toml_string();
        write_atomic(&dir.join(SNAPSHOT_FILE), snapshot.as_bytes())?;
        manifest.record(dir, "config".into(), SNAPSHOT_FILE.into())?;

        let corpus_dir = dir.join("corpus");
        fs::create_dir_all(&corpus_dir).map_err(|e| Error::io(&corpus_dir, e))?;
        docs.write_jsonl(&dir.join(DOCS_FILE))?;
        queries.write_jsonl(&dir.join(QUERIES_FILE))?;
        manifest.record(dir, "docs".into(), DOCS_FILE.into())?;
        manifest.record(dir, "queries".into(), QUERIES_FILE.into())?;

        let teacher = LexicalTeacher::fit(&docs, &queries, &config.corpus, &config.teacher)?;
        teacher.save(&dir.join(TEACHER_FILE))?;
        manifest.record(dir, "teacher".into(), TEACHER_FILE.into())?;

        let partial = dir.join(format!("{}.partial", iter_dir(0)));
        fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        let params = EncoderParams::init(
            config.encoder.dim,
            config.corpus.feature_dim,
            derive_seed(config.seed, "init", &[0]),
        )?;
        let state0 = OptimizerState::new(&params, AdamW::from(&config.distill));
        save_checkpoint(&partial.join(CHECKPOINT), &params, &state0)?;
        let (run, retriever, index_checkpoint, index_fingerprint) = match config.pipeline.bootstrap {
            BootstrapMode::Lexical => (lexical_bootstrap(&docs, &queries, config)?, "lexical", None, None),
            BootstrapMode::Random => {
                let fz = Featurizer::new(config.corpus.clone());
                let (run, fp) = dense_retrieve(&params, &fz, &docs, &queries, config.retrieval.k)?;
                (run, "random", Some(iter_path(0, CHECKPOINT)), Some(fingerprint_hex(fp)))
            }
        };
        write_run(&partial.join(RETRIEVER_RUN), &run, "retriever")?;
        let final_dir = dir.join(iter_dir(0));
        fs::rename(&partial, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        manifest.record(dir, "checkpoint@0".into(), iter_path(0, CHECKPOINT))?;
        manifest.record(dir, "run.retriever@0".into(), iter_path(0, RETRIEVER_RUN))?;

        let record = IterationRecord {
            iteration: 0,
            retriever: retriever.into(),
            index_checkpoint,
            index_fingerprint: index_fingerprint.clone(),
            start_checkpoint: None,
            checkpoint: iter_path(0, CHECKPOINT),
            checkpoint_fingerprint: fingerprint_hex(params.fingerprint()),
            batches: 0,
            skipped: 0,
            dropped: 0,
            padded: 0,
            final_loss: None,
        };
        let state = PipelineState {
            version: STATE_VERSION,
            iteration: 0,
            target_iterations: config.pipeline.iterations,
            config_hash: sha256_hex(snapshot.as_bytes()),
            bootstrap: config.pipeline.bootstrap,
            checkpoint: record.checkpoint.clone(),
            index_fingerprint,
            iterations: vec![record],
            manifest,
        };
        let pipeline = Pipeline {
            dir: dir.to_path_buf(),
            config: config.clone(),
            state,
            docs,
            queries,
            teacher,
            #[cfg(test)]
            fault: None,
            _lock: lock,
        };
        pipeline.commit()?;
        log::info!("bootstrapped {} with the {retriever} retriever", dir.display());
        Ok(pipeline)
    }

    /// Open an existing state directory, verifying the config snapshot and
    /// every manifest entry.
    pub fn open(dir: &Path) -> Result<Pipeline> {
        let state_path = dir.join(STATE_FILE);
        if !state_path.is_file() {
            return Err(Error::State(format!("{} holds no pipeline state", dir.display())));
        }
        let lock = DirLock::acquire(dir)?;
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: PipelineState = serde_json::from_str(&text)
            .map_err(|e| Error::State(format!("{}: {e}", state_path.display())))?;
        state.validate()?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let on_disk = match fs::read_to_string(&manifest_path) {
            Ok(t) => Some(Manifest::parse(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&manifest_path, e)),
        };
        if let Some(m) = &on_disk {
            // The manifest file is written just before the state; entries
            // beyond the state belong to an iteration that never committed.
            m.verify(dir)?;
        }
        state.manifest.verify(dir)?;
        if on_disk.as_ref() != Some(&state.manifest) {
            log::warn!("rewriting {} from the committed state", manifest_path.display());
            write_atomic(&manifest_path, state.manifest.render().as_bytes())?;
        }

        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let snapshot = fs::read_to_string(&snapshot_path).map_err(|e| Error::io(&snapshot_path, e))?;
        if sha256_hex(snapshot.as_bytes()) != state.config_hash {
            return Err(Error::State(format!("{SNAPSHOT_FILE} does not match the config hash in the state")));
        }
        let config = Config::from_toml_str(&snapshot)?;
        let docs = DocumentCollection::ingest(&dir.join(DOCS_FILE), &config.corpus)?;
        let queries = QuerySet::ingest(&dir.join(QUERIES_FILE), &config.corpus)?;
        let teacher = LexicalTeacher::load(&dir.join(TEACHER_FILE))?;
        Ok(Pipeline {
            dir: dir.to_path_buf(),
            config,
            state,
            docs,
            queries,
            teacher,
            #[cfg(test)]
            fault: None,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn docs(&self) -> &DocumentCollection {
        &self.docs
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn teacher(&self) -> &LexicalTeacher {
        &self.teacher
    }

    /// Absolute path of an artifact of iteration `t`.
    pub fn artifact(&self, t: usize, name: &str) -> PathBuf {
        self.dir.join(iter_path(t, name))
    }

    /// Retrieval with the encoder saved by iteration `t`.
    pub fn trained_run(&self, t: usize) -> Result<Vec<RankedList>> {
        if t > self.state.iteration {
            return Err(Error::State(format!("iteration {t} has not run")));
        }
        let (params, _) = load_checkpoint(&self.artifact(t, CHECKPOINT))?;
        let fz = Featurizer::new(self.config.corpus.clone());
        Ok(dense_retrieve(&params, &fz, &self.docs, &self.queries, self.config.retrieval.k)?.0)
    }

    fn commit(&self) -> Result<()> {
        write_atomic(&self.dir.join(MANIFEST_FILE), self.state.manifest.render().as_bytes())?;
        let json = serde_json::to_vec_pretty(&self.state).expect("state serializes");
        write_atomic(&self.dir.join(STATE_FILE), &json)
    }

    #[cfg(test)]
    fn stage(&self, name: &'static str) -> Result<()> {
        if self.fault == Some(name) {
            return Err(Error::State(format!("injected failure at {name}")));
        }
        Ok(())
    }

    #[cfg(not(test))]
    fn stage(&self, _name: &'static str) -> Result<()> {
        Ok(())
    }

    /// Run the next iteration and commit it.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        let t = self.state.iteration + 1;
        let partial = self.dir.join(format!("{}.partial", iter_dir(t)));
        let final_dir = self.dir.join(iter_dir(t));
        for stale in [&partial, &final_dir] {
            if stale.exists() {
                log::warn!("removing uncommitted {}", stale.display());
                fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
            }
        }
        fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        let record = match self.execute(t, &partial) {
            Ok(r) => r,
            Err(e) => {
                let _ = fs::remove_dir_all(&partial);
                return Err(e);
            }
        };
        fs::rename(&partial, &final_dir).map_err(|e| Error::io(&final_dir, e))?;

        let mut next = self.state.clone();
        for name in [RETRIEVER_RUN, TEACHER_RUN, TRAIN_REPORT, CHECKPOINT] {
            next.manifest.record(&self.dir, format!("{name}@{t}"), iter_path(t, name))?;
        }
        next.iteration = t;
        next.checkpoint = record.checkpoint.clone();
        next.index_fingerprint = record.index_fingerprint.clone();
        next.iterations.push(record.clone());
        let previous = std::mem::replace(&mut self.state, next);
        if let Err(e) = self.commit() {
            self.state = previous;
            return Err(e);
        }
        log::info!("iteration {t} committed");
        Ok(record)
    }

    fn execute(&self, t: usize, out: &Path) -> Result<IterationRecord> {
        let cfg = &self.config;
        let fz = Featurizer::new(cfg.corpus.clone());
        let prev = &self.state.iterations[t - 1];

        // The retriever entering iteration 1 is the bootstrap retriever,
        // whose run iteration 0 already wrote.
        let (pool, retriever, index_checkpoint, index_fingerprint) = if t == 1 {
            (
                read_run(&self.artifact(0, RETRIEVER_RUN))?,
                prev.retriever.clone(),
                prev.index_checkpoint.clone(),
                prev.index_fingerprint.clone(),
            )
        } else {
            let (params, _) = load_checkpoint(&self.dir.join(&prev.checkpoint))?;
            let (lists, fp) = dense_retrieve(&params, &fz, &self.docs, &self.queries, cfg.retrieval.k)?;
            (lists, "encoder".to_string(), Some(prev.checkpoint.clone()), Some(fingerprint_hex(fp)))
        };
        self.stage("retrieve")?;
        write_run(&out.join(RETRIEVER_RUN), &pool, "retriever")?;

        let template = InstructionTemplate::new(&cfg.teacher.instruction, &cfg.corpus.languages)?;
        let ctx = RerankContext {
            corpus: &cfg.corpus,
            template: &template,
            docs: &self.docs,
        };
        let reranked = rerank_all(&self.teacher, &self.queries, &pool, &ctx)?;
        self.stage("rerank")?;
        write_run(&out.join(TEACHER_RUN), &reranked, "teacher")?;

        let plan = assemble_batches(
            &self.queries,
            &reranked,
            &self.docs,
            &fz,
            &cfg.distill,
            derive_seed(cfg.seed, "batches", &[t as u64]),
        )?;
        let (mut params, start_checkpoint) = if cfg.pipeline.reinit {
            let seed = derive_seed(cfg.seed, "init", &[t as u64]);
            (EncoderParams::init(cfg.encoder.dim, cfg.corpus.feature_dim, seed)?, None)
        } else {
            (load_checkpoint(&self.dir.join(&prev.checkpoint))?.0, Some(prev.checkpoint.clone()))
        };
        let ckpt = out.join(CHECKPOINT);
        let (opt, report) = if plan.batches.is_empty() {
            log::warn!("iteration {t}: no full training batch, keeping the encoder unchanged");
            (
                OptimizerState::new(&params, AdamW::from(&cfg.distill)),
                TrainingReport::default(),
            )
        } else {
            train(
                &mut params,
                &plan.batches,
                &cfg.distill,
                derive_seed(cfg.seed, "train", &[t as u64]),
                |_, p, s| save_checkpoint(&ckpt, p, s),
            )?
        };
        self.stage("train")?;
        save_checkpoint(&ckpt, &params, &opt)?;
        let report_path = out.join(TRAIN_REPORT);
        let mut w = BufWriter::new(File::create(&report_path).map_err(|e| Error::io(&report_path, e))?);
        report
            .write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&report_path, e))?;

        Ok(IterationRecord {
            iteration: t,
            retriever,
            index_checkpoint,
            index_fingerprint,
            start_checkpoint,
            checkpoint: iter_path(t, CHECKPOINT),
            checkpoint_fingerprint: fingerprint_hex(params.fingerprint()),
            batches: plan.batches.len(),
            skipped: plan.skipped.len(),
            dropped: plan.dropped.len(),
            padded: plan.padded.len(),
            final_loss: report.epoch_losses().last().copied(),
        })
    }

    /// Run iteration `t`. Iterations that already completed are refused
    /// unless `force` is set, in which case `t` and everything after it is
    /// discarded first.
    pub fn run_iteration_at(&mut self, t: usize, force: bool) -> Result<IterationRecord> {
        if t == 0 {
            return Err(Error::State("iteration 0 is the bootstrap; create the state again to redo it".into()));
        }
        if t > self.state.iteration + 1 {
            return Err(Error::State(format!(
                "cannot run iteration {t}: iteration {} has not run",
                self.state.iteration + 1
            )));
        }
        if t <= self.state.iteration {
            if !force {
                return Err(Error::State(format!(
                    "iteration {t} is already complete; refusing to overwrite without force"
                )));
            }
            self.rollback(t - 1)?;
        }
        self.run_iteration()
    }

    fn rollback(&mut self, keep: usize) -> Result<()> {
        let mut next = self.state.clone();
        next.iterations.truncate(keep + 1);
        next.iteration = keep;
        next.checkpoint = next.iterations[keep].checkpoint.clone();
        next.index_fingerprint = next.iterations[keep].index_fingerprint.clone();
        next.manifest.entries.retain(|e| match e.role.rsplit_once('@') {
            Some((_, it)) => it.parse::<usize>().map_or(true, |it| it <= keep),
            None => true,
        });
        let doomed: Vec<usize> = (keep + 1..=self.state.iteration).collect();
        self.state = next;
        self.commit()?;
        for t in doomed {
            let d = self.dir.join(iter_dir(t));
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Run iterations until the configured count is reached; returns how many ran.
    pub fn run_to_completion(&mut self) -> Result<usize> {
        let mut ran = 0;
        while !self.state.is_complete() {
            self.run_iteration()?;
            ran += 1;
        }
        Ok(ran)
    }
}

/// Continue the run in `dir` at its recorded iteration.
pub fn resume(dir: &Path) -> Result<ResumeOutcome> {
    let mut p = Pipeline::open(dir)?;
    if p.state().is_complete() {
        return Ok(ResumeOutcome::AlreadyComplete);
    }
    let ran = p.run_to_completion()?;
    Ok(ResumeOutcome::Completed { ran })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Lang, Query};
    use crate::synthgen::generate;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.corpus.feature_dim = 1 << 10;
        c.encoder.dim = 8;
        c.retrieval.k = 8;
        c.distill.batch_size = 4;
        c.distill.docs_per_query = 4;
        c.distill.epochs = 2;
        c.synth.topics = 4;
        c.synth.docs_per_topic = 4;
        c.synth.queries_per_topic = 2;
        c
    }

    fn corpora(c: &Config) -> (DocumentCollection, QuerySet) {
        let s = generate(&c.synth, c.seed).unwrap();
        (s.docs, s.queries)
    }

    fn start(dir: &Path, c: &Config) -> Pipeline {
        let (d, q) = corpora(c);
        Pipeline::bootstrap(dir, c, d, q, false).unwrap()
    }

    #[test]
    fn default_run_has_bootstrap_and_two_iterations() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tiny();
        let mut p = start(tmp.path(), &c);
        assert_eq!(p.run_to_completion().unwrap(), 2);
        for t in 0..=2 {
            assert!(p.artifact(t, CHECKPOINT).is_file());
            assert!(p.artifact(t, RETRIEVER_RUN).is_file());
        }
        for t in 1..=2 {
            assert!(p.artifact(t, TEACHER_RUN).is_file());
            assert!(p.artifact(t, TRAIN_REPORT).is_file());
        }
        assert!(!p.dir().join("iter_3").exists());
        let s = p.state();
        assert!(s.is_complete());
        assert_eq!(s.iteration, 2);
        assert_eq!(s.iterations[1].retriever, "lexical");
        assert_eq!(s.iterations[2].index_checkpoint.as_deref(), Some("iter_1/checkpoint"));
        assert_eq!(
            s.iterations[2].index_fingerprint.as_ref(),
            Some(&s.iterations[1].checkpoint_fingerprint)
        );
        s.validate().unwrap();
        let text = fs::read_to_string(p.dir().join(MANIFEST_FILE)).unwrap();
        assert_eq!(Manifest::parse(&text).unwrap(), s.manifest);
    }

    #[test]
    fn second_iteration_consumes_exactly_the_new_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = start(tmp.path(), &tiny());
        p.run_iteration().unwrap();
        let before = p.state().manifest.clone();
        p.run_iteration().unwrap();
        let after = &p.state().manifest;
        let added: Vec<&str> = after
            .entries
            .iter()
            .filter(|e| !before.entries.contains(e))
            .map(|e| e.role.as_str())
            .collect();
        assert_eq!(added, ["run.retriever@2", "run.teacher@2", "train.report@2", "checkpoint@2"]);
        assert!(before.entries.iter().all(|e| after.entries.contains(e)));
        let rec = &p.state().iterations[2];
        assert_eq!(rec.index_checkpoint.as_deref(), Some("iter_1/checkpoint"));
        assert_eq!(rec.start_checkpoint.as_deref(), Some("iter_1/checkpoint"));
    }

    #[test]
    fn resume_after_completion_is_a_no_op() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = start(tmp.path(), &tiny());
        p.run_to_completion().unwrap();
        let state = fs::read(tmp.path().join(STATE_FILE)).unwrap();
        drop(p);
        assert_eq!(resume(tmp.path()).unwrap(), ResumeOutcome::AlreadyComplete);
        assert_eq!(fs::read(tmp.path().join(STATE_FILE)).unwrap(), state);
    }

    #[test]
    fn deleted_checkpoint_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = start(tmp.path(), &tiny());
        p.run_iteration().unwrap();
        drop(p);
        fs::remove_file(tmp.path().join("iter_1/checkpoint")).unwrap();
        let err = Pipeline::open(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("iter_1/checkpoint"), "{err}");
    }

    #[test]
    fn tampered_artifact_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let p = start(tmp.path(), &tiny());
        drop(p);
        fs::write(tmp.path().join("iter_0/run.retriever"), "q 0 d 1 1.0 x\n").unwrap();
        let err = Pipeline::open(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("iter_0/run.retriever") && err.contains("hash"), "{err}");
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_checkpoint() {
        let c = tiny();
        let straight = tempfile::tempdir().unwrap();
        let mut p = start(straight.path(), &c);
        p.run_to_completion().unwrap();
        drop(p);

        let split = tempfile::tempdir().unwrap();
        let mut p = start(split.path(), &c);
        p.run_iteration().unwrap();
        drop(p);
        assert_eq!(resume(split.path()).unwrap(), ResumeOutcome::Completed { ran: 1 });

        let a = sha256_file(&straight.path().join("iter_2/checkpoint")).unwrap();
        let b = sha256_file(&split.path().join("iter_2/checkpoint")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn completed_iteration_needs_force() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = start(tmp.path(), &tiny());
        p.run_to_completion().unwrap();
        let state = fs::read(tmp.path().join(STATE_FILE)).unwrap();
        let err = p.run_iteration_at(1, false).unwrap_err().to_string();
        assert!(err.contains("refusing"), "{err}");
        assert_eq!(fs::read(tmp.path().join(STATE_FILE)).unwrap(), state);

        let first = p.state().iterations[1].checkpoint_fingerprint.clone();
        p.run_iteration_at(1, true).unwrap();
        assert_eq!(p.state().iteration, 1);
        assert!(!tmp.path().join("iter_2").exists());
        assert_eq!(p.state().iterations[1].checkpoint_fingerprint, first);
        p.run_to_completion().unwrap();
        assert_eq!(p.state().iteration, 2);
    }

    #[test]
    fn bootstrap_refuses_existing_state_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let c = tiny();
        drop(start(tmp.path(), &c));
        let (d, q) = corpora(&c);
        let err = Pipeline::bootstrap(tmp.path(), &c, d.clone(), q.clone(), false).unwrap_err();
        assert!(err.to_string().contains("refusing"), "{err}");
        Pipeline::bootstrap(tmp.path(), &c, d, q, true).unwrap();
    }

    #[test]
    fn directory_is_locked_while_open() {
        let tmp = tempfile::tempdir().unwrap();
        let p = start(tmp.path(), &tiny());
        let err = Pipeline::open(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("locked"), "{err}");
        drop(p);
        Pipeline::open(tmp.path()).unwrap();
    }

    #[test]
    fn failed_iteration_leaves_state_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = start(tmp.path(), &tiny());
        p.run_iteration().unwrap();
        let files = [STATE_FILE, MANIFEST_FILE];
        let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(tmp.path().join(f)).unwrap()).collect();
        for stage in ["retrieve", "rerank", "train"] {
            p.fault = Some(stage);
            let err = p.run_iteration().unwrap_err().to_string();
            assert!(err.contains(stage), "{err}");
            assert_eq!(p.state().iteration, 1);
            assert!(!tmp.path().join("iter_2").exists());
            assert!(!tmp.path().join("iter_2.partial").exists());
            let after: Vec<Vec<u8>> = files.iter().map(|f| fs::read(tmp.path().join(f)).unwrap()).collect();
            assert_eq!(before, after);
        }
        p.fault = None;
        drop(p);
        let mut p = Pipeline::open(tmp.path()).unwrap();
        p.run_iteration().unwrap();
    }

    #[test]
    fn one_document_corpus_completes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.distill.batch_size = 2;
        c.distill.docs_per_query = 2;
        let docs = DocumentCollection::from_vec(vec![Document {
            id: "only".into(),
            lang: Lang::new("en"),
            title: String::new(),
            text: "red fox jumps".into(),
        }])
        .unwrap();
        let queries = QuerySet::from_vec(
            ["fox", "red", "blue", "jumps"]
                .iter()
                .enumerate()
                .map(|(i, t)| Query {
                    id: format!("q{i}"),
                    lang: Lang::new("en"),
                    text: t.to_string(),
                    answers: vec![],
                    gold_doc_ids: vec!["only".into()],
                })
                .collect(),
        )
        .unwrap();
        let mut p = Pipeline::bootstrap(tmp.path(), &c, docs, queries, false).unwrap();
        p.run_to_completion().unwrap();
        for t in 0..=2 {
            for list in read_run(&p.artifact(t, RETRIEVER_RUN)).unwrap() {
                assert_eq!(list.doc_ids().collect::<Vec<_>>(), ["only"]);
            }
        }
        let trained = p.trained_run(2).unwrap();
        assert!(trained.iter().all(|l| l.doc_ids().eq(["only"])));
    }

    #[test]
    fn random_bootstrap_is_deterministic_and_only_changes_the_bootstrap_run() {
        let mut c = tiny();
        let lexical = tempfile::tempdir().unwrap();
        let lex = start(lexical.path(), &c).state().manifest.clone();

        c.pipeline.bootstrap = BootstrapMode::Random;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = start(a.path(), &c);
        let pb = start(b.path(), &c);
        assert_eq!(pa.state().manifest, pb.state().manifest);
        assert_eq!(pa.state().iterations[0].retriever, "random");

        let differing: Vec<&str> = pa
            .state()
            .manifest
            .entries
            .iter()
            .zip(&lex.entries)
            .filter(|(x, y)| x.sha256 != y.sha256)
            .map(|(x, _)| x.role.as_str())
            .collect();
        assert_eq!(differing, ["config", "run.retriever@0"]);
    }

    #[test]
    fn reinit_starts_each_iteration_fresh() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.pipeline.reinit = true;
        let mut p = start(tmp.path(), &c);
        p.run_to_completion().unwrap();
        assert!(p.state().iterations[1..].iter().all(|r| r.start_checkpoint.is_none()));
    }
}
