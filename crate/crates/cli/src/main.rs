//! `umr`: synthetic data, teacher fitting, iterative training, retrieval,
//! reranking and evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments, config or input files,
//! 2 for internal failures (including inconsistent pipeline state).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use umr_core::config::Config;
use umr_core::corpus::{DocumentCollection, Featurizer, Lang, QuerySet, Records};
use umr_core::encoder::{inspect_checkpoint, load_checkpoint};
use umr_core::evalkit::{
    compare_runs, lexical_retrieve, read_run, render_deltas, render_table, write_run, Bm25Index, EvalContext,
    MatchMode, MetricSpec,
};
use umr_core::index::RankedList;
use umr_core::pipeline::{dense_retrieve, IterationRecord, Pipeline, STATE_FILE};
use umr_core::synthgen::{emit, generate};
use umr_core::teacher::{rerank_all, InstructionTemplate, LexicalTeacher, RerankContext};

#[derive(Parser, Debug)]
#[command(name = "umr", version, about = "Unsupervised multilingual dense retrieval")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file (TOML: top-level `seed` plus one table per module).
    #[arg(long, global = true, env = "UMR_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.temperature=1.0`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "UMR_THREADS", default_value_t = 0)]
    threads: usize,
    /// Output format for reports and summaries.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Human-readable table.
    Table,
    /// One JSON record per line.
    Jsonl,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Documents, one JSON object per line (id, lang, title, text).
    #[arg(long)]
    docs: PathBuf,
    /// Queries, one JSON object per line (id, lang, text, answers, gold_doc_ids).
    #[arg(long)]
    queries: PathBuf,
}

#[derive(Args, Debug)]
struct MetricArgs {
    /// Metrics to compute.
    #[arg(long, value_enum, num_args = 1.., default_values_t = [Metric::RecallAtK])]
    metric: Vec<Metric>,
    /// Cutoffs for recall@k and answer-recall@k.
    #[arg(long, num_args = 1.., default_values_t = [10, 100])]
    k: Vec<usize>,
    /// Token budgets for recall@kt.
    #[arg(long, num_args = 1.., default_values_t = [2000, 5000])]
    kt: Vec<usize>,
    /// Only evaluate queries in these languages.
    #[arg(long, num_args = 1..)]
    lang: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    /// A gold document id in the top k.
    #[value(name = "recall@k")]
    RecallAtK,
    /// An answer string inside one of the top k documents.
    #[value(name = "answer-recall@k")]
    AnswerRecallAtK,
    /// An answer string inside the first kt tokens of the ranked documents.
    #[value(name = "recall@kt")]
    RecallAtKt,
}

impl MetricArgs {
    fn specs(&self) -> Vec<MetricSpec> {
        let mut out = Vec::new();
        for m in &self.metric {
            match m {
                Metric::RecallAtK => out.extend(self.k.iter().map(|&k| MetricSpec::Recall { k, mode: MatchMode::Gold })),
                Metric::AnswerRecallAtK => out.extend(self.k.iter().map(|&k| MetricSpec::Recall {
                    k,
                    mode: MatchMode::Answer,
                })),
                Metric::RecallAtKt => out.extend(self.kt.iter().map(|&kt| MetricSpec::RecallTokens { kt })),
            }
        }
        out
    }

    fn needs_docs(&self) -> bool {
        self.metric.iter().any(|m| *m != Metric::RecallAtK)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multilingual benchmark (docs.jsonl, queries.jsonl, gold.tsv).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate document and query files and report rejected lines.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Write `docs.rejects.tsv` and `queries.rejects.tsv` (line, reason) here.
        #[arg(long)]
        reject_dir: Option<PathBuf>,
    },
    /// Fit the lexical query-likelihood teacher on unpaired documents and queries.
    FitTeacher {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Where to write the teacher.
        #[arg(long)]
        out: PathBuf,
    },
    /// Create a state directory and run iteration 0 (teacher, initial encoder, bootstrap run).
    Bootstrap {
        /// State directory.
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Replace an existing state directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one training iteration in an existing state directory. The config
    /// comes from the directory's snapshot.
    Iterate {
        /// State directory.
        #[arg(long)]
        state: PathBuf,
        /// Iteration to run; defaults to the next one.
        #[arg(long)]
        iteration: Option<usize>,
        /// Re-run an iteration that already completed, discarding it and
        /// everything after it.
        #[arg(long)]
        force: bool,
    },
    /// Bootstrap and run every configured iteration, or resume an interrupted run.
    Pipeline {
        /// State directory.
        #[arg(long)]
        state: PathBuf,
        /// Needed unless the state directory already exists.
        #[arg(long, requires = "queries")]
        docs: Option<PathBuf>,
        /// Needed unless the state directory already exists.
        #[arg(long, requires = "docs")]
        queries: Option<PathBuf>,
        /// Start over even if the state directory holds a run.
        #[arg(long)]
        force: bool,
    },
    /// Retrieve the top k documents per query with a checkpoint or with BM25.
    Retrieve {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Encoder checkpoint.
        #[arg(long, required_unless_present = "lexical", conflicts_with = "lexical")]
        checkpoint: Option<PathBuf>,
        /// Use BM25 instead of an encoder.
        #[arg(long)]
        lexical: bool,
        /// Documents per query (overrides `retrieval.k`).
        #[arg(long)]
        k: Option<usize>,
        /// Run file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerank a retriever run with a fitted teacher.
    Rerank {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Teacher written by `fit-teacher` (or `teacher.bin` in a state directory).
        #[arg(long)]
        teacher: PathBuf,
        /// Retriever run to rerank.
        #[arg(long)]
        run: PathBuf,
        /// Run file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run file.
    Eval {
        /// Run file.
        #[arg(long)]
        run: PathBuf,
        /// Queries with gold ids and/or answers.
        #[arg(long)]
        queries: PathBuf,
        /// Documents; needed for answer-based metrics.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Per-metric and per-language differences between two runs (b - a).
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        docs: Option<PathBuf>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Print the header of an encoder checkpoint.
    InspectCheckpoint {
        /// Checkpoint file.
        path: PathBuf,
    },
}

/// Config keys each subcommand reads; a trailing dot selects a whole section.
fn keys_read(command: &str) -> &'static [&'static str] {
    const PIPELINE: &[&str] = &[
        "seed",
        "corpus.",
        "encoder.",
        "retrieval.",
        "lexical.k1",
        "lexical.b",
        "teacher.",
        "distill.",
        "pipeline.",
    ];
    match command {
        "synth" => &["seed", "synth."],
        "ingest" => &["corpus."],
        "fit-teacher" => &["corpus.", "teacher."],
        "bootstrap" | "pipeline" => PIPELINE,
        "retrieve" => &["corpus.", "retrieval.", "lexical."],
        "rerank" => &["corpus.", "teacher.instruction"],
        "eval" | "compare" => &["corpus."],
        _ => &[],
    }
}

fn keys_help(command: &str) -> String {
    if command == "iterate" {
        return "Config keys read: all keys of the state directory's config.snapshot \
                (--config, --set and --seed are ignored)."
            .into();
    }
    let patterns = keys_read(command);
    if patterns.is_empty() {
        return "Config keys read: none.".into();
    }
    let keys: Vec<String> = Config::keys()
        .into_iter()
        .filter(|k| {
            patterns
                .iter()
                .any(|p| if p.ends_with('.') { k.starts_with(p) } else { k == p })
        })
        .collect();
    format!("Config keys read:\n  {}", keys.join("\n  "))
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = keys_help(&name);
        cmd = cmd.mut_subcommand(&name, |s| s.after_help(help));
    }
    cmd
}

/// Bad arguments or inputs; exits with 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<umr_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("UMR_LOG").init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(g: &Global) -> anyhow::Result<Config> {
    let mut cfg = match &g.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let mut overrides = Vec::new();
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = g.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    cfg.apply(&overrides)?;
    Ok(cfg)
}

fn config_given(g: &Global) -> bool {
    g.config.is_some() || !g.overrides.is_empty() || g.seed.is_some()
}

fn ingest<T: umr_core::corpus::Record>(path: &Path, cfg: &Config) -> anyhow::Result<Records<T>> {
    let records = Records::<T>::ingest(path, &cfg.corpus)?;
    if !records.rejects.is_empty() {
        log::warn!("{}: {} line(s) rejected", path.display(), records.rejects.len());
    }
    Ok(records)
}

fn load_corpus(args: &CorpusArgs, cfg: &Config) -> anyhow::Result<(DocumentCollection, QuerySet)> {
    Ok((ingest(&args.docs, cfg)?, ingest(&args.queries, cfg)?))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn print_iterations(records: &[IterationRecord], format: Format) {
    match format {
        Format::Jsonl => records.iter().for_each(print_json),
        Format::Table => {
            println!(
                "{:>4} {:<9} {:>7} {:>7} {:>7} {:>10}  checkpoint",
                "iter", "retriever", "batches", "dropped", "padded", "loss"
            );
            for r in records {
                let loss = r.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
                println!(
                    "{:>4} {:<9} {:>7} {:>7} {:>7} {:>10}  {}",
                    r.iteration, r.retriever, r.batches, r.dropped, r.padded, loss, r.checkpoint
                );
            }
        }
    }
}

fn eval_context<'a>(
    queries: &'a QuerySet,
    docs: Option<&'a DocumentCollection>,
    cfg: &'a Config,
    metrics: &MetricArgs,
) -> anyhow::Result<EvalContext<'a>> {
    if metrics.needs_docs() && docs.is_none() {
        return Err(usage("answer-based metrics need --docs"));
    }
    let mut ctx = EvalContext::new(queries, docs, &cfg.corpus);
    if !metrics.lang.is_empty() {
        ctx.languages = Some(metrics.lang.iter().map(|l| Lang::new(l.as_str())).collect::<BTreeSet<_>>());
    }
    Ok(ctx)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.threads)
            .build_global()
            .context("setting up the worker pool")?;
    }
    let format = g.format;
    match &cli.command {
        Command::Synth { out } => {
            let cfg = load_config(g)?;
            let synth = generate(&cfg.synth, cfg.seed)?;
            emit(&synth, out)?;
            let cross = synth.info.iter().filter(|i| i.cross_lingual).count();
            let summary = serde_json::json!({
                "out": out,
                "documents": synth.docs.len(),
                "queries": synth.queries.len(),
                "cross_lingual_queries": cross,
                "languages": cfg.synth.num_languages,
            });
            match format {
                Format::Jsonl => print_json(&summary),
                Format::Table => println!(
                    "wrote {} documents and {} queries ({cross} cross-lingual) to {}",
                    synth.docs.len(),
                    synth.queries.len(),
                    out.display()
                ),
            }
        }
        Command::Ingest { corpus, reject_dir } => {
            let cfg = load_config(g)?;
            let (docs, queries) = load_corpus(corpus, &cfg)?;
            if let Some(dir) = reject_dir {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                docs.write_reject_report(&dir.join("docs.rejects.tsv"))?;
                queries.write_reject_report(&dir.join("queries.rejects.tsv"))?;
            }
            let rows = [
                ("documents", &corpus.docs, docs.len(), docs.rejects.len()),
                ("queries", &corpus.queries, queries.len(), queries.rejects.len()),
            ];
            for (kind, path, kept, rejected) in rows {
                match format {
                    Format::Jsonl => print_json(&serde_json::json!({
                        "kind": kind, "path": path, "accepted": kept, "rejected": rejected,
                    })),
                    Format::Table => println!("{kind:<10} {kept:>8} accepted {rejected:>6} rejected  {}", path.display()),
                }
            }
        }
        Command::FitTeacher { corpus, out } => {
            let cfg = load_config(g)?;
            let (docs, queries) = load_corpus(corpus, &cfg)?;
            let teacher = LexicalTeacher::fit(&docs, &queries, &cfg.corpus, &cfg.teacher)?;
            teacher.save(out)?;
            println!(
                "teacher with {} tokens ({} query tokens) written to {}",
                teacher.vocab_size(),
                teacher.query_vocab_size(),
                out.display()
            );
        }
        Command::Bootstrap { state, corpus, force } => {
            let cfg = load_config(g)?;
            let (docs, queries) = load_corpus(corpus, &cfg)?;
            let p = Pipeline::bootstrap(state, &cfg, docs, queries, *force)?;
            print_iterations(&p.state().iterations, format);
        }
        Command::Iterate { state, iteration, force } => {
            if config_given(g) {
                log::warn!("iterate uses the config snapshot in {}; --config, --set and --seed are ignored", state.display());
            }
            let mut p = Pipeline::open(state)?;
            let t = iteration.unwrap_or(p.state().iteration + 1);
            let record = p.run_iteration_at(t, *force)?;
            print_iterations(&[record], format);
        }
        Command::Pipeline {
            state,
            docs,
            queries,
            force,
        } => {
            let exists = state.join(STATE_FILE).is_file();
            let mut p = if exists && !force {
                let p = Pipeline::open(state)?;
                if config_given(g) && load_config(g)? != *p.config() {
                    return Err(usage(format!(
                        "the config differs from the snapshot in {}; pass --force to start over",
                        state.display()
                    )));
                }
                p
            } else {
                let cfg = load_config(g)?;
                let (Some(docs), Some(queries)) = (docs, queries) else {
                    return Err(usage("--docs and --queries are needed to start a new run"));
                };
                let corpus = CorpusArgs {
                    docs: docs.clone(),
                    queries: queries.clone(),
                };
                let (d, q) = load_corpus(&corpus, &cfg)?;
                Pipeline::bootstrap(state, &cfg, d, q, *force)?
            };
            let already = p.state().is_complete();
            p.run_to_completion()?;
            print_iterations(&p.state().iterations, format);
            if format == Format::Table {
                if already {
                    println!("complete: nothing to do");
                } else {
                    println!("complete after {} iteration(s)", p.state().iteration);
                }
            }
        }
        Command::Retrieve {
            corpus,
            checkpoint,
            lexical,
            k,
            out,
        } => {
            let mut cfg = load_config(g)?;
            if let Some(k) = k {
                cfg.set("retrieval.k", &k.to_string())?;
            }
            let (docs, queries) = load_corpus(corpus, &cfg)?;
            let lists: Vec<RankedList> = if *lexical {
                let index = Bm25Index::build(&docs, &cfg.corpus);
                queries
                    .iter()
                    .map(|q| lexical_retrieve(&index, q, cfg.retrieval.k, &cfg.lexical))
                    .collect::<Result<_, _>>()?
            } else {
                let path = checkpoint.as_ref().expect("clap requires --checkpoint");
                let (params, _) = load_checkpoint(path)?;
                if params.feature_dim() != cfg.corpus.feature_dim {
                    bail!(usage(format!(
                        "{} has feature dimension {} but corpus.feature_dim is {}",
                        path.display(),
                        params.feature_dim(),
                        cfg.corpus.feature_dim
                    )));
                }
                let fz = Featurizer::new(cfg.corpus.clone());
                dense_retrieve(&params, &fz, &docs, &queries, cfg.retrieval.k)?.0
            };
            write_run(out, &lists, "retriever")?;
            println!("{} ranked lists written to {}", lists.len(), out.display());
        }
        Command::Rerank {
            corpus,
            teacher,
            run,
            out,
        } => {
            let cfg = load_config(g)?;
            let (docs, queries) = load_corpus(corpus, &cfg)?;
            let model = LexicalTeacher::load(teacher)?;
            let lists = read_run(run)?;
            let template = InstructionTemplate::new(&cfg.teacher.instruction, &cfg.corpus.languages)?;
            let ctx = RerankContext {
                corpus: &cfg.corpus,
                template: &template,
                docs: &docs,
            };
            let reranked = rerank_all(&model, &queries, &lists, &ctx)?;
            write_run(out, &reranked, "teacher")?;
            println!("{} reranked lists written to {}", reranked.len(), out.display());
        }
        Command::Eval {
            run,
            queries,
            docs,
            metrics,
        } => {
            let cfg = load_config(g)?;
            let queries: QuerySet = ingest(queries, &cfg)?;
            let docs: Option<DocumentCollection> = docs.as_ref().map(|d| ingest(d, &cfg)).transpose()?;
            let ctx = eval_context(&queries, docs.as_ref(), &cfg, metrics)?;
            let lists = read_run(run)?;
            let reports = metrics
                .specs()
                .into_iter()
                .map(|s| ctx.evaluate(&lists, s))
                .collect::<Result<Vec<_>, _>>()?;
            match format {
                Format::Table => print!("{}", render_table(&reports)),
                Format::Jsonl => reports.iter().for_each(|r| println!("{}", r.to_json())),
            }
        }
        Command::Compare {
            run_a,
            run_b,
            queries,
            docs,
            metrics,
        } => {
            let cfg = load_config(g)?;
            let queries: QuerySet = ingest(queries, &cfg)?;
            let docs: Option<DocumentCollection> = docs.as_ref().map(|d| ingest(d, &cfg)).transpose()?;
            let ctx = eval_context(&queries, docs.as_ref(), &cfg, metrics)?;
            let deltas = compare_runs(&ctx, &read_run(run_a)?, &read_run(run_b)?, &metrics.specs())?;
            match format {
                Format::Table => print!("{}", render_deltas(&deltas)),
                Format::Jsonl => deltas.iter().for_each(print_json),
            }
        }
        Command::InspectCheckpoint { path } => {
            let info = inspect_checkpoint(path)?;
            let record = serde_json::json!({
                "path": path,
                "version": info.version,
                "dim": info.dim,
                "feature_dim": info.feature_dim,
                "init_seed": info.init_seed,
                "step": info.step,
                "lr": info.hyper.lr,
                "beta1": info.hyper.beta1,
                "beta2": info.hyper.beta2,
                "eps": info.hyper.eps,
                "weight_decay": info.hyper.weight_decay,
                "fingerprint": format!("{:016x}", info.fingerprint),
            });
            match format {
                Format::Jsonl => print_json(&record),
                Format::Table => {
                    for (k, v) in record.as_object().expect("object") {
                        println!("{k:<13} {}", v.as_str().map_or(v.to_string(), str::to_string));
                    }
                }
            }
        }
    }
    Ok(())
}
