//! Unsupervised multilingual dense retrieval.
//!
//! The crate trains a dual-encoder retriever without any paired query/document
//! data. A query-likelihood teacher reranks the retriever's candidates, the
//! teacher's distribution is distilled into the student with a KL objective
//! (documents of other queries in the batch act as negatives), and the loop is
//! repeated with a refreshed index.
//!
//! Module map:
//!
//! - [`corpus`]: record ingest, tokenization, hashed n-gram features.
//! - [`encoder`]: the linear dual encoder, AdamW, checkpoints.
//! - [`index`]: exact top-k inner-product search.
//! - [`teacher`]: query-likelihood reranking and the lexical likelihood model.
//! - [`distill`]: batch assembly, softmaxes, KL loss, analytic gradients, training.
//! - [`pipeline`]: bootstrap and iterative retrieve, rerank, distill rounds.
//! - [`evalkit`]: run files, recall metrics, BM25 baseline.
//! - [`synthgen`]: seeded synthetic multilingual benchmark.

pub mod config;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod hashing;
pub mod index;
pub mod pipeline;
pub mod synthgen;
pub mod teacher;

pub use config::Config;
pub use error::{Error, Result};
