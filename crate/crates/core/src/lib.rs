//! Knowledge-graph driven audit suites for machine unlearning.
//!
//! The crate turns a forget corpus and a retain corpus into an audit suite of
//! question/answer pairs, each anchored to a single fact that appears in the
//! forget corpus but not in the retain corpus, and then judges a model's
//! answers to those questions for residual knowledge.
//!
//! Stages, in order:
//!
//! - [`corpus`]: load documents and cut them into overlapping word windows.
//! - [`extraction`]: pull `(head, relation, tail)` triples out of each chunk.
//! - [`kg`]: fold triples into normalized graphs and compute the forget-only
//!   test graph by set difference.
//! - [`synthesis`]: prompt a generation model once per test fact and validate
//!   the returned QA JSON.
//! - [`evaluation`]: ask the model under test, score with ROUGE-L recall and
//!   entailment, count knowledge memorization cases.
//! - [`pipeline`]: run the stages with on-disk checkpoints under
//!   `runs/<run_id>/`.

pub mod client;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod extraction;
pub mod jsonl;
pub mod kg;
pub mod par;
pub mod pipeline;
pub mod synthesis;

pub use corpus::{ChunkConfig, ChunkStore, CorpusLabel, Document, TextChunk};
pub use kg::{Fact, GraphLabel, GraphStats, KnowledgeGraph};
