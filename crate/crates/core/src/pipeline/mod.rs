//! Tokenizer, corpus handling, run configuration, checkpoints, the training
//! loop and report generation.

mod checkpoint;
mod config;
mod corpus;
mod report;
mod synth;
mod tokenizer;
mod train;

pub use checkpoint::{
    read_header, write_atomic, Checkpoint, CheckpointHeader, RngState, MAGIC, VERSION,
};
pub use config::{Precision, RunConfig};
pub use corpus::{
    load_documents, split_documents, tokenize_documents, unigram_perplexity, Batch, Batcher,
};
pub use report::{
    build_report, observations_from_run, observations_from_summaries, parse_observations_csv,
    read_observations_csv, scaling_csv, Observations, Report,
};
pub use synth::synthetic_corpus;
pub use tokenizer::Tokenizer;
pub use train::{
    load_model, load_tokenizer, prepare_data, train, validation_perplexity, EvalRecord, Objective,
    PreparedData, RunLock, RunOutcome, RunSummary, StepRecord, CHECKPOINT_FILE, EVALS_FILE,
    LOCK_FILE, METRICS_FILE, SUMMARY_FILE,
};
