//! Perplexity, multiple-choice priming, few-shot prompting, fine-tuning and
//! bias-score evaluation.

mod fewshot;
mod finetune;
mod icat;
pub mod io;
mod model;
mod perplexity;
mod scoring;
pub mod toy;

pub use fewshot::{build_fewshot_prompt, fewshot_eval, EvalConfig, FewShotReport, TaskResult};
pub use finetune::{finetune_classifier, FinetuneConfig, FinetuneReport};
pub use icat::icat;
pub use model::{continuation_log_probs, sequence_log_probs, LanguageModel};
pub use perplexity::{concat_documents, perplexity, PerplexityReport};
pub use scoring::{argmax, score_candidates, score_with_context, PromptTask, Scored, ScoringRule};
