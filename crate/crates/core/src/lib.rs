//! Meme-understanding classification experiments.
//!
//! Three experiment families share one data model:
//!
//! * EXP1 prompts a vision-language backend with zero-shot, chain-of-thought,
//!   and few-shot prompts ([`prompting`], [`pipeline::run_exp1`]).
//! * EXP2 hands adapter training to the backend and then evaluates it
//!   zero-shot ([`backends::FineTuneConfig`], [`pipeline::run_exp2`]).
//! * EXP3 generates textual explanations of each meme and trains a text
//!   classifier on them ([`pipeline::generate_explanations`],
//!   [`pipeline::run_covexfil`]).
//!
//! Everything is scored with support-weighted F1 ([`metrics`]) and can be
//! aggregated into results tables with SOTA deltas and relative gains
//! ([`analysis`]). The [`backends::MockBackend`] makes every flow run
//! offline and deterministically.

pub mod analysis;
pub mod backends;
pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod synthetic;
pub mod text;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Ingest(#[from] corpus::IngestError),
    #[error(transparent)]
    Prompt(#[from] prompting::PromptError),
    #[error(transparent)]
    Backend(#[from] backends::BackendError),
    #[error(transparent)]
    Classifier(#[from] backends::ClassifierError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
