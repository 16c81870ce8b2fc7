//! Clinical prompt pipeline: patient records with notes and vital-sign
//! series become chat-completion prompts, predictions come back from any
//! OpenAI-compatible endpoint, and results are scored with AUROC, average
//! precision and macro/micro F1.

pub mod aggregate;
pub mod budget;
pub mod error;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod runner;
pub mod serialize;
pub mod tasks;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/records.md")]
    mod records {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/serialization.md")]
    mod serialization {}
    #[doc = include_str!("../../../book/src/token-budget.md")]
    mod token_budget {}
    #[doc = include_str!("../../../book/src/client.md")]
    mod client {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
