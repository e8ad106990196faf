//! Federated low-rank preference fine-tuning over evolving personal
//! knowledge graphs, at desk scale.
//!
//! The pipeline turns recommendation dialogues (or star ratings) into
//! per-user knowledge graphs and prompt/completion/label examples, trains a
//! small preference model with a low-rank adapter under the
//! Kahneman-Tversky objective, federates the adapter across simulated
//! clients and scores recommendations with ranking and set metrics.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod federation;
pub mod io;
pub mod learner;
pub mod manifest;
pub mod pipeline;
pub mod pkg;
pub mod prompt;
pub mod synth;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/pkg.md")]
    struct Pkg;
    #[doc = include_str!("../../../book/src/prompts.md")]
    struct Prompts;
    #[doc = include_str!("../../../book/src/dataset.md")]
    struct Dataset;
    #[doc = include_str!("../../../book/src/synthesis.md")]
    struct Synthesis;
    #[doc = include_str!("../../../book/src/learner.md")]
    struct Learner;
    #[doc = include_str!("../../../book/src/federation.md")]
    struct Federation;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/benchmark.md")]
    struct Benchmark;
}
