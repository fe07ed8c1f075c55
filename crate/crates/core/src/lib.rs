//! Allocation-only core of the post-hoc pseudo-OOD regularization pipeline.
//!
//! Everything here is a pure function of its inputs and an explicitly passed
//! random generator: the attention encoder and its hand-written backward
//! pass, tied-covariance Mahalanobis scoring, attention-weighted keyword
//! selection with context masking, the composite fine-tuning objective, the
//! confidence estimators, and the rank-based detection metrics. File formats,
//! the CLI and orchestration live in the `poore` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod encoder;
pub mod estimators;
pub mod keywords;
pub mod linalg;
pub mod losses;
pub mod mahalanobis;
pub mod metrics;
pub mod seed;
pub mod training;

pub use data::{Dataset, LabeledExample, Split, SynthConfig, TokenId, TokenSequence, Vocabulary};
pub use encoder::{EncoderConfig, EncoderOutput, ModelState};
pub use keywords::{KeywordCriterion, KeywordSet, MaskingConfig};
pub use losses::LossWeights;
pub use mahalanobis::MahalanobisParams;
