//! Learning classifiers from long-tailed data with noisy labels.
//!
//! The pipeline warms a network up with a class-balanced regularizer,
//! splits the training set into a clean labeled part and an unlabeled part
//! by fitting a two-component loss mixture per observed class, estimates
//! which classes the model over-predicts, and then trains semi-supervised
//! with a cross-entropy whose competing logits are reweighted by that bias.
//!
//! Modules map onto the stages: [`datagen`] builds synthetic benchmarks,
//! [`net`] holds the classifier and losses, [`gmm`] and [`cass`] do sample
//! selection, [`bias`] turns predictions into rebalancing weights, [`ssl`]
//! builds mixed batches, [`trainer`] runs the whole schedule and
//! [`harness`] evaluates and exports results.

pub mod bias;
pub mod cass;
pub mod datagen;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod harness;
pub mod matrix;
pub mod net;
pub mod rng;
pub mod selftest;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;

// Chapters of the guide in `book/` are compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/selection.md")]
    pub struct Selection;
    #[doc = include_str!("../../../book/src/bias.md")]
    pub struct Bias;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
}
