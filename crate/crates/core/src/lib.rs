//! Latent-dynamic conditional random fields trained through a CTC loss.
//!
//! A linear chain of hidden states, partitioned into one block per label,
//! yields per-frame label marginals. Those marginals either feed the classic
//! frame-wise LDCRF likelihood (when every frame is labelled) or a CTC layer
//! that scores an unsegmented label sequence by summing over all its
//! alignments. The crate also ships the surrounding toolkit: a dataset
//! format, a synthetic data generator, k-fold evaluation and finite-difference
//! gradient checks.

pub mod chain;
pub mod ctc;
mod error;
pub mod features;
pub mod gradcheck;
pub mod ldcrf;
pub mod math;
pub mod seqdata;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{Checkpoint, FeatureConfig, HiddenStateMap, Model, ModelParams};
pub use seqdata::{Dataset, LabelId, LabelSet, Sequence};
