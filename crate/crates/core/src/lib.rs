//! Toolkit for measuring the gap between what a decoder-only transformer
//! *knows* (information linearly recoverable from per-layer hidden states)
//! and what it *says* (accuracy of its direct token answers).
//!
//! Modules:
//! - [`store`]: the binary activation-dump format (`ACTD` + `.meta` sidecar)
//! - [`templates`]: prompt wrappers and the question file format
//! - [`probe`]: unsupervised PCA probes per layer and a linear SVM baseline
//! - [`expression`]: direct-answer evaluation (zero/few-shot, magical suffix,
//!   repeated sampling, option-likelihood ranking)
//! - [`stats`]: consistency, expected agreement and exact binomial tails
//! - [`vocab`]: KL dynamics of the vocabulary projection across checkpoints
//! - [`residual`]: residual-stream norm growth, adjacent-layer similarity
//!   and layer-redundancy analysis
//! - [`toy`]: a small pre-LN decoder-only transformer with backprop,
//!   decoding, training and layer surgery
//! - [`experiment`]: the synthetic single-choice task and the end-to-end
//!   pipeline that ties everything together on the toy model

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod experiment;
pub mod expression;
pub mod linalg;
pub mod probe;
pub mod residual;
pub mod stats;
pub mod store;
pub mod templates;
pub mod toy;
pub mod vocab;

pub use error::{Error, Result};
