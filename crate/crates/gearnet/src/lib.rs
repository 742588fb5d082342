//! # gearnet
//!
//! Bilateral training for weakly supervised domain adaptation, at desk scale.
//!
//! The setting: a *source* domain with noisy labels and a *target* domain with
//! no labels at all. Two models are trained in alternation, a forward model on
//! the noisy source and a backward model on pseudo-labeled target data, and
//! each training step is regularized by a symmetric-KL *guide* loss that pulls
//! the training model's predictions on the opposite domain toward the frozen
//! dual model's. Everything runs on plain `f64` buffers: the crate carries its
//! own reverse-mode tape, synthetic shifted-domain generators, label-noise
//! models, three backbone objectives, and a seeded experiment harness that
//! emits CSV metrics.
//!
//! Module map:
//! - [`tensor`]: flat-tape reverse-mode autodiff and the SGD-with-momentum step
//! - [`data`]: synthetic domain pairs, label-noise injection, batching
//! - [`losses`]: cross-entropy, clamped KL, symmetric KL, total-loss composition
//! - [`backbone`]: Standard / Co-teaching / DANN training objectives
//! - [`engine`]: the bilateral loop (pretrain, backward step, forward step)
//! - [`harness`]: experiment configs, seeded repeats, CSV metrics

pub mod backbone;
pub mod data;
pub mod engine;
mod error;
pub mod guide;
pub mod harness;
pub mod losses;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
