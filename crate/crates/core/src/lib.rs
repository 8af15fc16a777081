//! Self-supervised salient object detection.
//!
//! A dual-encoder, dual-decoder network learns a patch-wise classification
//! task by student-teacher distillation and patch contrast. Class activation
//! maps from that task, fused with edges gated by the dilated CAM, become the
//! pseudo labels that supervise the saliency decoder. No human annotation is
//! read during training.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pseudogt;
pub mod selfsup;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
