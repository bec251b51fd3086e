//! Histopathology image classification and attention-map toolkit.
//!
//! Everything is built on a small `f64` tensor library with reverse-mode
//! automatic differentiation: a configurable CNN backbone with a
//! concat-pool head, Adam training with binary cross-entropy, LC25000-style
//! dataset splitting, a seeded augmentation pipeline, the five standard
//! binary metrics including AUROC, and GradCAM / SmoothGrad attention maps.
//!
//! With the `parallel` feature (default) independent work items — batch
//! items, SmoothGrad samples, image decodes — run on a rayon pool; without
//! it everything runs sequentially. Results are bit-identical either way.

pub mod augment;
pub mod datakit;
pub mod error;
pub mod exec;
pub mod explain;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Mode, NodeId, Tape, Tensor};
