//! Contrastive alignment of frozen vision and language embeddings.
//!
//! Both encoders are frozen and their features precomputed into feature
//! stores. Only a text-side MLP projection is trained, against a symmetric
//! InfoNCE loss; vision features pass through unchanged and are
//! L2-normalized. The crate also carries the evaluation harness (zero-shot
//! classification, retrieval, Winoground, caption choice) and the
//! seen/unseen class-split benchmark protocol.

pub mod checkpoint;
pub mod class_reps;
pub mod contrastive;
pub mod embed;
pub mod error;
pub mod eval;
pub mod optimizer;
pub mod projection;
pub mod seed;
pub mod store;
pub mod trainer;
pub mod tsv;
pub mod viterb;

pub use error::{Error, Result};

/// Scalar type for network math: `f32` for training, `f64` for gradient
/// checks.
pub trait Float: ndarray::NdFloat + num_traits::FromPrimitive + Default {}

impl<T: ndarray::NdFloat + num_traits::FromPrimitive + Default> Float for T {}
