//! Self-supervised representation learning with the view grouping loss.
//!
//! The crate is organized bottom-up:
//!
//! - [`vgl`]: the loss, its attention weights and closed-form gradients.
//! - [`baselines`]: triplet and single-positive softmax (NCE) losses.
//! - [`image`] and [`augment`]: PPM images, stochastic views, enlarged batches.
//! - [`encoder`], [`optim`], [`checkpoint`]: a small conv encoder with manual
//!   backpropagation, SGD with momentum and the binary checkpoint format.
//! - [`pretrain`]: the end-to-end training loop.
//! - [`analysis`]: loss-geometry curves over synthetic similarity rows.
//! - [`eval`]: retrieval and linear-probe evaluation of frozen embeddings.
//! - [`synth`]: synthetic lesion-like datasets and their manifests.
//! - [`gradcheck`]: finite-difference checks of every analytic gradient.

pub mod analysis;
pub mod augment;
pub mod baselines;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod vgl;

pub use error::{Error, Result};
pub use vgl::{EmbeddingBatch, GroupId, LossOutput, SimilarityMatrix, VglConfig};
