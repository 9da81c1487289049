//! Aggregate-posterior matching for autoencoders using Gaussian kernel
//! density estimates in latent space.
//!
//! The crate is organised bottom-up:
//!
//! - [`diff`]: a small reverse-mode autodiff graph over dense `f64` matrices.
//! - [`kde`]: Gaussian KDE log-densities, leave-one-out entropy and whitening.
//! - [`bandwidth`]: prior-aware bandwidth estimation and the bias correction
//!   `h_corr = h / sqrt(1 + h^2)`.
//! - [`nets`]: dense MLP encoder/decoder and Adam.
//! - [`trainer`]: the KDE-regularised autoencoder training loop.
//! - [`evalx`]: latent diagnostics and generation from the biased prior.
//! - [`datagen`]: synthetic datasets and an IDX loader.
//! - [`cli`]: the `avae` command-line front end.

pub mod bandwidth;
pub mod cli;
pub mod datagen;
pub mod diff;
pub mod evalx;
pub mod kde;
pub mod nets;
pub mod seed;
pub mod trainer;

pub use bandwidth::{bias_correct, estimate_h_opt, BandwidthConfig, BandwidthEstimate};
pub use datagen::Dataset;
pub use diff::{Bindings, GradientSet, Graph, NodeId};
pub use evalx::LatentReport;
pub use kde::{KdeModel, WhitenTransform};
pub use nets::{AdamState, MlpParams};
pub use trainer::{DataSplit, EpochLog, TrainConfig};
