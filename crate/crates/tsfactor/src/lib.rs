//! Low-rank factorized vector quantization of multivariate time series with
//! an autoregressive Transformer prior over the discrete codes.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`graph`], [`optim`]: dense tensors, reverse-mode autodiff
//!   over a fixed op set, Adam, and gradient checking;
//! - [`vq`]: the stage-one factorized vector-quantized autoencoder;
//! - [`ar`]: the stage-two decoder-only Transformer over token sequences;
//! - [`data`], [`checkpoint`]: ingestion, windowing, normalization,
//!   synthetic data, and binary persistence;
//! - [`pipeline`]: staged training, tokenization, generation, forecasting;
//! - [`metrics`]: the evaluation suite (Context-FID, correlational,
//!   discriminative, predictive, forecast errors);
//! - [`config`], [`cli`]: run configuration and the command-line surface.

pub mod ar;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
