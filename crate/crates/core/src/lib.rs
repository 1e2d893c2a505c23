//! Truncated path signatures of piecewise-linear paths, channel-convolution
//! path encoders, and the composed convolution + signature + network model.
//!
//! Module map:
//!
//! - [`tensor`]: truncated tensor algebra, words, shuffles, linear functionals
//! - [`signature`]: exact signatures via Chen products, streams, gradients
//! - [`conv`]: channel convolution, invertible encoding, feature counts
//! - [`nn`]: dense networks, losses, Adam
//! - [`pipeline`]: signature classifiers and the end-to-end CNN-Sig model
//! - [`datagen`]: seeded GARCH, directed-chain and Black-Scholes generators
//! - [`metrics`]: confusion matrices, accuracy, MAE / R², QQ points

pub mod conv;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod signature;
pub mod tensor;

pub use error::{Error, Result};
