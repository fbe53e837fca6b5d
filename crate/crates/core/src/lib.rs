//! Multi-stream temporal convolutional networks for multi-label behavioral
//! context recognition from body-worn sensor windows.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays, deterministic RNG, Xavier init, blob I/O
//! - [`layers`]: differentiable ops (convolutions, dense, activations,
//!   pooling, dropout) plus finite-difference gradient checking
//! - [`objective`]: instance-weighted masked cross-entropy and regularizers
//! - [`metrics`]: balanced-accuracy scoring over partially labeled data
//! - [`model`]: the multi-stream network, fusion variants, checkpointing
//! - [`data`]: dataset schema, preprocessing, user-grouped splits, synthesis
//! - [`trainer`]: Adam loop, cross-validation driver, ablation harness

pub mod data;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;
