//! Convolutional mixture density recurrent networks for predicting the next
//! position of a device from a sequence of WiFi RSSI fingerprints.
//!
//! The crate is layered bottom-up: [`tensor`] and [`graph`] provide dense
//! arrays and reverse-mode differentiation, [`layers`] the convolutional,
//! dense and recurrent building blocks, [`mdn`] the mixture-density head,
//! [`training`] model assembly and optimization, [`data`] trajectory
//! ingestion and synthesis, and [`cli`] the experiment harness.

pub mod error;
pub mod gradcheck;
pub mod cli;
pub mod data;
pub mod graph;
pub mod kv;
pub mod layers;
pub mod mdn;
pub mod svg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
