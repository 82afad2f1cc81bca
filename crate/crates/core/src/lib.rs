//! Federated training of a 1-D CNN online-signature verifier.
//!
//! The network, its gradients, the optimizers, and the FederatedAveraging
//! protocol are all implemented directly on a small dense [`Tensor`] type.
//!
//! - [`layers`]: conv1d, batch norm, ReLU, max-pool, linear, softmax cross-entropy
//! - [`model`]: the three-block verification network and its parameters
//! - [`dataset`]: SVC-2004 parsing, synthetic corpora, preprocessing, splits
//! - [`optim`] and [`train`]: SGD, Adamax, mini-batch training
//! - [`federated`]: agents, aggregation, the iteration loop
//! - [`metrics`]: scores, ROC, EER, accuracy, instance summaries
//! - [`checkpoint`]: binary parameter files

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod federated;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Batch, Gradients, ModelConfig, ModelParams};
pub use tensor::Tensor;
