//! Feature attribution for small attention networks.
//!
//! The crate pairs layer-wise relevance propagation (bilinear and softmax rules,
//! plus the value-only treatment of attention) with reference explainers
//! (exact leave-one-out, integrated gradients, attention rollout) and
//! perturbation-based faithfulness metrics. Models are trained from scratch
//! on MNIST or on a synthetic keyword task.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod relprop;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
