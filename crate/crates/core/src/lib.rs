//! Desk-scale deep-RL training library built around an adaptive,
//! Bellman-derived cap on the cosine similarity of consecutive value-network
//! representations, with DQN/DPG trainers, baseline regularizers, and the
//! rank/bound/approximation-error metrics to observe them.

pub mod adam;
pub mod agents;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod replay;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Tensor, NORM_FLOOR};
