//! Online knowledge distillation with a gated multi-branch native ensemble.
//!
//! A network is split into a shared low-level trunk and several identical
//! high-level branches, each with its own classifier. A small gate head
//! weights the branch logits into an ensemble teacher whose temperature
//! softened predictions are distilled back into every branch during a single
//! training phase. After training, branch 0 alone is the deployable model;
//! keeping all branches gives an ensemble.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod float;
pub mod flops;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use graph::{Graph, Mode, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
