//! Bi-temporal semantic change detection.
//!
//! A dual-branch Siamese encoder (a trainable residual CNN plus a frozen
//! prior encoder) feeds gated shallow/deep fusion, a Gaussian-smoothed
//! projection of the prior's shallow features, a bidirectional temporal
//! module for the change branch, and four task heads (two semantic maps,
//! change, boundary). Training, evaluation and the synthetic dataset live
//! alongside the network so the whole pipeline runs on a CPU.

pub mod btam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod heads;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Result, ScdError};
pub use graph::{Graph, Mode, Var};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{FeatureMap, Scalar, Tensor};
