//! Dual-branch vessel segmentation: a small reverse-mode tensor engine, the
//! channel-compressed Mamba global branch, coordinate-aware fusion blocks,
//! vessel metrics and a synthetic phantom generator.

pub mod bench;
pub mod cam;
pub mod ccmamba;
pub mod coords;
pub mod error;
pub mod grad_suite;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod real;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use nn::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
