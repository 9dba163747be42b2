//! Tensor autodiff, layers, losses and parameter storage for the
//! segmentation and matching networks.

pub mod init;
pub mod loss;
pub mod ops;
pub mod params;
pub mod var;

pub use params::{accumulate_grads, Binding, GradMap, Param, ParamSet};
pub use var::{backward, Var};
