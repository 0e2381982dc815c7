//! Minimal differentiable tensor machinery for the fusion network.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{ActivationPattern, Gradients, Graph, Var};
pub use params::{NetworkParams, ParamTensor};
