//! Dense tensors, a dynamic autodiff tape, parameter storage and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod lftd;
mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use layers::{group_normalize, Conv2d, GroupNorm, Linear, Mlp};
pub use optim::Adam;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
