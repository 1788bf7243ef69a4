//! Minimal differentiable tensor machinery used by the encoders and evaluator.

mod graph;
pub mod init;
mod mat;
mod optim;
mod params;

pub use graph::{sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use mat::Mat;
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
