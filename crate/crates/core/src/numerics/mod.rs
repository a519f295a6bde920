//! Dense tensors, a dynamic differentiation tape, transformer building blocks
//! and the Adam optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnMask, FlopCounter, Gradients, Graph, Stage, Var, LAYER_NORM_EPS};
pub use layers::{attention, Attention, FeedForward, LayerNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{truncated_normal, ParamId, ParamStore, Parameter, INIT_STD};
pub use tensor::{Real, Tensor};
