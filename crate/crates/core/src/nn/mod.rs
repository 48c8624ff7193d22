//! Differentiable building blocks for both network stages: positional
//! encoding, single-head attention, shared MLPs and row softmax, evaluated on
//! a reverse-mode tape in 64-bit floating point.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{
    attention, mlp_forward, positional_encode, Activation, AttentionParams, Init, Linear, MlpParams, LEAKY_SLOPE,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Checkpoint, Matrix, ParamGrads, ParamId, ParamStore};
pub use tape::{smooth_l1, softmax_rows, Gradients, Graph, Var};
