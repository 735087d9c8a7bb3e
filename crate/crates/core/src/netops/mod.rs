//! Differentiable building blocks: a reverse-mode tape over 2-D arrays,
//! dense/convolutional/attention layers, straight-through Gumbel-max
//! selection, losses, Adam and checkpoint persistence.

pub mod checkpoint;
pub mod graph;
pub mod gumbel;
pub mod layers;
pub mod loss;
pub mod params;

pub use checkpoint::Checkpoint;
pub use graph::{ConvGeom, Graph, Var};
pub use gumbel::{gumbel_noise, gumbel_select, uniform_one_hot, SelectMode};
pub use layers::{Activation, ConvStack, Linear, Mlp, MlpSpec, MultiheadAttention, FRAME_SIZE, MAP_SIZE};
pub use loss::{bce, bce_array, mse, mse_value};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
