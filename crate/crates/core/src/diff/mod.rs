//! Differentiation substrate: tensors, a reverse-mode tape, dense layers,
//! the Adam optimizer, schedules and a differentiable 3×3 SVD.

pub mod adam;
pub mod nn;
pub mod ops;
pub mod params;
pub mod schedule;
pub mod svd;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, Adam};
pub use nn::{mlp_forward, LayerInit, LayerSpec, Mlp};
pub use ops::{silu, silu_derivative, Activation};
pub use params::{Binding, ParamStore, PARAMS_FORMAT_VERSION};
pub use schedule::{cosine_lr, teacher_forcing_interval};
pub use svd::{svd3, svd3_rotation_vjp, svd3_vjp, Svd3, SvdGradient, SVD_EPSILON};
pub use tape::{BackwardCtx, BackwardOp, Gradients, Tape, Var};
pub use tensor::Tensor;
