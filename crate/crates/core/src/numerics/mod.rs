//! Dense tensors, reverse-mode differentiation and the layer primitives the
//! network is built from. All feature maps use the `[channels, time,
//! frequency]` layout.

pub mod conv;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, ParamCheck};
pub use layers::{apply_bn_updates, Graph, Mode};
pub use norm::{BatchStats, BN_EPS, BN_MOMENTUM};
pub use params::ParamStore;
pub use tape::{backward, BackwardCtx, Tape, Var};
pub use tensor::Tensor;
