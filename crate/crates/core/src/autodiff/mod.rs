//! Minimal reverse-mode differentiation core.
//!
//! Provides exactly the layer set the toy encoder needs (dense, conv2d,
//! relu, batchnorm2d, 2x2/global average pooling, row L2 normalization),
//! a Wengert tape with [`backward`], SGD with momentum, and a
//! finite-difference [`grad_check`]. Training runs at f32; the same code
//! instantiates at f64 for gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod params;
mod sgd;
mod tape;

pub use gradcheck::{compare_grads, finite_difference_grads, grad_check, GradCheckReport, Program};
pub use layers::{BnKind, LayerSpec, Mode, BN_RUNNING_MOMENTUM, BN_VAR_EPS, L2_NORM_EPS};
pub use params::ParameterSet;
pub use sgd::sgd_update;
pub use tape::{apply_layer, backward, Tape};
