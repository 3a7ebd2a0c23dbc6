//! Differentiable operators, losses, the Adam optimizer and a gradient-check harness.
//!
//! Layers cache what they need during `forward` and consume it in `backward`.
//! Everything runs single-threaded on the calling thread; matrix products go
//! through `matrixmultiply` with a fixed reduction order, so results are
//! bit-reproducible for identical inputs.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod module;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_module_gradients, flatten_grads, flatten_params, grad_check, grad_check_with, load_params, GradCheckConfig, GradCheckReport, ModuleGradReport};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, GlobalAvgPool, Relu};
pub use module::{Mode, Module, Param};
pub use ops::{conv2d_output_shape, softmax_axis, ConvGeometry};
pub use optim::Adam;
pub use tensor::{Tensor, TensorSpec};
