//! Dense tensors, a reverse-mode tape and the optimizer used for training.

mod adam;
mod flops;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamMoments};
pub use flops::{Bucket, BucketCount, FlopCounter};
pub use gradcheck::{assert_grad_close, finite_diff_grad, GradCheckReport};
pub use params::{BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
