//! Reverse-mode automatic differentiation on a tape of dense `f64` arrays.

mod conv;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use conv::{conv1d_backward, conv1d_forward, ConvShape, Padding};
pub use gradcheck::{
    check_gradients, loss_fn, value_and_grad, value_only, EntryCheck, GradCheckOptions, GradCheckReport, LossFn,
};
pub use optim::{clip_global_norm, Adam};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
