//! Reverse-mode automatic differentiation over dense `f64` tensors and the
//! momentum SGD optimizer used for all training.

mod conv;
mod gemm;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::Sgd;
pub use params::{ParamRecord, ParamSet, Parameter};
pub use tape::{sigmoid, softplus, Tape, Var};
pub use tensor::Tensor;
