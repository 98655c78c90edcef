//! Dense tensors, a reverse-mode tape, Adam, seeded randomness and a
//! finite-difference gradient checker.

mod dense;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;

pub use dense::{matmul, softmax_rows, Tensor};
pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use rng::{rng_draw, DrawKind, RngStream};
pub use tape::{gelu, gelu_grad, Axis, Gradients, Tape, Var};
