//! Dense `f64` tensors, reverse-mode differentiation, seeded randomness,
//! AdamW and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{
    check_grad, check_grad_inputs, check_grad_params, relative_error, DEFAULT_STEP,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
