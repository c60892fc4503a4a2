//! Private neural-network inference and training with linear blinding.
//!
//! Linear layers run on an untrusted accelerator over secret linear
//! combinations of the inputs plus Gaussian noise; all nonlinear work and all
//! secrets stay in a trusted context. Weight gradients are recovered from
//! coded products through a public coefficient matrix.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grad_codec;
pub mod io;
pub mod leakage;
pub mod linalg;
pub mod masking;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BilinearOp, Tensor};
