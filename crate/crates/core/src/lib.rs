//! Multiway numerical analysis: dense tensors, t-product algebra, penalized
//! least squares, constrained PARAFAC, EEG/fMRI inverse solvers, tensor
//! Granger causality and coupled matrix-tensor fusion.

pub mod error;
pub mod fusion;
pub mod granger;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod parafac;
pub mod penalties;
pub mod synth;
pub mod talgebra;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use tensor::{concatenate, contract, contract_unfolded, ComplexTensor, DenseTensor, KruskalModel};
