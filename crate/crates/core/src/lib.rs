//! Modular co-attention on attention network (MCAoAN) for visual question
//! answering, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod registry;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Scalar, Tensor, Var};
