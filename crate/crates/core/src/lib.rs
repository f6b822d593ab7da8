//! Gated global-attention adapters, multi-perspective heads and ranking
//! objectives for image–text retrieval, together with a frozen toy backbone, a
//! seeded synthetic corpus and an evaluation harness small enough to check
//! every gradient against finite differences.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases below
//! pin the double-precision instantiation used for training.

pub mod backbone;
pub mod diagnostics;
pub mod error;
pub mod g2a;
pub mod mpr;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod retrieval;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Var64 = Var<f64>;
