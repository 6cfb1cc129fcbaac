//! Mixing a frozen model's own layers as routed experts during
//! parameter-efficient fine-tuning.
//!
//! The crate provides:
//! * deterministic dense kernels, activations, and a finite-difference
//!   gradient harness ([`numerics`]);
//! * a residual backbone with low-rank adapters and synthetic pretraining
//!   ([`backbone`]);
//! * the layer-mixing transform: routers, top-k gating, batch aggregation,
//!   load balancing, and selection telemetry ([`molex`]);
//! * fine-tuning loops and evaluation protocols ([`training`]);
//! * unrolling of linear mixed stacks into weighted ensembles of layer
//!   compositions, with robustness certificates ([`ensemble`]).
//!
//! Numeric kernels are generic over the scalar type; the model stack pins
//! f64 through the aliases below.

pub mod backbone;
pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod molex;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Concrete scalar used by the model stack.
pub type Scalar = f64;

/// Concrete matrix used by the model stack.
pub type Mat = numerics::Matrix<f64>;

/// Single-precision alias for callers that want the generic kernels at f32.
pub type Mat32 = numerics::Matrix<f32>;
