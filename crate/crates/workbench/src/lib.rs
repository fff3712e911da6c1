//! Workbench for building and stress-testing adaptive test-time defenses
//! against lp-bounded adversarial perturbations, at desk scale.
//!
//! The crate is organized along the pipeline: [`autodiff`] provides the
//! gradient machinery (including backward overrides for differentiable
//! approximations), [`models`] trains the small networks every defense needs,
//! [`attacks`] is the attacker toolbox, [`defenses`] implements the adaptive
//! test-time defenses behind one wrapper type, and [`harness`] runs the
//! evaluation checklist end to end.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod defenses;
pub mod harness;
pub mod error;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Derives an independent per-example RNG stream from a base seed.
pub fn stream_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
