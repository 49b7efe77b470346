//! Poisoning attacks against fair representation learning.
//!
//! The attack maximizes a Fisher-discriminant separability score of the
//! sensitive attribute on target representations by crafting sparse,
//! box-constrained feature perturbations whose training gradients match the
//! score's ascent direction (elastic-net gradient matching solved with ISTA).

pub mod attack;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod ndcore;
pub mod objective;
pub mod pipeline;
pub mod theory;
pub mod victims;

#[cfg(feature = "oracles")]
pub mod oracles;

pub use error::{Error, Result};
pub use ndcore::{Matrix, Tape, Var};
