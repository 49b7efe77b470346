//! Dense matrices and a small reverse-mode differentiation tape.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::{Lu, Matrix, SINGULAR_THRESHOLD};
pub(crate) use tape::sigmoid;
pub use tape::{Gradients, Tape, Var};
