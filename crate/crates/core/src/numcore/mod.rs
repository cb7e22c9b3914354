//! Dense `f64` matrices, a seeded RNG, and a reverse-mode autodiff tape.

mod mat;
mod rng;
mod tape;

pub use mat::Mat;
pub use rng::Rng;
pub use tape::{Tape, Var};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
