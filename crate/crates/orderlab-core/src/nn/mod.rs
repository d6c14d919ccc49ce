//! Dense network kernel: MLPs with analytic backward passes, the
//! adaptive-moment optimizer and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod mlp;

pub use adam::AdamState;
pub use gradcheck::grad_check;
pub use mlp::{Activation, ForwardCache, GradBuf, Mlp};
