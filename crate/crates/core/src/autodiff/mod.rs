//! Reverse-mode differentiation, the one-step error gradient used by the
//! recurrent update, backpropagation through time, and Adam.

mod adam;
mod bptt;
mod gradcheck;
mod one_step;
pub mod rules;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheck};
pub use bptt::{bptt_loss, bptt_loss_frozen, Objective, Unrolled};
pub use one_step::one_step_error_gradient;
pub use tape::{Gradients, Tape, Var};
