//! Recurrent predictive-coding convolutional networks, the illusory-contour
//! stimulus set used to probe them, and the measurements taken on them.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod stimuli;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
