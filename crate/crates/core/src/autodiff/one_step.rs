//! Gradient of a layer's reconstruction error w.r.t. the layer above.
//!
//! The error of layer `n` is `ε_n = mean((e_n − d_n)²)` per batch item with
//! `d_n = f(W_b ⋆ᵀ e_{n+1} + b)`. Its gradient w.r.t. `e_{n+1}` is obtained by
//! running the reverse-mode rules of the three ops in that chain (mean
//! squared error, activation, transpose convolution) without recording a
//! tape, since the forward values are already held in the network state.

use super::rules;
use crate::error::Result;
use crate::tensor::{Activation, ConvSpec, Tensor};

/// `∂ε/∂e_upper` for every batch item, each item using its own error mean.
///
/// * `lower`: the representation being predicted, `(B, C, H, W)`.
/// * `prediction`: the decoder output `d` for `lower`, same shape.
/// * `weight`/`spec`: the decoder's transpose-convolution weight and the
///   forward convolution spec it is the adjoint of.
/// * `activation`: the decoder's output nonlinearity.
pub fn one_step_error_gradient(
    lower: &Tensor,
    prediction: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    activation: Activation,
) -> Result<Tensor> {
    lower.expect_same_shape("one_step_error_gradient", prediction)?;
    // Per-item mean: seeding the batch-wide mse rule with B makes the 1/(B·K)
    // factor collapse to 1/K for each item.
    let d_pred = rules::mse(prediction, lower, lower.batch() as f32)?;
    let d_pre = rules::activation(&d_pred, prediction, activation)?;
    rules::conv_transpose2d_input(&d_pre, weight, spec)
}
