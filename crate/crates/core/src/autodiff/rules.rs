//! Vector-Jacobian products for each differentiable kernel.
//!
//! Shared by the tape and by the one-step error gradient, which chains a few
//! of these rules directly instead of recording a throwaway tape.

use crate::error::Result;
use crate::tensor::conv::{channel_sums, conv2d_weight_grad, conv_transpose2d_weight_grad};
use crate::tensor::{conv2d, conv_transpose2d, gemm, Activation, ConvSpec, Layout, Tensor};

/// Gradient w.r.t. the input of an activation, given its output.
pub fn activation(grad_out: &Tensor, output: &Tensor, kind: Activation) -> Result<Tensor> {
    grad_out.zip_map(output, |g, y| g * kind.derivative_from_output(y))
}

/// Gradient of `mean((a − b)²)` w.r.t. `a`, scaled by the upstream `seed`.
/// The gradient w.r.t. `b` is its negation.
pub fn mse(a: &Tensor, b: &Tensor, seed: f32) -> Result<Tensor> {
    let k = 2.0 * seed / a.len() as f32;
    a.zip_map(b, |x, y| k * (x - y))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_input(grad_out: &Tensor, weight: &Tensor, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<Tensor> {
    conv_transpose2d(grad_out, weight, None, spec, input_hw)
}

pub fn conv2d_all(input: &Tensor, weight: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let (_, _, h, w) = input.dims4("conv2d backward")?;
    Ok(ConvGrads {
        input: conv2d_input(grad_out, weight, spec, (h, w))?,
        weight: conv2d_weight_grad(input, grad_out, spec)?,
        bias: channel_sums(grad_out)?,
    })
}

/// Input gradient of a transpose convolution: the forward convolution.
pub fn conv_transpose2d_input(grad_out: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d(grad_out, weight, None, spec)
}

pub fn conv_transpose2d_all(input: &Tensor, weight: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    Ok(ConvGrads {
        input: conv_transpose2d_input(grad_out, weight, spec)?,
        weight: conv_transpose2d_weight_grad(input, grad_out, spec)?,
        bias: channel_sums(grad_out)?,
    })
}

/// Gradients of `x · Wᵀ + b`: `(dx, dW, db)`.
pub fn linear(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, fin) = input.dims2("linear backward")?;
    let (_, fout) = grad_out.dims2("linear backward")?;
    let mut dx = Tensor::zeros(&[b, fin]);
    gemm(b, fout, fin, grad_out.data(), Layout::Normal, weight.data(), Layout::Normal, 0.0, dx.data_mut());
    let mut dw = Tensor::zeros(&[fout, fin]);
    gemm(fout, b, fin, grad_out.data(), Layout::Transposed, input.data(), Layout::Normal, 0.0, dw.data_mut());
    let mut db = vec![0.0f32; fout];
    for row in grad_out.data().chunks(fout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, dw, Tensor::new(vec![fout], db)?))
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm(normalized: &Tensor, inv_std: &[f32], gamma: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, f) = normalized.dims2("batch_norm backward")?;
    let mut dgamma = vec![0.0f32; f];
    let mut dbeta = vec![0.0f32; f];
    for (g_row, x_row) in grad_out.data().chunks(f).zip(normalized.data().chunks(f)) {
        for j in 0..f {
            dgamma[j] += g_row[j] * x_row[j];
            dbeta[j] += g_row[j];
        }
    }
    let bf = b as f32;
    let mut dx = Tensor::zeros(&[b, f]);
    for ((d_row, g_row), x_row) in dx
        .data_mut()
        .chunks_mut(f)
        .zip(grad_out.data().chunks(f))
        .zip(normalized.data().chunks(f))
    {
        for j in 0..f {
            // Σ dx̂ = γ Σg and Σ dx̂·x̂ = γ·dgamma
            let g = gamma.data()[j];
            let dxhat = g_row[j] * g;
            d_row[j] = inv_std[j] / bf * (bf * dxhat - g * dbeta[j] - x_row[j] * g * dgamma[j]);
        }
    }
    Ok((dx, Tensor::new(vec![f], dgamma)?, Tensor::new(vec![f], dbeta)?))
}

/// Gradient of the batch-mean softmax cross-entropy w.r.t. the logits.
pub fn softmax_cross_entropy(probs: &Tensor, targets: &[usize], seed: f32) -> Result<Tensor> {
    let (b, c) = probs.dims2("cross_entropy backward")?;
    let mut g = probs.clone();
    for (row, &t) in g.data_mut().chunks_mut(c).zip(targets) {
        row[t] -= 1.0;
    }
    let k = seed / b as f32;
    for v in g.data_mut() {
        *v *= k;
    }
    Ok(g)
}
