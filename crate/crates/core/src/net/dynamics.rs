//! Feedforward initialization and the recurrent predictive-coding update.
//!
//! One update from `t` to `t + 1`:
//!
//! ```text
//! d_n(t)   = f_n(W_b e_{n+1}(t))                          n = 0..N-1
//! e_n(t+1) = β·relu(W_f e_{n-1}(t+1)) + λ·d_n(t) + (1-β-λ)·e_n(t)
//!            - α·s_n·∇ε_{n-1}(t)                          n = 1..N
//! ```
//!
//! Encoders are updated bottom-up so the drive term sees the already-updated
//! layer below. The top layer has no prediction from above: its λ weight is
//! folded into the memory term. `s_n = K/√C` rescales the error gradient by
//! the size of the layer below. The result is rectified so activations stay
//! non-negative like the ReLU encoders they replace.

use super::model::{Decoder, PcNet};
use super::Hyper;
use crate::autodiff::one_step_error_gradient;
use crate::error::{Error, Result};
use crate::tensor::{self, BnMode, ConvSpec, Tensor};

/// Encoder activations `e_0..e_N`, predictions `d_0..d_{N-1}` and per-item
/// errors `ε_n = mean((e_n − d_n)²)` at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub encoders: Vec<Tensor>,
    pub predictions: Vec<Tensor>,
    /// `errors[n][b]`: error of layer `n` for batch item `b`.
    pub errors: Vec<Vec<f32>>,
    /// 1 after the feedforward pass.
    pub timestep: usize,
}

impl NetworkState {
    pub fn image(&self) -> &Tensor {
        &self.encoders[0]
    }

    pub fn top(&self) -> &Tensor {
        self.encoders.last().expect("state has at least the input")
    }

    /// Batch-mean error of layer `n`.
    pub fn mean_error(&self, n: usize) -> f32 {
        let e = &self.errors[n];
        e.iter().sum::<f32>() / e.len() as f32
    }

    /// `Σ_n ε_n` for each batch item.
    pub fn total_error(&self) -> Vec<f32> {
        let b = self.encoders[0].batch();
        (0..b).map(|i| self.errors.iter().map(|e| e[i]).sum()).collect()
    }
}

/// Gradient rescaling `K/√C` for the update of the layer above a layer of
/// shape `(channels, height, width)` reached through `spec`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradScale {
    pub k: usize,
    pub c: usize,
    pub factor: f32,
}

pub fn grad_scale_factor(below: (usize, usize, usize), spec: &ConvSpec) -> Result<GradScale> {
    let (channels, h, w) = below;
    let k = channels * h * w;
    let c = channels * spec.kernel_area();
    if k == 0 || c == 0 {
        return Err(Error::Config(format!("zero-sized layer in gradient scale: {below:?}")));
    }
    Ok(GradScale {
        k,
        c,
        factor: (k as f64 / (c as f64).sqrt()) as f32,
    })
}

impl PcNet {
    /// `K/√C` for the update of each encoder layer `1..=N`.
    pub fn grad_scales(&self) -> Result<Vec<GradScale>> {
        let shapes = self.arch().layer_shapes()?;
        self.encoders
            .iter()
            .zip(&shapes)
            .map(|(enc, &below)| grad_scale_factor(below, &enc.spec))
            .collect()
    }
}

pub(crate) fn check_image(model: &PcNet, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4("feedforward_init")?;
    let arch = model.arch();
    crate::error::check_dim("feedforward_init", "image channels", arch.input_channels, c)?;
    crate::error::check_dim("feedforward_init", "image height", arch.input_size, h)?;
    crate::error::check_dim("feedforward_init", "image width", arch.input_size, w)?;
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn decode(dec: &Decoder, upper: &Tensor) -> Result<Tensor> {
    let pre = tensor::conv_transpose2d(upper, &dec.conv.weight, Some(&dec.conv.bias), &dec.conv.spec, dec.out_hw)?;
    Ok(tensor::pointwise(&pre, dec.activation))
}

fn predict(model: &PcNet, encoders: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Vec<f32>>)> {
    let mut preds = Vec::with_capacity(model.decoders.len());
    let mut errs = Vec::with_capacity(model.decoders.len());
    for (n, dec) in model.decoders.iter().enumerate() {
        let d = decode(dec, &encoders[n + 1])?;
        errs.push(tensor::mse_per_item(&encoders[n], &d)?);
        preds.push(d);
    }
    Ok((preds, errs))
}

/// Feedforward pass from the image, followed by one round of predictions.
pub fn feedforward_init(model: &PcNet, image: &Tensor) -> Result<NetworkState> {
    check_image(model, image)?;
    let mut encoders = vec![image.clone()];
    for enc in &model.encoders {
        let prev = encoders.last().expect("non-empty");
        let a = tensor::conv2d(prev, &enc.weight, Some(&enc.bias), &enc.spec)?;
        encoders.push(tensor::relu(&a));
    }
    let (predictions, errors) = predict(model, &encoders)?;
    Ok(NetworkState {
        encoders,
        predictions,
        errors,
        timestep: 1,
    })
}

/// Coefficients of one encoder update; zero terms are skipped entirely.
pub(crate) struct UpdateTerms {
    pub drive: f32,
    pub feedback: f32,
    pub memory: f32,
    pub correction: f32,
}

pub(crate) fn update_terms(hyper: &Hyper, has_feedback: bool, scale: f32) -> UpdateTerms {
    if has_feedback {
        UpdateTerms {
            drive: hyper.beta,
            feedback: hyper.lambda,
            memory: hyper.memory(),
            correction: hyper.alpha * scale,
        }
    } else {
        UpdateTerms {
            drive: hyper.beta,
            feedback: 0.0,
            memory: 1.0 - hyper.beta,
            correction: hyper.alpha * scale,
        }
    }
}

/// Error-correction gradient for encoder `n` (1-based): the gradient of
/// `ε_{n-1}` w.r.t. `e_n`.
pub(crate) fn correction_gradient(model: &PcNet, encoders: &[Tensor], predictions: &[Tensor], n: usize) -> Result<Tensor> {
    let dec = &model.decoders[n - 1];
    one_step_error_gradient(&encoders[n - 1], &predictions[n - 1], &dec.conv.weight, &dec.conv.spec, dec.activation)
}

/// Advances the state by one timestep with coefficients `hyper`.
pub fn pc_step(model: &PcNet, state: &NetworkState, hyper: &Hyper) -> Result<NetworkState> {
    hyper.validate()?;
    if !model.has_feedback() {
        return Err(Error::Config("feedforward-only model has no recurrent update".into()));
    }
    let depth = model.depth();
    let scales = model.grad_scales()?;
    let mut next = Vec::with_capacity(depth + 1);
    next.push(state.encoders[0].clone());
    for n in 1..=depth {
        let t = update_terms(hyper, n < depth, scales[n - 1].factor);
        let current = &state.encoders[n];
        let mut out = if t.correction != 0.0 {
            correction_gradient(model, &state.encoders, &state.predictions, n)?.scale(-t.correction)
        } else {
            Tensor::zeros(current.shape())
        };
        if t.drive != 0.0 {
            let enc = &model.encoders[n - 1];
            let ff = tensor::relu(&tensor::conv2d(&next[n - 1], &enc.weight, Some(&enc.bias), &enc.spec)?);
            out.add_scaled(&ff, t.drive)?;
        }
        if t.feedback != 0.0 {
            out.add_scaled(&state.predictions[n], t.feedback)?;
        }
        if t.memory != 0.0 {
            out.add_scaled(current, t.memory)?;
        }
        next.push(tensor::relu(&out));
    }
    let (predictions, errors) = predict(model, &next)?;
    Ok(NetworkState {
        encoders: next,
        predictions,
        errors,
        timestep: state.timestep + 1,
    })
}

/// Class probabilities `(batch, classes)` from the top layer, with batch
/// norm in evaluation mode. Column 0 is the "square" class.
pub fn classify(model: &PcNet, state: &NetworkState) -> Result<Tensor> {
    let head = model.head()?;
    let top = state.top();
    let flat = top.clone().reshape(&[top.batch(), top.item_len()])?;
    tensor::dense_head(&flat, head, BnMode::Eval)
}

/// One timestep of a trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub timestep: usize,
    /// `P(square)` per item, when the model has a head.
    pub p_square: Option<Vec<f32>>,
    /// Bottom-layer reconstruction `d_0`, when the model has feedback.
    pub reconstruction: Option<Tensor>,
    pub errors: Vec<Vec<f32>>,
}

/// Runs `timesteps` steps (the feedforward pass counts as the first) and
/// hands each to `visit`.
pub fn run_trajectory_with(
    model: &PcNet,
    image: &Tensor,
    timesteps: usize,
    hyper: &Hyper,
    mut visit: impl FnMut(TrajectoryStep) -> Result<()>,
) -> Result<()> {
    if timesteps == 0 {
        return Err(Error::Config("trajectory needs at least one timestep".into()));
    }
    let mut state = feedforward_init(model, image)?;
    for t in 1..=timesteps {
        if t > 1 {
            state = pc_step(model, &state, hyper)?;
        }
        let p_square = match &model.head {
            Some(_) => {
                let probs = classify(model, &state)?;
                let c = probs.shape()[1];
                Some(probs.data().chunks(c).map(|r| r[0]).collect())
            }
            None => None,
        };
        visit(TrajectoryStep {
            timestep: state.timestep,
            p_square,
            reconstruction: state.predictions.first().cloned(),
            errors: state.errors.clone(),
        })?;
    }
    Ok(())
}

pub fn run_trajectory(model: &PcNet, image: &Tensor, timesteps: usize, hyper: &Hyper) -> Result<Vec<TrajectoryStep>> {
    let mut steps = Vec::with_capacity(timesteps);
    run_trajectory_with(model, image, timesteps, hyper, |s| {
        steps.push(s);
        Ok(())
    })?;
    Ok(steps)
}
