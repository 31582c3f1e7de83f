use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{check_dim, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => stable_sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y = f(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|v| kind.apply(v))
}

pub fn relu(input: &Tensor) -> Tensor {
    pointwise(input, Activation::Relu)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    pointwise(input, Activation::Sigmoid)
}

/// `input · weightᵀ + bias` with `weight` stored `(out_features, in_features)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "linear";
    let (b, fin) = input.dims2(OP)?;
    let (fout, win) = weight.dims2(OP)?;
    check_dim(OP, "in_features", win, fin)?;
    if let Some(bias) = bias {
        check_dim(OP, "bias length", fout, bias.len())?;
    }
    let mut out = Tensor::zeros(&[b, fout]);
    gemm(b, fin, fout, input.data(), Layout::Normal, weight.data(), Layout::Transposed, 0.0, out.data_mut());
    if let Some(bias) = bias {
        for row in out.data_mut().chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Blends batch statistics into the running estimates. `batch_var` is
    /// the biased variance; the running variance tracks the unbiased one.
    pub fn update_running(&mut self, batch_mean: &[f32], batch_var: &[f32], batch: usize) {
        let m = self.momentum;
        let unbias = if batch > 1 {
            batch as f32 / (batch as f32 - 1.0)
        } else {
            1.0
        };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }
}

/// Per-feature mean and biased variance of a `(batch, features)` tensor.
pub(crate) fn batch_moments(input: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, f) = input.dims2("batch_norm")?;
    let mut mean = vec![0.0f32; f];
    for row in input.data().chunks(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b as f32;
    }
    let mut var = vec![0.0f32; f];
    for row in input.data().chunks(f) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= b as f32;
    }
    Ok((mean, var))
}

/// 1-D batch normalization over the feature axis of a `(batch, features)`
/// tensor. Returns the output and, in training mode, the batch mean and
/// biased variance used.
pub fn batch_norm(input: &Tensor, params: &BatchNormParams, mode: BnMode) -> Result<(Tensor, Option<(Vec<f32>, Vec<f32>)>)> {
    const OP: &str = "batch_norm";
    let (_, f) = input.dims2(OP)?;
    check_dim(OP, "features", params.features(), f)?;
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let (m, v) = batch_moments(input)?;
            (m.clone(), v.clone(), Some((m, v)))
        }
        BnMode::Eval => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(f) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j] * params.gamma.data()[j] + params.beta.data()[j];
        }
    }
    Ok((out, stats))
}

/// Row-wise softmax of a `(batch, classes)` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Mean of squared differences over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape("mse", b)?;
    let sum: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f32)
}

/// Mean squared difference of each batch item, averaged over its own elements.
pub fn mse_per_item(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    a.expect_same_shape("mse_per_item", b)?;
    let n = a.item_len() as f32;
    Ok((0..a.batch())
        .map(|i| {
            a.item_slice(i)
                .iter()
                .zip(b.item_slice(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>()
                / n
        })
        .collect())
}

/// Parameters of the classifier head: batch norm followed by a stack of
/// dense layers, ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHeadParams {
    pub norm: BatchNormParams,
    /// `(weight, bias)` per dense layer, weights `(out, in)`.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DenseHeadParams {
    pub fn in_features(&self) -> usize {
        self.norm.features()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape()[0])
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, input: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (b, f) = input.dims2("dense_head")?;
        check_dim("dense_head", "flattened features", self.in_features(), f)?;
        let (mut x, _) = batch_norm(input, &self.norm, mode)?;
        let last = self.layers.len().saturating_sub(1);
        for (i, (w, bias)) in self.layers.iter().enumerate() {
            x = linear(&x, w, Some(bias))?;
            if i < last {
                x = relu(&x);
            }
        }
        debug_assert_eq!(x.batch(), b);
        Ok(x)
    }
}

/// Class probabilities from a flattened `(batch, features)` input.
pub fn dense_head(input: &Tensor, params: &DenseHeadParams, mode: BnMode) -> Result<Tensor> {
    softmax(&params.logits(input, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_clips_negatives() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(x in -40.0f32..40.0) {
            let s = Activation::Sigmoid.apply(x) + Activation::Sigmoid.apply(-x);
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(Activation::Sigmoid.apply(x) >= 0.0 && Activation::Sigmoid.apply(x) <= 1.0);
        }

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f32..30.0, 2..12)) {
            let n = v.len() / 2 * 2;
            let t = Tensor::new(vec![n / 2, 2], v[..n].to_vec()).unwrap();
            let p = softmax(&t).unwrap();
            for row in p.data().chunks(2) {
                prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_logits_give_even_split() {
        let p = softmax(&Tensor::new(vec![1, 2], vec![3.0, 3.0]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn batch_norm_training_mode_matches_affine() {
        let x = Tensor::from_fn(&[16, 3], |i| ((i * 7919 % 31) as f32) * 0.3 - 4.0);
        let mut p = BatchNormParams::new(3);
        p.gamma = Tensor::new(vec![3], vec![2.0, 0.5, 1.5]).unwrap();
        p.beta = Tensor::new(vec![3], vec![-1.0, 0.0, 3.0]).unwrap();
        let (y, stats) = batch_norm(&x, &p, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let (m, v) = batch_moments(&y).unwrap();
        for j in 0..3 {
            assert!((m[j] - p.beta.data()[j]).abs() < 1e-4, "mean {j}");
            let g = p.gamma.data()[j];
            assert!((v[j] - g * g).abs() < 1e-3 * g * g, "var {j}: {} vs {}", v[j], g * g);
        }
    }

    #[test]
    fn batch_norm_eval_mode_uses_running_stats() {
        let mut p = BatchNormParams::new(2);
        p.running_mean = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        p.running_var = Tensor::new(vec![2], vec![4.0, 1.0]).unwrap();
        p.eps = 0.0;
        let x = Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap();
        let (y, stats) = batch_norm(&x, &p, BnMode::Eval).unwrap();
        assert!(stats.is_none());
        assert_eq!(y.data(), &[1.0, 1.0]);
    }

    #[test]
    fn running_stats_track_unbiased_variance() {
        let mut p = BatchNormParams::new(1);
        p.momentum = 1.0;
        p.update_running(&[2.0], &[3.0], 4);
        assert_eq!(p.running_mean.data(), &[2.0]);
        assert_eq!(p.running_var.data(), &[4.0]);
    }

    #[test]
    fn mse_basics() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f32);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let z = Tensor::zeros(&[2]);
        let o = Tensor::full(&[2], 1.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert!(mse(&z, &x).is_err());
    }

    #[test]
    fn mse_matches_f64_loop() {
        let a = Tensor::from_fn(&[3, 5, 7], |i| ((i * 2654435761usize) % 1000) as f32 / 1000.0);
        let b = Tensor::from_fn(&[3, 5, 7], |i| ((i * 40503 + 17) % 997) as f32 / 997.0);
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            acc += d * d;
        }
        let want = acc / a.len() as f64;
        assert!((mse(&a, &b).unwrap() as f64 - want).abs() < 1e-6);
        let per = mse_per_item(&a, &b).unwrap();
        let mean = per.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        assert!((mean - want).abs() < 1e-6);
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.5, 2.5, 3.5]);
        let bad = Tensor::zeros(&[1, 3]);
        assert!(linear(&bad, &w, None).unwrap_err().to_string().contains("in_features"));
    }
}
