//! Reverse-mode tape over the tensor kernels.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` simply walks it in reverse.

use super::rules;
use crate::error::{check_dim, Error, Result};
use crate::tensor::ops::batch_moments;
use crate::tensor::{self, Activation, BatchNormParams, BnMode, ConvSpec, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    /// `Σ cᵢ·xᵢ` plus an untracked constant.
    Combine {
        terms: Vec<(Var, f32)>,
    },
    /// `x ⊙ scale` plus an untracked shift.
    ScaleShift {
        input: Var,
        scale: Tensor,
    },
    Square(Var),
    Sum(Var),
    Mse(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        gamma: Var,
        input: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f32>,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf; zeros when the leaf is not on any
    /// path to the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.debug_assert_finite("tape node");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, spec }, needs))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let value = tensor::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
            out_hw,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(value, Op::ConvTranspose2d { input, weight, bias, spec }, needs))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = tensor::pointwise(self.value(input), kind);
        let needs = self.needs(&[input]);
        self.push(value, Op::Act { input, kind }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// `Σ cᵢ·xᵢ + offset`; the offset is treated as a constant.
    pub fn combine(&mut self, terms: &[(Var, f32)], offset: Option<&Tensor>) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Input("combine needs at least one term".into()))?;
        let mut value = match offset {
            Some(o) => {
                self.value(first.0).expect_same_shape("combine", o)?;
                o.clone()
            }
            None => Tensor::zeros(self.value(first.0).shape()),
        };
        for &(v, c) in terms {
            value.add_scaled(self.value(v), c)?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        Ok(self.push(value, Op::Combine { terms: terms.to_vec() }, needs))
    }

    /// `x ⊙ scale` for a constant `scale` of the same shape.
    pub fn mul_const(&mut self, input: Var, scale: Tensor) -> Result<Var> {
        let value = self.value(input).zip_map(&scale, |a, b| a * b)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::ScaleShift { input, scale }, needs))
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v * v);
        let needs = self.needs(&[input]);
        self.push(value, Op::Square(input), needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(&[input]);
        self.push(value, Op::Sum(input), needs)
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(tensor::mse(self.value(a), self.value(b))?);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), needs))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = tensor::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(value, Op::Linear { input, weight, bias }, needs))
    }

    /// Training-mode batch norm. Returns the output and the batch mean and
    /// biased variance, for the caller to fold into running statistics.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let x = self.value(input);
        let (_, f) = x.dims2("batch_norm")?;
        check_dim("batch_norm", "features", self.value(gamma).len(), f)?;
        check_dim("batch_norm", "features", self.value(beta).len(), f)?;
        let (mean, var) = batch_moments(x)?;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = x.clone();
        for row in normalized.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut value = normalized.clone();
        for row in value.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let needs = self.needs(&[input, gamma, beta]);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        );
        Ok((var_out, mean, var))
    }

    /// Eval-mode batch norm: a fixed per-feature affine map of the input,
    /// differentiated w.r.t. the input only.
    pub fn batch_norm_eval(&mut self, input: Var, params: &BatchNormParams) -> Result<Var> {
        let (value, _) = tensor::batch_norm(self.value(input), params, BnMode::Eval)?;
        let f = params.features();
        let scale: Vec<f32> = params
            .running_var
            .data()
            .iter()
            .zip(params.gamma.data())
            .map(|(v, g)| g / (v + params.eps).sqrt())
            .collect();
        let scale = Tensor::from_fn(value.shape(), |i| scale[i % f]);
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::ScaleShift { input, scale }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// Batch-mean softmax cross-entropy against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2("cross_entropy")?;
        check_dim("cross_entropy", "targets", b, targets.len())?;
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target class {t} out of range for {c} classes")));
        }
        let probs = tensor::softmax(self.value(logits))?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs.data()[i * c + t].max(f32::MIN_POSITIVE)).ln())
            .sum::<f32>()
            / b as f32;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<()> {
        if !self.nodes[var.0].needs_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_scaled(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, spec } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.needs(&[*input]) {
                    let (_, _, h, wd) = x.dims4("conv2d backward")?;
                    self.accumulate(grads, *input, rules::conv2d_input(g, w, spec, (h, wd))?)?;
                }
                if self.needs(&[*weight]) {
                    self.accumulate(grads, *weight, crate::tensor::conv::conv2d_weight_grad(x, g, spec)?)?;
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, crate::tensor::conv::channel_sums(g)?)?;
                }
            }
            Op::ConvTranspose2d { input, weight, bias, spec } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.needs(&[*input]) {
                    self.accumulate(grads, *input, rules::conv_transpose2d_input(g, w, spec)?)?;
                }
                if self.needs(&[*weight]) {
                    self.accumulate(
                        grads,
                        *weight,
                        crate::tensor::conv::conv_transpose2d_weight_grad(x, g, spec)?,
                    )?;
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, crate::tensor::conv::channel_sums(g)?)?;
                }
            }
            Op::Act { input, kind } => {
                self.accumulate(grads, *input, rules::activation(g, &node.value, *kind)?)?;
            }
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, g.scale(c))?;
                }
            }
            Op::ScaleShift { input, scale } => {
                self.accumulate(grads, *input, g.zip_map(scale, |a, b| a * b)?)?;
            }
            Op::Square(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, g.zip_map(x, |gv, xv| 2.0 * gv * xv)?)?;
            }
            Op::Sum(input) => {
                let seed = g.item()?;
                self.accumulate(grads, *input, Tensor::full(self.value(*input).shape(), seed))?;
            }
            Op::Mse(a, b) => {
                let ga = rules::mse(self.value(*a), self.value(*b), g.item()?)?;
                if self.needs(&[*b]) {
                    self.accumulate(grads, *b, ga.scale(-1.0))?;
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = rules::linear(self.value(*input), self.value(*weight), g)?;
                self.accumulate(grads, *input, dx)?;
                self.accumulate(grads, *weight, dw)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = rules::batch_norm(normalized, inv_std, self.value(*gamma), g)?;
                self.accumulate(grads, *input, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshape(&shape)?)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                self.accumulate(grads, *logits, rules::softmax_cross_entropy(probs, targets, g.item()?)?)?;
            }
        }
        Ok(())
    }
}
