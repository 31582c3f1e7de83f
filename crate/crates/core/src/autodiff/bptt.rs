//! Unrolls the recurrent dynamics on a tape for backpropagation through time.
//!
//! The error-correction gradient inside each update is computed from the
//! tape's current values and enters the graph as a constant, so training
//! stays first order.

use serde::{Deserialize, Serialize};

use super::one_step::one_step_error_gradient;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{check_image, update_terms, Hyper, ParamGroup, PcNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Sum over timesteps and layers of the reconstruction errors.
    Reconstruction,
    /// Cross-entropy of the head on the final timestep.
    Classification,
    /// Classification plus reconstruction.
    Joint,
}

impl Objective {
    fn needs_head(self) -> bool {
        !matches!(self, Objective::Reconstruction)
    }

    fn needs_reconstruction(self) -> bool {
        !matches!(self, Objective::Classification)
    }
}

/// Handles into a recorded unroll.
#[derive(Debug)]
pub struct Unrolled {
    pub loss: Var,
    /// Tape variables of the parameters that were marked trainable.
    pub params: Vec<(String, Var)>,
    /// Batch mean and biased variance seen by the head's batch norm.
    pub bn_stats: Option<(Vec<f32>, Vec<f32>)>,
    /// Summed reconstruction error (batch mean), whether or not optimized.
    pub reconstruction: f32,
    /// Cross-entropy, when a head was evaluated.
    pub classification: Option<f32>,
    /// Final-timestep logits, when a head was evaluated.
    pub logits: Option<Var>,
    /// The constant correction offsets `−α·K/√C·∇ε` added at each step,
    /// `corrections[t][n − 1]` for the update of layer `n` after timestep `t + 1`.
    pub corrections: Vec<Vec<crate::tensor::Tensor>>,
}

/// Records `timesteps` steps of the dynamics for a batch of images and
/// returns the scalar training loss.
///
/// `labels` are class indices for the head and are required by the
/// classification objectives. Parameters outside `trainable` are recorded as
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn bptt_loss(
    tape: &mut Tape,
    model: &PcNet,
    images: &crate::tensor::Tensor,
    labels: Option<&[usize]>,
    timesteps: usize,
    objective: Objective,
    hyper: &Hyper,
    trainable: ParamGroup,
) -> Result<Unrolled> {
    unroll(tape, model, images, labels, timesteps, objective, hyper, trainable, None)
}

/// Same as [`bptt_loss`] but replays the correction offsets of an earlier
/// unroll instead of recomputing them, which makes the recorded loss a plain
/// function of the parameters (used to check gradients).
#[allow(clippy::too_many_arguments)]
pub fn bptt_loss_frozen(
    tape: &mut Tape,
    model: &PcNet,
    images: &crate::tensor::Tensor,
    labels: Option<&[usize]>,
    timesteps: usize,
    objective: Objective,
    hyper: &Hyper,
    trainable: ParamGroup,
    corrections: &[Vec<crate::tensor::Tensor>],
) -> Result<Unrolled> {
    if corrections.len() + 1 != timesteps {
        return Err(Error::Input(format!(
            "{} correction steps recorded for {timesteps} timesteps",
            corrections.len()
        )));
    }
    unroll(tape, model, images, labels, timesteps, objective, hyper, trainable, Some(corrections))
}

#[allow(clippy::too_many_arguments)]
fn unroll(
    tape: &mut Tape,
    model: &PcNet,
    images: &crate::tensor::Tensor,
    labels: Option<&[usize]>,
    timesteps: usize,
    objective: Objective,
    hyper: &Hyper,
    trainable: ParamGroup,
    frozen: Option<&[Vec<crate::tensor::Tensor>]>,
) -> Result<Unrolled> {
    if timesteps == 0 {
        return Err(Error::Config("BPTT needs at least one timestep".into()));
    }
    hyper.validate()?;
    check_image(model, images)?;
    if objective.needs_reconstruction() && !model.has_feedback() {
        return Err(Error::Config("reconstruction objective needs decoders".into()));
    }
    if timesteps > 1 && !model.has_feedback() {
        return Err(Error::Config("feedforward-only model cannot unroll past one step".into()));
    }
    let labels = match (objective.needs_head(), labels) {
        (true, Some(l)) => Some(l),
        (true, None) => return Err(Error::Input("classification objective needs labels".into())),
        (false, _) => None,
    };

    let mut params = Vec::new();
    let mut vars = std::collections::HashMap::new();
    for (name, t) in model.params() {
        let v = if trainable.contains(&name) {
            let v = tape.param(t.clone());
            params.push((name.clone(), v));
            v
        } else {
            tape.constant(t.clone())
        };
        vars.insert(name, v);
    }
    let p = |name: String| -> Var { vars[&name] };

    let depth = model.depth();
    let scales = model.grad_scales()?;
    let encode = |tape: &mut Tape, n: usize, lower: Var| -> Result<Var> {
        let spec = model.encoders[n - 1].spec;
        let a = tape.conv2d(lower, p(format!("enc{n}.weight")), Some(p(format!("enc{n}.bias"))), spec)?;
        Ok(tape.relu(a))
    };
    let decode = |tape: &mut Tape, n: usize, upper: Var| -> Result<Var> {
        let dec = &model.decoders[n];
        let pre = tape.conv_transpose2d(
            upper,
            p(format!("dec{n}.weight")),
            Some(p(format!("dec{n}.bias"))),
            dec.conv.spec,
            dec.out_hw,
        )?;
        Ok(tape.activation(pre, dec.activation))
    };

    let mut e = vec![tape.constant(images.clone())];
    for n in 1..=depth {
        let next = encode(tape, n, e[n - 1])?;
        e.push(next);
    }

    let mut corrections = Vec::new();
    let mut recon_terms: Vec<(Var, f32)> = Vec::new();
    let mut reconstruction = 0.0f32;
    for t in 1..=timesteps {
        let last = t == timesteps;
        let mut d = Vec::new();
        if model.has_feedback() && (!last || objective.needs_reconstruction()) {
            for n in 0..depth {
                let dn = decode(tape, n, e[n + 1])?;
                d.push(dn);
            }
            for n in 0..depth {
                let err = tape.mse(e[n], d[n])?;
                reconstruction += tape.value(err).item()?;
                if objective.needs_reconstruction() {
                    recon_terms.push((err, 1.0));
                }
            }
        }
        if last {
            break;
        }
        let mut next = vec![e[0]];
        let mut step_corrections = Vec::with_capacity(depth);
        for n in 1..=depth {
            let k = update_terms(hyper, n < depth, scales[n - 1].factor);
            let offset = if let Some(fixed) = frozen {
                let o = fixed[t - 1]
                    .get(n - 1)
                    .ok_or_else(|| Error::Input(format!("no frozen correction for layer {n}")))?;
                tape.value(e[n]).expect_same_shape("bptt_loss_frozen", o)?;
                o.clone()
            } else if k.correction != 0.0 {
                let dec = &model.decoders[n - 1];
                let g = one_step_error_gradient(
                    tape.value(e[n - 1]),
                    tape.value(d[n - 1]),
                    &dec.conv.weight,
                    &dec.conv.spec,
                    dec.activation,
                )?;
                g.scale(-k.correction)
            } else {
                crate::tensor::Tensor::zeros(tape.value(e[n]).shape())
            };
            step_corrections.push(offset.clone());
            let mut terms = Vec::new();
            if k.drive != 0.0 {
                terms.push((encode(tape, n, next[n - 1])?, k.drive));
            }
            if k.feedback != 0.0 {
                terms.push((d[n], k.feedback));
            }
            if k.memory != 0.0 {
                terms.push((e[n], k.memory));
            }
            let updated = if terms.is_empty() {
                tape.constant(offset)
            } else {
                tape.combine(&terms, Some(&offset))?
            };
            next.push(tape.relu(updated));
        }
        e = next;
        corrections.push(step_corrections);
    }

    let mut loss_terms = recon_terms;
    let mut bn_stats = None;
    let mut classification = None;
    let mut logits_var = None;
    if let Some(labels) = labels {
        let head = model.head()?;
        let top = e[depth];
        let (b, f) = {
            let v = tape.value(top);
            (v.batch(), v.item_len())
        };
        let flat = tape.reshape(top, &[b, f])?;
        let (mut x, mean, var) =
            tape.batch_norm(flat, p("head.bn.gamma".into()), p("head.bn.beta".into()), head.norm.eps)?;
        bn_stats = Some((mean, var));
        let names: Vec<String> = model
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("head.") && n.ends_with(".weight"))
            .collect();
        for (i, wname) in names.iter().enumerate() {
            let layer = wname.trim_end_matches(".weight");
            x = tape.linear(x, p(wname.clone()), Some(p(format!("{layer}.bias"))))?;
            if i + 1 < names.len() {
                x = tape.relu(x);
            }
        }
        logits_var = Some(x);
        let ce = tape.softmax_cross_entropy(x, labels)?;
        classification = Some(tape.value(ce).item()?);
        loss_terms.push((ce, 1.0));
    }
    let loss = tape.combine(&loss_terms, None)?;
    Ok(Unrolled {
        loss,
        params,
        bn_stats,
        reconstruction,
        classification,
        logits: logits_var,
        corrections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{feedforward_init, Architecture, HeadSpec, PcConfig};
    use crate::tensor::Tensor;

    fn tiny(head: bool) -> PcNet {
        let arch = Architecture {
            input_channels: 3,
            input_size: 8,
            channels: vec![2, 2],
            kernel: 3,
            stride: 2,
            padding: 1,
            head: head.then(|| HeadSpec {
                hidden: vec![4],
                classes: 2,
            }),
            feedback: true,
        };
        PcNet::build(
            PcConfig {
                arch,
                ..PcConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn images() -> Tensor {
        Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 31 % 17) as f32) / 17.0)
    }

    #[test]
    fn single_step_loss_is_sum_of_layer_errors() {
        let model = tiny(false);
        let mut tape = Tape::new();
        let u = bptt_loss(
            &mut tape,
            &model,
            &images(),
            None,
            1,
            Objective::Reconstruction,
            &Hyper::default(),
            ParamGroup::All,
        )
        .unwrap();
        let s = feedforward_init(&model, &images()).unwrap();
        let want: f32 = (0..model.depth()).map(|n| s.mean_error(n)).sum();
        let got = tape.value(u.loss).item().unwrap();
        assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn rejects_zero_timesteps_and_missing_labels() {
        let model = tiny(true);
        let mut tape = Tape::new();
        assert!(bptt_loss(&mut tape, &model, &images(), None, 0, Objective::Reconstruction, &Hyper::default(), ParamGroup::All).is_err());
        assert!(bptt_loss(&mut tape, &model, &images(), None, 2, Objective::Classification, &Hyper::default(), ParamGroup::All).is_err());
    }

    #[test]
    fn frozen_groups_get_no_tape_params() {
        let model = tiny(true);
        let mut tape = Tape::new();
        let u = bptt_loss(
            &mut tape,
            &model,
            &images(),
            Some(&[0, 1]),
            2,
            Objective::Joint,
            &Hyper::default(),
            ParamGroup::Feedback,
        )
        .unwrap();
        assert!(u.params.iter().all(|(n, _)| n.starts_with("dec")));
        assert!(u.classification.is_some());
    }
}
