//! Epoch loops: BPTT losses optimized with Adam, and matching evaluation
//! passes that run the eager dynamics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bptt_loss, AdamState, Objective, Tape};
use crate::datasets::{batch_iterator, ImageBatch, ImageSet};
use crate::error::{Error, Result};
use crate::net::{classify, feedforward_init, pc_step, Hyper, ParamGroup, PcNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub objective: Objective,
    pub hyper: Hyper,
    pub trainable: ParamGroup,
    pub batch_size: usize,
}

/// Averages over the items of one pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub items: usize,
    pub batches: usize,
    /// Optimized loss (or the loss the objective would optimize, in evaluation).
    pub loss: f64,
    /// Reconstruction error summed over timesteps and layers.
    pub reconstruction: f64,
    pub classification: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Default)]
struct Totals {
    items: usize,
    batches: usize,
    loss: f64,
    recon: f64,
    class: Option<f64>,
    correct: Option<usize>,
}

impl Totals {
    fn add(&mut self, b: usize, loss: f32, recon: f32, class: Option<f32>, correct: Option<usize>) {
        self.items += b;
        self.batches += 1;
        self.loss += loss as f64 * b as f64;
        self.recon += recon as f64 * b as f64;
        if let Some(c) = class {
            *self.class.get_or_insert(0.0) += c as f64 * b as f64;
        }
        if let Some(c) = correct {
            *self.correct.get_or_insert(0) += c;
        }
    }

    fn finish(self) -> EpochStats {
        let n = self.items.max(1) as f64;
        EpochStats {
            items: self.items,
            batches: self.batches,
            loss: self.loss / n,
            reconstruction: self.recon / n,
            classification: self.class.map(|c| c / n),
            accuracy: self.correct.map(|c| c as f64 / n),
        }
    }
}

fn labels_for(batch: &ImageBatch, objective: Objective) -> Result<Option<&[usize]>> {
    match objective {
        Objective::Reconstruction => Ok(None),
        _ => batch
            .labels
            .as_deref()
            .map(Some)
            .ok_or_else(|| Error::Input("classification objective on an unlabelled set".into())),
    }
}

fn count_correct(probs_or_logits: &[f32], classes: usize, labels: &[usize]) -> usize {
    probs_or_logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count()
}

/// One optimizer step on one batch.
pub fn train_batch(model: &mut PcNet, adam: &mut AdamState, batch: &ImageBatch, cfg: &TrainConfig) -> Result<EpochStats> {
    let labels = labels_for(batch, cfg.objective)?;
    let mut tape = Tape::new();
    let unrolled = bptt_loss(
        &mut tape,
        model,
        &batch.images,
        labels,
        cfg.timesteps,
        cfg.objective,
        &cfg.hyper,
        cfg.trainable,
    )?;
    let loss = tape.value(unrolled.loss).item()?;
    if !loss.is_finite() {
        return Err(Error::Input(format!("training loss became {loss}")));
    }
    let correct = match (unrolled.logits, labels) {
        (Some(l), Some(y)) => {
            let v = tape.value(l);
            Some(count_correct(v.data(), v.shape()[1], y))
        }
        _ => None,
    };
    let mut grads = tape.backward(unrolled.loss)?;
    let grads: Vec<(String, crate::tensor::Tensor)> =
        unrolled.params.iter().map(|(name, v)| (name.clone(), grads.take(*v))).collect();
    drop(tape);
    {
        let mut slots = model.params_mut();
        let updates = slots.iter_mut().filter_map(|(name, t)| {
            grads
                .iter()
                .find(|(g, _)| g == name)
                .map(|(_, g)| (name.as_str(), &mut **t, g))
        });
        adam.step(updates)?;
    }
    if let (Some((mean, var)), Some(head)) = (unrolled.bn_stats.as_ref(), model.head.as_mut()) {
        if cfg.trainable.contains("head.bn.gamma") {
            head.norm.update_running(mean, var, batch.images.batch());
        }
    }
    let mut t = Totals::default();
    t.add(
        batch.images.batch(),
        loss,
        unrolled.reconstruction,
        unrolled.classification,
        correct,
    );
    Ok(t.finish())
}

/// One shuffled pass over `set`, calling `on_batch` after each step.
pub fn train_epoch(
    model: &mut PcNet,
    adam: &mut AdamState,
    set: &ImageSet,
    cfg: &TrainConfig,
    seed: u64,
    mut on_batch: impl FnMut(usize, &EpochStats),
) -> Result<EpochStats> {
    let mut totals = Totals::default();
    for (i, batch) in batch_iterator(set, cfg.batch_size, seed, true)?.enumerate() {
        let s = train_batch(model, adam, &batch, cfg)?;
        on_batch(i, &s);
        totals.add(
            s.items,
            s.loss as f32,
            s.reconstruction as f32,
            s.classification.map(|c| c as f32),
            s.accuracy.map(|a| (a * s.items as f64).round() as usize),
        );
    }
    Ok(totals.finish())
}

/// Runs the eager dynamics on one batch with batch norm in evaluation mode.
pub fn evaluate_batch(model: &PcNet, batch: &ImageBatch, cfg: &TrainConfig) -> Result<EpochStats> {
    let labels = labels_for(batch, cfg.objective)?;
    let b = batch.images.batch();
    let mut state = feedforward_init(model, &batch.images)?;
    let mut recon = 0.0f32;
    for t in 1..=cfg.timesteps {
        if t > 1 {
            state = pc_step(model, &state, &cfg.hyper)?;
        }
        let last = t == cfg.timesteps;
        if model.has_feedback() && !(last && cfg.objective == Objective::Classification) {
            recon += (0..model.depth()).map(|n| state.mean_error(n)).sum::<f32>();
        }
    }
    let (class, correct) = match labels {
        Some(y) => {
            let probs = classify(model, &state)?;
            let c = probs.shape()[1];
            let ce = probs
                .data()
                .chunks(c)
                .zip(y)
                .map(|(row, &k)| -(row[k].max(1e-12) as f64).ln())
                .sum::<f64>()
                / b as f64;
            (Some(ce as f32), Some(count_correct(probs.data(), c, y)))
        }
        None => (None, None),
    };
    let loss = match cfg.objective {
        Objective::Reconstruction => recon,
        Objective::Classification => class.unwrap_or(0.0),
        Objective::Joint => recon + class.unwrap_or(0.0),
    };
    let mut t = Totals::default();
    t.add(b, loss, recon, class, correct);
    Ok(t.finish())
}

/// Evaluation pass over a whole set in file order.
pub fn evaluate(model: &PcNet, set: &ImageSet, cfg: &TrainConfig) -> Result<EpochStats> {
    let mut totals = Totals::default();
    for batch in batch_iterator(set, cfg.batch_size, 0, false)? {
        let s = evaluate_batch(model, &batch, cfg)?;
        totals.add(
            s.items,
            s.loss as f32,
            s.reconstruction as f32,
            s.classification.map(|c| c as f32),
            s.accuracy.map(|a| (a * s.items as f64).round() as usize),
        );
    }
    Ok(totals.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use crate::datasets::IMAGE_LEN;
    use crate::net::{Architecture, HeadSpec, PcConfig};

    fn small_net(head: bool) -> PcNet {
        let arch = Architecture {
            input_channels: 3,
            input_size: 32,
            channels: vec![4, 4],
            kernel: 5,
            stride: 2,
            padding: 2,
            head: head.then(|| HeadSpec {
                hidden: vec![8],
                classes: 2,
            }),
            feedback: true,
        };
        PcNet::build(
            PcConfig {
                arch,
                ..PcConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn toy_set() -> ImageSet {
        // class 0: bright left half, class 1: bright right half
        let n = 16;
        let mut data = vec![0.1f32; n * IMAGE_LEN];
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            labels.push(y);
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        if (c < 16) == (y == 0) {
                            data[i * IMAGE_LEN + ch * 1024 + r * 32 + c] = 0.9;
                        }
                    }
                }
            }
        }
        ImageSet::from_floats(data, Some(labels), (0..n).collect()).unwrap()
    }

    #[test]
    fn reconstruction_training_lowers_the_loss() {
        let mut net = small_net(false);
        let set = toy_set();
        let cfg = TrainConfig {
            timesteps: 2,
            objective: Objective::Reconstruction,
            hyper: Hyper::default(),
            trainable: ParamGroup::All,
            batch_size: 8,
        };
        let before = evaluate(&net, &set, &cfg).unwrap();
        let mut adam = AdamState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for epoch in 0..60 {
            train_epoch(&mut net, &mut adam, &set, &cfg, epoch, |_, _| {}).unwrap();
        }
        let after = evaluate(&net, &set, &cfg).unwrap();
        assert!(after.loss < 0.7 * before.loss, "{} -> {}", before.loss, after.loss);
    }

    #[test]
    fn classification_training_separates_toy_classes() {
        let mut net = small_net(true);
        let set = toy_set();
        let cfg = TrainConfig {
            timesteps: 2,
            objective: Objective::Classification,
            hyper: Hyper::default(),
            trainable: ParamGroup::All,
            batch_size: 8,
        };
        let mut adam = AdamState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for epoch in 0..20 {
            train_epoch(&mut net, &mut adam, &set, &cfg, epoch, |_, _| {}).unwrap();
        }
        let stats = evaluate(&net, &set, &cfg).unwrap();
        assert_eq!(stats.accuracy, Some(1.0), "{stats:?}");
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut net = small_net(false);
        let before = net.clone();
        let cfg = TrainConfig {
            timesteps: 1,
            objective: Objective::Reconstruction,
            hyper: Hyper::default(),
            trainable: ParamGroup::Feedback,
            batch_size: 16,
        };
        let mut adam = AdamState::new(AdamConfig::default());
        train_epoch(&mut net, &mut adam, &toy_set(), &cfg, 0, |_, _| {}).unwrap();
        for ((name, a), (_, b)) in before.params().into_iter().zip(net.params()) {
            assert_eq!(a == b, name.starts_with("enc"), "{name}");
        }
    }

    #[test]
    fn unlabelled_set_cannot_train_a_classifier() {
        let mut net = small_net(true);
        let set = ImageSet::from_floats(vec![0.5; IMAGE_LEN], None, vec![0]).unwrap();
        let cfg = TrainConfig {
            timesteps: 1,
            objective: Objective::Classification,
            hyper: Hyper::default(),
            trainable: ParamGroup::All,
            batch_size: 1,
        };
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(train_epoch(&mut net, &mut adam, &set, &cfg, 0, |_, _| {}).is_err());
    }
}
