use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moments keyed by parameter name, so frozen
/// parameters simply never acquire state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// Applies one update to every `(name, parameter, gradient)` triple.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - beta2.powi(self.step as i32)).sqrt();
        let step_size = lr / bc1;
        for (name, param, grad) in updates {
            param.expect_same_shape("adam_step", grad)?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::new(vec![4], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        let g = Tensor::new(vec![4], vec![0.3, -2.0, 1e-3, 0.0]).unwrap();
        let before = p.clone();
        adam.step([("p", &mut p, &g)]).unwrap();
        for i in 0..4 {
            let gi = g.data()[i];
            let expected = 5e-5 * gi / (gi.abs() + 1e-8);
            let moved = before.data()[i] - p.data()[i];
            assert!((moved - expected).abs() < 1e-3 * 5e-5, "{i}: {moved} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::from_fn(&[3, 2], |i| i as f32);
        let before = p.clone();
        let g = Tensor::zeros(&[3, 2]);
        adam.step([("w", &mut p, &g)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
        let (m, v) = adam.moments("w").unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]);
        assert!(adam.step([("w", &mut p, &Tensor::zeros(&[3]))]).is_err());
    }
}
