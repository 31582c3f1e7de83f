//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` per input, over the probed coordinates.
    pub relative_errors: Vec<f64>,
    pub probes: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, probing at most `max_probes`
/// evenly spaced coordinates of each input.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f32,
    max_probes: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    if inputs.is_empty() || max_probes == 0 {
        return Err(Error::Input("gradient check needs inputs and probes".into()));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item()? as f64)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::new();
    let mut probes = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(*var);
        let n = inputs[k].len();
        let stride = n.div_ceil(max_probes).max(1);
        let (mut diff2, mut ad2, mut fd2) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..n).step_by(stride) {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let fd = (up - down) / (2.0 * h as f64);
            let ad = g.data()[i] as f64;
            diff2 += (ad - fd).powi(2);
            ad2 += ad * ad;
            fd2 += fd * fd;
            probes += 1;
        }
        let scale = ad2.sqrt().max(fd2.sqrt());
        errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
    }
    Ok(GradCheck {
        relative_errors: errors,
        probes,
    })
}
