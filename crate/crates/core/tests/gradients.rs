//! Finite-difference checks for every differentiable tape op and for the
//! unrolled two-step training loss, plus the closed-form one-step gradient.

use pcnet::autodiff::{bptt_loss, bptt_loss_frozen, check_gradients, one_step_error_gradient, Objective, Tape};
use pcnet::net::{Architecture, HeadSpec, Hyper, ParamGroup, PcConfig, PcNet};
use pcnet::tensor::{conv_transpose2d, Activation, BatchNormParams, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Keeps values at least `gap` away from zero so kinks stay out of reach of the step.
fn away_from_zero(t: Tensor, gap: f32) -> Tensor {
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn weighted_sum(tape: &mut Tape, v: pcnet::autodiff::Var, seed: u64) -> pcnet::Result<pcnet::autodiff::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.value(v).shape(), &mut rng, -1.0, 1.0);
    let m = tape.mul_const(v, w)?;
    Ok(tape.sum(m))
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::new(2, 3, 3, 2, 1).unwrap();
    let x = rand_tensor(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&spec.weight_shape(), &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let r = check_gradients(&[x, w, b], 1e-2, 200, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
        weighted_sum(t, y, 10)
    })
    .unwrap();
    assert!(r.max_error() < TOL, "{r:?}");
}

#[test]
fn conv_transpose2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ConvSpec::new(2, 3, 3, 2, 1).unwrap();
    let u = rand_tensor(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&spec.weight_shape(), &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    let r = check_gradients(&[u, w, b], 1e-2, 200, |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), spec, (6, 6))?;
        weighted_sum(t, y, 11)
    })
    .unwrap();
    assert!(r.max_error() < TOL, "{r:?}");
}

#[test]
fn activations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = away_from_zero(rand_tensor(&[4, 5], &mut rng, -2.0, 2.0), 0.05);
    for kind in [Activation::Relu, Activation::Sigmoid] {
        let r = check_gradients(std::slice::from_ref(&x), 1e-2, 20, |t, v| {
            let y = t.activation(v[0], kind);
            weighted_sum(t, y, 12)
        })
        .unwrap();
        assert!(r.max_error() < TOL, "{kind:?}: {r:?}");
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 6], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 6], &mut rng, -1.0, 1.0);
    let offset = rand_tensor(&[2, 6], &mut rng, -1.0, 1.0);
    let r = check_gradients(&[a.clone(), b.clone()], 1e-2, 12, |t, v| {
        let c = t.combine(&[(v[0], 0.3), (v[1], -1.7)], Some(&offset))?;
        let sq = t.square(c);
        let r = t.reshape(sq, &[12])?;
        weighted_sum(t, r, 13)
    })
    .unwrap();
    assert!(r.max_error() < TOL, "{r:?}");
    let r = check_gradients(&[a, b], 1e-2, 12, |t, v| t.mse(v[0], v[1])).unwrap();
    assert!(r.max_error() < TOL, "{r:?}");
}

#[test]
fn dense_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let w3 = rand_tensor(&[3, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
    let gamma = rand_tensor(&[3], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    let targets = [0, 2, 1, 1, 0];
    let x4 = rand_tensor(&[5, 3], &mut rng, -1.0, 1.0);
    let r = check_gradients(&[x4, gamma, beta, w3, b.clone()], 1e-2, 20, |t, v| {
        let (n, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
        let y = t.linear(n, v[3], Some(v[4]))?;
        t.softmax_cross_entropy(y, &targets)
    })
    .unwrap();
    assert!(r.max_error() < TOL, "{r:?}");

    let mut params = BatchNormParams::new(3);
    params.running_mean = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    params.running_var = rand_tensor(&[3], &mut rng, 0.5, 2.0);
    let r = check_gradients(&[x, w, b], 1e-2, 20, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let n = t.batch_norm_eval(y, &params)?;
        weighted_sum(t, n, 14)
    })
    .unwrap();
    assert!(r.max_error() < TOL, "{r:?}");
}

fn tiny_net(head: bool) -> PcNet {
    let arch = Architecture {
        input_channels: 3,
        input_size: 8,
        channels: vec![2, 2],
        kernel: 3,
        stride: 2,
        padding: 1,
        head: head.then(|| HeadSpec {
            hidden: vec![3],
            classes: 2,
        }),
        feedback: true,
    };
    PcNet::build(
        PcConfig {
            arch,
            ..PcConfig::default()
        },
        21,
    )
    .unwrap()
}

/// Relative error of the unrolled two-step gradient. The correction term is
/// a constant of the unroll, so the finite differences replay it frozen.
fn unrolled_check(objective: Objective, hyper: Hyper) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_net(objective != Objective::Reconstruction);
    let images = rand_tensor(&[4, 3, 8, 8], &mut rng, 0.0, 1.0);
    let labels = [0usize, 1, 1, 0];
    let mut tape = Tape::new();
    let u = bptt_loss(&mut tape, &model, &images, Some(&labels), 2, objective, &hyper, ParamGroup::All).unwrap();
    let frozen = u.corrections.clone();
    let loss_of = |m: &PcNet| -> f64 {
        let mut tape = Tape::new();
        let u = bptt_loss_frozen(&mut tape, m, &images, Some(&labels), 2, objective, &hyper, ParamGroup::All, &frozen)
            .unwrap();
        tape.value(u.loss).item().unwrap() as f64
    };
    let grads = tape.backward(u.loss).unwrap();
    // batch norm over four items curves sharply; a small step keeps truncation error down
    let h = 1e-3f32;
    let (mut diff2, mut norm2) = (0.0f64, 0.0f64);
    for (name, var) in &u.params {
        let g = grads.get(*var);
        for i in 0..g.len() {
            let mut m = model.clone();
            let bump = |m: &mut PcNet, delta: f32| {
                let mut slots = m.params_mut();
                let slot = slots.iter_mut().find(|(n, _)| n == name).unwrap();
                slot.1.data_mut()[i] += delta;
            };
            bump(&mut m, h);
            let up = loss_of(&m);
            bump(&mut m, -2.0 * h);
            let down = loss_of(&m);
            let fd = (up - down) / (2.0 * h as f64);
            diff2 += (g.data()[i] as f64 - fd).powi(2);
            norm2 += fd * fd;
        }
    }
    diff2.sqrt() / norm2.sqrt()
}

#[test]
fn two_step_reconstruction_loss_matches_finite_differences() {
    let err = unrolled_check(Objective::Reconstruction, Hyper::default());
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn two_step_joint_loss_matches_finite_differences() {
    let err = unrolled_check(Objective::Joint, Hyper::default());
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn without_correction_the_frozen_and_live_losses_coincide() {
    let err = unrolled_check(Objective::Joint, Hyper::new(0.3, 0.2, 0.0).unwrap());
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn ten_step_loss_and_gradients_are_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = tiny_net(true);
    let images = rand_tensor(&[3, 3, 8, 8], &mut rng, 0.0, 1.0);
    let mut tape = Tape::new();
    let u = bptt_loss(
        &mut tape,
        &model,
        &images,
        Some(&[0, 1, 1]),
        10,
        Objective::Joint,
        &Hyper::default(),
        ParamGroup::All,
    )
    .unwrap();
    assert!(tape.value(u.loss).item().unwrap().is_finite());
    let grads = tape.backward(u.loss).unwrap();
    for (name, v) in &u.params {
        assert!(grads.get(*v).all_finite(), "{name}");
    }
}

/// Direct-loop f64 evaluation of (2/K)·Wᵀ((d − e) ⊙ act'(d)) for one item.
fn one_step_oracle(lower: &Tensor, pred: &Tensor, weight: &Tensor, spec: &ConvSpec, act: Activation, upper_hw: usize) -> Vec<f64> {
    let (cl, hl, wl) = (lower.shape()[1], lower.shape()[2], lower.shape()[3]);
    let k = (cl * hl * wl) as f64;
    let co = spec.out_channels;
    let ks = spec.kernel;
    let mut out = vec![0.0f64; co * upper_hw * upper_hw];
    for o in 0..co {
        for i in 0..upper_hw {
            for j in 0..upper_hw {
                let mut acc = 0.0f64;
                for c in 0..cl {
                    for p in 0..ks {
                        for q in 0..ks {
                            let y = (i * spec.stride + p) as isize - spec.padding as isize;
                            let x = (j * spec.stride + q) as isize - spec.padding as isize;
                            if y < 0 || x < 0 || y as usize >= hl || x as usize >= wl {
                                continue;
                            }
                            let idx = (c * hl + y as usize) * wl + x as usize;
                            let d = pred.data()[idx] as f64;
                            let e = lower.data()[idx] as f64;
                            let deriv = match act {
                                Activation::Relu => (d > 0.0) as i32 as f64,
                                Activation::Sigmoid => d * (1.0 - d),
                            };
                            let wv = weight.data()[((o * cl + c) * ks + p) * ks + q] as f64;
                            acc += wv * 2.0 / k * (d - e) * deriv;
                        }
                    }
                }
                out[(o * upper_hw + i) * upper_hw + j] = acc;
            }
        }
    }
    out
}

#[test]
fn one_step_gradient_matches_closed_form_on_full_size_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // (lower channels, lower size, activation)
    for (cl, size, act) in [(3, 32, Activation::Sigmoid), (128, 16, Activation::Relu), (128, 8, Activation::Relu)] {
        let spec = ConvSpec::new(cl, 128, 5, 2, 2).unwrap();
        let upper_hw = spec.out_extent(size).unwrap();
        let weight = rand_tensor(&spec.weight_shape(), &mut rng, -0.05, 0.05);
        let upper = rand_tensor(&[1, 128, upper_hw, upper_hw], &mut rng, 0.0, 1.0);
        let pre = conv_transpose2d(&upper, &weight, None, &spec, (size, size)).unwrap();
        let pred = pre.map(|v| act.apply(v));
        let lower = rand_tensor(&[1, cl, size, size], &mut rng, 0.0, 1.0);
        let got = one_step_error_gradient(&lower, &pred, &weight, &spec, act).unwrap();
        let want = one_step_oracle(&lower, &pred, &weight, &spec, act, upper_hw);
        let diff: f64 = got.data().iter().zip(&want).map(|(&g, w)| (g as f64 - w).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "layer below {cl}x{size}: {}", diff / norm);
    }
}

#[test]
fn one_step_gradient_is_linear_in_the_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = ConvSpec::new(2, 3, 3, 2, 1).unwrap();
    let weight = rand_tensor(&spec.weight_shape(), &mut rng, -0.5, 0.5);
    let pred = rand_tensor(&[1, 2, 6, 6], &mut rng, 0.0, 1.0);
    let delta = rand_tensor(&[1, 2, 6, 6], &mut rng, -0.25, 0.25);
    // positive predictions keep the relu derivative at one
    let base = pred.map(|v| v + 1.0);
    let l1 = base.zip_map(&delta, |d, r| d - r).unwrap();
    let l2 = base.zip_map(&delta, |d, r| d - 2.0 * r).unwrap();
    let g1 = one_step_error_gradient(&l1, &base, &weight, &spec, Activation::Relu).unwrap();
    let g2 = one_step_error_gradient(&l2, &base, &weight, &spec, Activation::Relu).unwrap();
    let diff = g1.scale(2.0).zip_map(&g2, |a, b| a - b).unwrap();
    assert!(diff.dot(&diff).unwrap().sqrt() <= 1e-5 * g2.dot(&g2).unwrap().sqrt());
    let zero = one_step_error_gradient(&base, &base, &weight, &spec, Activation::Relu).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}
