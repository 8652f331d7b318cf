//! Backward rules checked against central finite differences.

use odetensor::gradcheck::{finite_diff_grad, max_relative_error};
use odetensor::{memory, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Loss `Σ r ⊙ op(x)` with a fixed random projection `r`.
fn check_op<F>(x: &Tensor<f64>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let proj = {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let y = op(&mut tape, v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        uniform(&mut rng, tape.value(y).shape(), 1.0)
    };
    let loss = |tape: &mut Tape<f64>, v: Var| -> Result<Var> {
        let y = op(tape, v)?;
        let r = tape.constant(proj.clone());
        let p = tape.mul(y, r)?;
        tape.sum(p)
    };
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x.clone());
    let l = loss(&mut tape, v).unwrap();
    let analytic = tape.backward(l).unwrap().get(v).unwrap().clone();
    let numeric = finite_diff_grad(
        |t| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(t.clone());
            let l = loss(&mut tape, v)?;
            Ok(tape.value(l).data()[0])
        },
        x,
        EPS,
    )
    .unwrap();
    max_relative_error(analytic.data(), numeric.data(), FLOOR)
}

/// Values in [−1, 1] kept away from the ReLU/abs kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_ops_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, 3, 4, 5], 1.0);
        let other = uniform(&mut rng, &[2, 3, 4, 5], 1.0);
        // Modulus is smooth only away from the origin; keep the real part off zero.
        let shifted = Tensor::from_fn(&[2, 2, 3, 3], |i| x.data()[i] * 0.4 + if (i / 9) % 2 == 0 { 0.6 } else { 0.0 });
        let err = check_op(&x, seed, |t, v| { let o = t.constant(other.clone()); t.mul(v, o) });
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| t.mul(v, v));
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| { let o = t.constant(other.clone()); t.axpy(o, -0.7, v) });
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| t.affine(v, 2.5, 0.3));
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| t.softmax_channels(v));
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| { let a = t.slice_channels(v, 1, 2)?; let b = t.slice_channels(v, 0, 1)?; t.concat_channels(&[a, v, b]) });
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| { let g = t.slice_channels(v, 2, 1)?; t.mul_channel(v, g) });
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&shifted, seed, |t, v| t.magnitude(v));
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| { let m = t.mean(v)?; t.broadcast_scalar(m, &[1, 2, 3, 3]) });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn conv_matches_finite_differences(seed in 0u64..10_000, dilation in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, 3, 6, 7], 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], 1.0);
        let b = uniform(&mut rng, &[4], 1.0);
        let (wc, bc) = (w.clone(), b.clone());
        let err = check_op(&x, seed, move |t, v| { let w = t.constant(wc.clone()); let b = t.constant(bc.clone()); t.conv2d(v, w, b, dilation) });
        prop_assert!(err < TOL, "relative error {err}");
        let (xc, bc) = (x.clone(), b.clone());
        let err = check_op(&w, seed, move |t, v| { let x = t.constant(xc.clone()); let b = t.constant(bc.clone()); t.conv2d(x, v, b, dilation) });
        prop_assert!(err < TOL, "relative error {err}");
        let (xc, wc) = (x.clone(), w.clone());
        let err = check_op(&b, seed, move |t, v| { let x = t.constant(xc.clone()); let w = t.constant(wc.clone()); t.conv2d(x, w, v, dilation) });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn conv_is_linear_without_bias(seed in 0u64..10_000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[1, 2, 6, 6], 1.0).cast::<f32>();
        let y = uniform(&mut rng, &[1, 2, 6, 6], 1.0).cast::<f32>();
        let w = uniform(&mut rng, &[3, 2, 3, 3], 1.0).cast::<f32>();
        let conv = |input: &Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let (i, wv, bv) = (tape.constant(input.clone()), tape.constant(w.clone()), tape.constant(Tensor::zeros(&[3])));
            let o = tape.conv2d(i, wv, bv, 2).unwrap();
            tape.value(o).clone()
        };
        let mix = Tensor::new(&[1, 2, 6, 6], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv(&mix);
        let (cx, cy) = (conv(&x), conv(&y));
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-5 * (1.0 + l.abs()));
        }
    }
}

#[test]
fn kinked_ops_match_away_from_zero() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&mut rng, &[2, 2, 3, 3]);
        let err = check_op(&x, seed, |t, v| t.relu(v));
        assert!(err < TOL, "relative error {err}");
        let err = check_op(&x, seed, |t, v| t.abs(v));
        assert!(err < TOL, "relative error {err}");
    }
}

fn cnn(tape: &mut Tape<f64>, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.conv2d(h, w, b, 1 + i % 2)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

#[test]
fn three_layer_cnn_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[1, 2, 6, 6], 1.0);
    let plan = [(2, 6), (6, 6), (6, 2)];
    let params: Vec<(Tensor<f64>, Tensor<f64>)> = plan
        .iter()
        .map(|&(i, o)| (uniform(&mut rng, &[o, i, 3, 3], (6.0 / (9.0 * i as f64)).sqrt()), uniform(&mut rng, &[o], 0.1)))
        .collect();
    let run = |tape: &mut Tape<f64>, xv: Var, w0: Var| -> Result<Var> {
        let mut layers = vec![(w0, tape.constant(params[0].1.clone()))];
        for (w, b) in &params[1..] {
            layers.push((tape.constant(w.clone()), tape.constant(b.clone())));
        }
        let y = cnn(tape, xv, &layers)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    };
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let w0 = tape.leaf(params[0].0.clone());
    let l = run(&mut tape, xv, w0).unwrap();
    let grads = tape.backward(l).unwrap();
    let numeric_x = finite_diff_grad(
        |t| {
            let mut tape = Tape::new();
            let (xv, w0) = (tape.constant(t.clone()), tape.constant(params[0].0.clone()));
            let l = run(&mut tape, xv, w0)?;
            Ok(tape.value(l).data()[0])
        },
        &x,
        EPS,
    )
    .unwrap();
    let numeric_w = finite_diff_grad(
        |t| {
            let mut tape = Tape::new();
            let (xv, w0) = (tape.constant(x.clone()), tape.constant(t.clone()));
            let l = run(&mut tape, xv, w0)?;
            Ok(tape.value(l).data()[0])
        },
        &params[0].0,
        EPS,
    )
    .unwrap();
    assert!(max_relative_error(grads.get(xv).unwrap().data(), numeric_x.data(), FLOOR) < TOL);
    assert!(max_relative_error(grads.get(w0).unwrap().data(), numeric_w.data(), FLOOR) < TOL);
}

/// Five conv layers, built once plain and once as a checkpointed segment.
fn five_layer(tape: &mut Tape<f32>, inputs: &[Var]) -> Result<Var> {
    let mut h = inputs[0];
    for l in 0..5 {
        h = tape.conv2d(h, inputs[1 + 2 * l], inputs[2 + 2 * l], 1)?;
        if l < 4 {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

#[test]
fn checkpointed_cnn_gradients_equal_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&mut rng, &[2, 2, 8, 8], 1.0).cast::<f32>();
    let chans = [2, 8, 8, 8, 8, 2];
    let params: Vec<Tensor<f32>> = (0..5)
        .flat_map(|l| {
            let w = uniform(&mut rng, &[chans[l + 1], chans[l], 3, 3], 0.4).cast::<f32>();
            let b = uniform(&mut rng, &[chans[l + 1]], 0.1).cast::<f32>();
            [w, b]
        })
        .collect();
    let run = |checkpointed: bool| {
        memory::reset_peak();
        let base = memory::live_bytes();
        let mut tape = Tape::<f32>::new();
        let mut vars = vec![tape.leaf(x.clone())];
        vars.extend(params.iter().map(|p| tape.leaf(p.clone())));
        let y = if checkpointed {
            tape.checkpoint(&vars, five_layer).unwrap()
        } else {
            five_layer(&mut tape, &vars).unwrap()
        };
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq).unwrap();
        let out = tape.value(y).clone();
        let mut grads = tape.backward(l).unwrap();
        let g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
        (out, g, memory::peak_bytes() - base)
    };
    let (y_plain, g_plain, _) = run(false);
    let (y_ckpt, g_ckpt, _) = run(true);
    assert_eq!(y_plain, y_ckpt, "forward output must be exact");
    for (a, b) in g_plain.iter().zip(&g_ckpt) {
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-6), "{p} vs {q}");
        }
    }
}

#[test]
fn tape_replay_is_deterministic() {
    let loss = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform(&mut rng, &[1, 3, 8, 8], 1.0).cast::<f32>();
        let w = uniform(&mut rng, &[3, 3, 3, 3], 0.5).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.constant(Tensor::zeros(&[3])));
        let y = tape.conv2d(xv, wv, bv, 2).unwrap();
        let r = tape.relu(y).unwrap();
        let l = tape.sum(r).unwrap();
        tape.value(l).data()[0].to_bits()
    };
    assert_eq!(loss(), loss());
}
