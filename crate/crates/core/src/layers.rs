//! Time-dependent convolution stacks shared by the dynamics net and the
//! learned-solver blocks.

use odetensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamSet};

pub const KERNEL: usize = 3;
pub const WIDTH: usize = 32;

/// Hidden plan of a five-layer stack: `in → 32 → 32 → 32 → 32 → 2`.
pub fn five_layer_plan(input: usize) -> [usize; 6] {
    [input, WIDTH, WIDTH, WIDTH, WIDTH, 2]
}

fn uniform_weight<T: Real>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Add the parameters of a time-dependent stack named `{prefix}.layer{j}`.
///
/// Layer `j` maps `plan[j-1]` feature channels plus the time channel to
/// `plan[j]` channels. Weights are uniform in `±√(6/fan_in)`, biases zero,
/// `wt = 1`, `bt = 0`.
pub fn init_time_stack<T: Real>(params: &mut ParamSet<T>, prefix: &str, plan: &[usize], rng: &mut ChaCha8Rng) {
    for (j, pair) in plan.windows(2).enumerate() {
        let name = format!("{prefix}.layer{}", j + 1);
        params.insert(format!("{name}.weight"), uniform_weight([pair[1], pair[0] + 1, KERNEL, KERNEL], rng));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[pair[1]]));
        params.insert(format!("{name}.wt"), Tensor::ones(&[1]));
        params.insert(format!("{name}.bt"), Tensor::zeros(&[1]));
    }
}

/// Plain (time-independent) convolution stack named `{prefix}.layer{j}`.
pub fn init_conv_stack<T: Real>(params: &mut ParamSet<T>, prefix: &str, plan: &[usize], rng: &mut ChaCha8Rng) {
    for (j, pair) in plan.windows(2).enumerate() {
        let name = format!("{prefix}.layer{}", j + 1);
        params.insert(format!("{name}.weight"), uniform_weight([pair[1], pair[0], KERNEL, KERNEL], rng));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[pair[1]]));
    }
}

/// 1×1 convolution named `{name}.weight|bias`.
pub fn init_pointwise<T: Real>(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    params.insert(format!("{name}.weight"), uniform_weight([cout, cin, 1, 1], rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// `τ = wt·t + bt`, broadcast to a `B×1×H×W` channel, appended after the
/// input channels and convolved.
pub fn time_dep_conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    t: f64,
    dilation: usize,
) -> Result<Var> {
    let [b, _, h, w] = tape.try_value(x)?.dims4()?;
    let wt = tape.scale(p.get(&format!("{name}.wt"))?, t)?;
    let tau = tape.add(wt, p.get(&format!("{name}.bt"))?)?;
    let tau = tape.broadcast_scalar(tau, &[b, 1, h, w])?;
    let input = tape.concat_channels(&[x, tau])?;
    let weight = p.get(&format!("{name}.weight"))?;
    let bias = p.get(&format!("{name}.bias"))?;
    Ok(tape.conv2d(input, weight, bias, dilation)?)
}

/// `layers` time-dependent convolutions with ReLU between them and none
/// after the last.
pub fn time_stack<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    layers: usize,
    x: Var,
    t: f64,
    dilation: usize,
) -> Result<Var> {
    let mut h = x;
    for j in 1..=layers {
        h = time_dep_conv(tape, p, &format!("{prefix}.layer{j}"), h, t, dilation)?;
        if j < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Plain convolution stack with ReLU after every layer.
pub fn conv_stack<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for j in 1..=layers {
        let name = format!("{prefix}.layer{j}");
        h = tape.conv2d(h, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?, 1)?;
        h = tape.relu(h)?;
    }
    Ok(h)
}
