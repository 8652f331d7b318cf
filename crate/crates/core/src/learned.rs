//! Learned solver steps: stage networks `G_i` in place of the RK stage
//! evaluations and an attention combiner in place of the fixed weights.

use odetensor::{Real, Tape, Var};

use crate::error::{ReconError, Result};
use crate::layers::{conv_stack, five_layer_plan, init_conv_stack, init_pointwise, init_time_stack, time_stack, WIDTH};
use crate::params::{Bound, ParamSet};
use crate::seed;

pub const LAYERS: usize = 5;
pub const ATTN_LAYERS: usize = 4;

/// Dilation of stage `i` (1-based) in an `s`-stage step: `s, …, 2, 1`.
pub fn dilation(stage: usize, stages: usize) -> usize {
    stages + 1 - stage
}

/// Input channels of stage `i`: `x`, the `i − 1` earlier stage outputs and
/// the measurement image, two channels each.
pub fn stage_channels(stage: usize) -> usize {
    2 * (stage - 1) + 4
}

fn stage_prefix(stage: usize) -> String {
    format!("lt.stage{stage}")
}

/// Stage blocks `lt.stage{i}.layer{j}` and, for `s > 1`, the attention
/// trunk `lt.attn.layer{j}` with one 1×1 logit head `lt.attn.stage{i}` per
/// stage.
pub fn init_learned<T: Real>(stages: usize, seed: u64) -> Result<ParamSet<T>> {
    if !matches!(stages, 1 | 2 | 4) {
        return Err(ReconError::Config(format!("learned solvers have 1, 2 or 4 stages, got {stages}")));
    }
    let mut params = ParamSet::new();
    let mut rng = seed::rng(seed, seed::INIT, 1);
    for i in 1..=stages {
        init_time_stack(&mut params, &stage_prefix(i), &five_layer_plan(stage_channels(i)), &mut rng);
    }
    if stages > 1 {
        let plan = [2 * stages, WIDTH, WIDTH, WIDTH, WIDTH];
        init_conv_stack(&mut params, "lt.attn", &plan, &mut rng);
        for i in 1..=stages {
            init_pointwise(&mut params, &format!("lt.attn.stage{i}"), WIDTH, 1, &mut rng);
        }
    }
    Ok(params)
}

/// `F_i = G_i(x, F_1, …, F_{i−1}, t, y)`.
pub fn g_block_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    stage: usize,
    stages: usize,
    x: Var,
    priors: &[Var],
    t: f64,
    y_img: Var,
) -> Result<Var> {
    if stage == 0 || stage > stages || priors.len() != stage - 1 {
        return Err(ReconError::Contract(format!(
            "stage {stage} of {stages} needs {} prior outputs, got {}",
            stage.saturating_sub(1),
            priors.len()
        )));
    }
    let mut parts = Vec::with_capacity(stage + 1);
    parts.push(x);
    parts.extend_from_slice(priors);
    parts.push(y_img);
    let input = tape.concat_channels(&parts)?;
    time_stack(tape, p, &stage_prefix(stage), LAYERS, input, t, dilation(stage, stages))
}

/// Per-pixel stage weights `B×s×H×W`, a softmax over stages.
pub fn attention_weights<T: Real>(tape: &mut Tape<T>, p: &Bound, stages: &[Var]) -> Result<Var> {
    let input = tape.concat_channels(stages)?;
    let features = conv_stack(tape, p, "lt.attn", ATTN_LAYERS, input)?;
    let mut logits = Vec::with_capacity(stages.len());
    for i in 1..=stages.len() {
        let name = format!("lt.attn.stage{i}");
        logits.push(tape.conv2d(features, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?, 1)?);
    }
    let logits = tape.concat_channels(&logits)?;
    Ok(tape.softmax_channels(logits)?)
}

/// `Σᵢ wᵢ ⊙ Fᵢ`; a single stage is returned unchanged.
pub fn attention_combine<T: Real>(tape: &mut Tape<T>, p: &Bound, stages: &[Var]) -> Result<Var> {
    match stages {
        [] => Err(ReconError::Contract("attention needs at least one stage".into())),
        [only] => Ok(*only),
        _ => {
            let weights = attention_weights(tape, p, stages)?;
            let mut out: Option<Var> = None;
            for (i, &f) in stages.iter().enumerate() {
                let w = tape.slice_channels(weights, i, 1)?;
                let term = tape.mul_channel(f, w)?;
                out = Some(match out {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            Ok(out.expect("at least two stages"))
        }
    }
}

/// `x_{n+1} = x_n + G(F_1, …, F_s)`.
pub fn learned_step<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    stages: usize,
    x: Var,
    t: f64,
    y_img: Var,
) -> Result<Var> {
    let mut fs = Vec::with_capacity(stages);
    for i in 1..=stages {
        let f = g_block_forward(tape, p, i, stages, x, &fs, t, y_img).map_err(|e| match e {
            ReconError::Numeric(m) => ReconError::Numeric(format!("stage {i}: {m}")),
            other => other,
        })?;
        if !tape.value(f).is_finite() {
            return Err(ReconError::Numeric(format!("stage {i} produced non-finite values at t = {t}")));
        }
        fs.push(f);
    }
    let update = attention_combine(tape, p, &fs)?;
    Ok(tape.add(x, update)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use odetensor::Tensor;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = seed::rng(seed, 7, 0);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dilation_schedule_decreases() {
        assert_eq!((1..=4).map(|i| dilation(i, 4)).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        assert_eq!(dilation(1, 1), 1);
        assert_eq!(stage_channels(1), 4);
    }

    #[test]
    fn parameter_counts_grow_with_stages() {
        let counts: Vec<usize> = [1, 2, 4].iter().map(|&s| init_learned::<f32>(s, 0).unwrap().count()).collect();
        assert_eq!(counts[0], 30_686);
        let (r2, r4) = (counts[1] as f64 / counts[0] as f64, counts[2] as f64 / counts[0] as f64);
        assert!((2.5..=3.5).contains(&r2), "{r2}");
        assert!((4.0..=6.0).contains(&r4), "{r4}");
        assert!(init_learned::<f32>(3, 0).is_err());
        let p = init_learned::<f32>(4, 0).unwrap();
        assert_eq!(p.get("lt.stage1.layer1.weight").unwrap().shape(), &[32, 5, 3, 3]);
        assert_eq!(p.get("lt.stage4.layer1.weight").unwrap().shape(), &[32, 11, 3, 3]);
        assert_eq!(p.get("lt.attn.stage3.weight").unwrap().shape(), &[1, 32, 1, 1]);
    }

    #[test]
    fn wrong_prior_count_is_a_contract_error() {
        let params = init_learned::<f32>(2, 0).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 2, 8, 8], 1));
        let err = g_block_forward(&mut tape, &p, 2, 2, x, &[], 0.0, x).unwrap_err();
        assert!(matches!(err, ReconError::Contract(_)));
    }

    #[test]
    fn attention_examples() {
        let params = init_learned::<f32>(4, 3).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let fs: Vec<Var> = (0..4).map(|i| tape.constant(random(&[2, 2, 8, 8], 10 + i))).collect();

        let w = attention_weights(&mut tape, &p, &fs).unwrap();
        let wv = tape.value(w).clone();
        for b in 0..2 {
            for px in 0..64 {
                let s: f32 = (0..4).map(|i| wv.data()[(b * 4 + i) * 64 + px]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!((0..4).all(|i| { let v = wv.data()[(b * 4 + i) * 64 + px]; v > 0.0 && v < 1.0 }));
            }
        }

        let single = attention_combine(&mut tape, &p, &fs[..1]).unwrap();
        assert_eq!(tape.value(single), tape.value(fs[0]));

        let same = vec![fs[1]; 4];
        let out = attention_combine(&mut tape, &p, &same).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(fs[1]).data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(attention_combine(&mut tape, &p, &[]).is_err());
    }

    #[test]
    fn zero_blocks_give_the_identity_step() {
        for s in [1, 2, 4] {
            let params = init_learned::<f32>(s, 0).unwrap().zeros_like();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let x = tape.constant(random(&[1, 2, 8, 8], 5));
            let y = tape.constant(random(&[1, 2, 8, 8], 6));
            let out = learned_step(&mut tape, &p, s, x, 0.4, y).unwrap();
            assert_eq!(tape.value(out), tape.value(x));
        }
    }
}
