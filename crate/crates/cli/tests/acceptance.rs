//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The desk-scale training criteria take hours on a
//! single core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odemri::bench::{out_of_band, render, solver_bench, BenchOde};
use odemri::data::{generate, load_dataset, split, GenConfig, Sample};
use odemri::gradcheck::{adjoint_gap, gradcheck_family, probe_batch, GAP_STEPS, GAP_TOLERANCE};
use odemri::mri::{adjoint_e, data_consistency, default_center_fraction, forward_e, make_mask, ComplexImage, KSpace, Mask};
use odemri::optim::Optimizer;
use odemri::train::{evaluate, make_batch, train, zero_filled_report, TrainConfig, TrainOutcome};
use odemri::{Model, ModelSpec, ReconError, Result, TableauKind};
use odetensor::memory;

const SIZE: usize = 64;
const COUNT: usize = 250;
const AF: u32 = 4;
const DATA_SEED: u64 = 0;
const MARGIN_DB: f64 = 2.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

/// Shared state: the standard dataset and every training run, keyed by
/// (family, seed).
struct Ctx {
    dir: tempfile::TempDir,
    train: Vec<Sample>,
    val: Vec<Sample>,
    runs: BTreeMap<(String, u64), (TrainOutcome, f64)>,
}

impl Ctx {
    fn new() -> Result<Self> {
        let dir = tempfile::tempdir().map_err(|source| ReconError::Io { path: std::env::temp_dir(), source })?;
        let data = dir.path().join("data");
        generate(&data, &GenConfig { count: COUNT, size: SIZE, acceleration: AF, noise: 0.0, seed: DATA_SEED })?;
        let (train, val) = split(load_dataset(&data)?, TrainConfig::default().val_fraction)?;
        Ok(Ctx { dir, train, val, runs: BTreeMap::new() })
    }

    fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn run(&mut self, family: &str, seed: u64) -> Result<&(TrainOutcome, f64)> {
        let key = (family.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let cfg = TrainConfig { family: ModelSpec::parse(family)?, seed, ..TrainConfig::default() };
            let out_dir = self.dir.path().join(format!("{family}_s{seed}"));
            let start = Instant::now();
            let outcome = train(&self.train, &self.val, &cfg, Some(&out_dir))?;
            let minutes = start.elapsed().as_secs_f64() / 60.0;
            println!("    trained {family} seed {seed} in {minutes:.1} min (best epoch {})", outcome.best_epoch);
            self.runs.insert(key.clone(), (outcome, minutes));
        }
        Ok(&self.runs[&key])
    }
}

fn solver_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let rows = solver_bench(BenchOde::ExpDecay, &[4, 8, 16, 32])?;
    let secs = start.elapsed().as_secs_f64();
    print!("{}", render(&rows));
    let at32 = |k: TableauKind| rows.iter().find(|r| r.kind == k && r.n_steps == 32).map_or(f64::INFINITY, |r| r.error);
    let errors = [(TableauKind::Euler, 3e-2), (TableauKind::Rk2, 1e-4), (TableauKind::Rk4, 1e-8)];
    let within = errors.iter().all(|&(k, bound)| at32(k) < bound);
    let bands = out_of_band(&rows).is_empty();
    outcome(
        within && bands && secs < 1.0,
        format!(
            "n=32 errors euler {:.2e}, rk2 {:.2e}, rk4 {:.2e}; halving ratios in band: {bands}; {secs:.3} s",
            at32(TableauKind::Euler),
            at32(TableauKind::Rk2),
            at32(TableauKind::Rk4)
        ),
    )
}

fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all = true;
    for family in ["ft_euler", "ft_rk2", "ft_rk4", "lt_euler", "lt_rk2", "lt_rk4"] {
        let report = gradcheck_family(ModelSpec::parse(family)?, 8, 0)?;
        println!("    {family}: max relative error {:.2e} over {} coordinates", report.max_rel_error, report.compared);
        worst = worst.max(report.max_rel_error);
        all &= report.fd_passed();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(all && secs < 120.0, format!("worst relative error {worst:.2e} (< 1e-3); {secs:.1} s (< 120 s)"))
}

fn adjoint_consistency() -> Result<Outcome> {
    let batch = probe_batch(8, 0)?;
    let model = Model::<f32>::init(ModelSpec::parse("fa_rk4")?, 0)?.cast::<f64>();
    let gaps = GAP_STEPS.iter().map(|&n| Ok((n, adjoint_gap(&model, &batch, n)?))).collect::<Result<Vec<_>>>()?;
    let decreasing = gaps.windows(2).all(|w| w[1].1 < w[0].1);
    let at10 = gaps.iter().find(|(n, _)| *n == 10).map_or(f64::INFINITY, |g| g.1);
    let text: Vec<String> = gaps.iter().map(|(n, g)| format!("n={n}: {g:.3e}")).collect();
    outcome(at10 < GAP_TOLERANCE && decreasing, format!("FA vs FT gap {}; strictly decreasing: {decreasing}", text.join(", ")))
}

fn checkpointing(ctx: &Ctx) -> Result<Outcome> {
    let refs: Vec<&Sample> = ctx.train.iter().take(TrainConfig::default().batch_size).collect();
    let batch = make_batch(&refs, true)?;
    let cfg = TrainConfig { family: ModelSpec::parse("lt_rk4")?, ..TrainConfig::default() };
    let mut results = Vec::new();
    for ckpt in [false, true] {
        let mut model = Model::init(cfg.family, cfg.seed)?;
        let mut opt = Optimizer::new(cfg.optim(), &model.params)?;
        let mut steps = Vec::new();
        for _ in 0..3 {
            let live = memory::live_bytes();
            memory::reset_peak();
            let (loss, grads) = model.loss_and_grads(&batch, ckpt)?;
            steps.push((loss, memory::peak_bytes() - live));
            opt.step(&mut model.params, &grads)?;
        }
        results.push(steps);
    }
    let max_dloss = results[0].iter().zip(&results[1]).map(|(a, b)| (a.0 - b.0).abs()).fold(0.0, f64::max);
    let worst_ratio = results[0].iter().zip(&results[1]).map(|(a, b)| b.1 as f64 / a.1 as f64).fold(0.0, f64::max);
    outcome(
        worst_ratio < 0.5 && max_dloss <= 1e-6,
        format!(
            "peak bytes {} plain vs {} checkpointed (ratio {worst_ratio:.3}); max per-step loss difference {max_dloss:.1e}",
            results[0][0].1, results[1][0].1
        ),
    )
}

fn random_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex32> {
    (0..n).map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn re_inner(a: &[Complex32], b: &[Complex32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re as f64 * y.re as f64 + x.im as f64 * y.im as f64).sum()
}

fn max_diff(a: &[Complex32], b: &[Complex32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm() as f64).fold(0.0, f64::max)
}

fn operator_identities() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut adj, mut idem, mut trip): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for size in [32, 64] {
        for pair in 0..100u64 {
            let x = ComplexImage::new(size, size, random_data(&mut rng, size * size))?;
            let y = KSpace::new(size, size, random_data(&mut rng, size * size))?;
            let mask = make_mask(size, AF, default_center_fraction(AF), pair)?;
            let lhs = re_inner(forward_e(&x, &mask)?.data(), y.data());
            let rhs = re_inner(x.data(), adjoint_e(&y, &mask)?.data());
            adj = adj.max((lhs - rhs).abs() / (x.norm() * y.norm()));
        }
        let x = ComplexImage::new(size, size, random_data(&mut rng, size * size))?;
        let truth = ComplexImage::new(size, size, random_data(&mut rng, size * size))?;
        let mask = make_mask(size, AF, default_center_fraction(AF), 1)?;
        let measured = forward_e(&truth, &mask)?;
        let once = data_consistency(&x, &measured, &mask)?;
        idem = idem.max(max_diff(data_consistency(&once, &measured, &mask)?.data(), once.data()));
        let full = Mask::full(size);
        trip = trip.max(max_diff(adjoint_e(&forward_e(&x, &full)?, &full)?.data(), x.data()));
    }
    outcome(
        adj < 1e-5 && idem < 1e-5 && trip < 1e-5,
        format!("adjointness {adj:.1e} (200 pairs), DC idempotence {idem:.1e}, full round trip {trip:.1e}"),
    )
}

fn end_to_end(ctx: &mut Ctx) -> Result<Outcome> {
    let baseline = zero_filled_report(&ctx.val)?.mean_psnr;
    println!("    zero-filled validation PSNR {baseline:.3} dB");
    let mut parts = Vec::new();
    let mut all = true;
    for family in ["lt_rk4", "lt_euler", "ft_euler", "ft_rk4"] {
        let val = ctx.val.clone();
        let (run, minutes) = ctx.run(family, SEEDS[0])?;
        let best = evaluate(&run.best_model, &val, 4)?.mean_psnr;
        let last = evaluate(&run.final_model, &val, 4)?.mean_psnr;
        println!("    {family}: best-epoch PSNR {best:.3} dB, final-epoch PSNR {last:.3} dB, {minutes:.1} min");
        all &= best - baseline >= MARGIN_DB;
        parts.push(format!("{family} {:+.2} dB", best - baseline));
    }
    outcome(all, format!("gain over zero-filled {baseline:.2} dB: {}", parts.join(", ")))
}

fn ordering(ctx: &mut Ctx) -> Result<Outcome> {
    let val = ctx.val.clone();
    let mut means = Vec::new();
    for family in ["lt_euler", "lt_rk4"] {
        let mut scores = Vec::new();
        for seed in SEEDS {
            let (run, _) = ctx.run(family, seed)?;
            scores.push(evaluate(&run.best_model, &val, 4)?.mean_ssim);
        }
        println!("    {family} validation SSIM per seed {scores:.4?}");
        means.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    outcome(means[1] >= means[0], format!("mean SSIM lt_rk4 {:.4} vs lt_euler {:.4}", means[1], means[0]))
}

fn parameter_counts() -> Result<Outcome> {
    let count = |name: &str| -> Result<usize> { Ok(Model::<f32>::init(ModelSpec::parse(name)?, 0)?.param_count()) };
    let euler = count("lt_euler")? as f64;
    let (r2, r4) = (count("lt_rk2")? as f64 / euler, count("lt_rk4")? as f64 / euler);
    let mut shared = true;
    let dynamics = count("ft_euler")?;
    for kind in ["euler", "rk2", "rk4"] {
        shared &= count(&format!("ft_{kind}"))? == dynamics && count(&format!("fa_{kind}"))? == dynamics;
    }
    outcome(
        (2.5..=3.5).contains(&r2) && (4.0..=6.0).contains(&r4) && shared,
        format!("lt_rk2/lt_euler {r2:.3}, lt_rk4/lt_euler {r4:.3}; FT/FA share {dynamics} parameters: {shared}"),
    )
}

fn same_files(a: &Path, b: &Path) -> bool {
    let Ok(entries) = fs::read_dir(a) else { return false };
    entries.filter_map(|e| e.ok()).all(|e| fs::read(e.path()).ok() == fs::read(b.join(e.file_name())).ok())
}

fn reconstruct_cli(ctx: &Ctx, archive: &Path, id: &str, out: &Path) -> std::io::Result<std::process::Output> {
    let data = ctx.data_dir();
    Command::new(env!("CARGO_BIN_EXE_odemri"))
        .env("RUST_LOG", "warn")
        .arg("reconstruct")
        .arg("--input")
        .arg(data.join(format!("ksp_{id}.nodt")))
        .arg("--mask")
        .arg(data.join(format!("mask_{id}.nodt")))
        .arg("--model")
        .arg(archive)
        .arg("--out")
        .arg(out)
        .arg("--truth")
        .arg(data.join(format!("img_{id}.nodt")))
        .output()
}

fn determinism(ctx: &mut Ctx) -> Result<Outcome> {
    let root = ctx.dir.path().to_path_buf();
    let io = |source| ReconError::Io { path: root.clone(), source };
    let again = ctx.dir.path().join("data_again");
    generate(&again, &GenConfig { count: COUNT, size: SIZE, acceleration: AF, noise: 0.0, seed: DATA_SEED })?;
    let datasets = same_files(&ctx.data_dir(), &again);

    let (train_set, val_set) = (ctx.train.clone(), ctx.val.clone());
    let first = ctx.run("ft_euler", SEEDS[0])?.0.log[0].train_loss;
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let repeat = train(&train_set, &val_set, &cfg, None)?.log[0].train_loss;
    let losses = first.to_bits() == repeat.to_bits();

    let archive = ctx.dir.path().join("lt_rk4_s0").join("best.params");
    let id = train_set[0].id.clone();
    let (a, b) = (ctx.dir.path().join("recon_a.nodt"), ctx.dir.path().join("recon_b.nodt"));
    let out_a = reconstruct_cli(ctx, &archive, &id, &a).map_err(io)?;
    let out_b = reconstruct_cli(ctx, &archive, &id, &b).map_err(io)?;
    let recons = out_a.status.success() && out_b.status.success() && fs::read(&a).map_err(io)? == fs::read(&b).map_err(io)?;
    let zf = zero_filled_report(&train_set[..1])?.mean_psnr;
    println!("    CLI reconstruction of training sample {id}: {} (zero-filled {zf:.4} dB)", String::from_utf8_lossy(&out_a.stdout).trim());

    outcome(
        datasets && losses && recons,
        format!("datasets identical: {datasets}; epoch-1 losses {first:.8} / {repeat:.8}; reconstructions identical: {recons}"),
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!("[{n}] {name}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => println!("[{n}] {name}: FAIL | error: {e}"),
        }
        results.push((n, name, r));
    };
    record(1, "solver correctness", solver_correctness());
    record(2, "gradient fidelity", gradient_fidelity());
    record(3, "adjoint consistency", adjoint_consistency());
    record(5, "MRI operator identities", operator_identities());
    record(8, "parameter-count ratios", parameter_counts());
    match Ctx::new() {
        Ok(mut ctx) => {
            record(4, "checkpointing", checkpointing(&ctx));
            record(6, "end-to-end learning", end_to_end(&mut ctx));
            record(7, "LT-RK4 vs LT-Euler ordering", ordering(&mut ctx));
            record(9, "determinism", determinism(&mut ctx));
        }
        Err(e) => {
            for (n, name) in [(4, "checkpointing"), (6, "end-to-end learning"), (7, "LT-RK4 vs LT-Euler ordering"), (9, "determinism")] {
                record(n, name, Err(ReconError::Config(format!("dataset setup failed: {e}"))));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    let mut failed = 0;
    for (n, name, r) in &results {
        let ok = matches!(r, Ok(o) if o.passed);
        failed += usize::from(!ok);
        println!("criterion {n} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
