use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser as _;
use clap::{Parser, Subcommand};
use log::info;

use odemri::bench::{out_of_band, render, solver_bench, BenchOde};
use odemri::data::{generate, load_dataset, read_tensor_file, split, write_tensor_file, GenConfig};
use odemri::gradcheck::{gradcheck_family, FLOOR, GAP_TOLERANCE, TOLERANCE};
use odemri::metrics::{psnr, ssim};
use odemri::mri::{default_center_fraction, ComplexImage, KSpace, Mask};
use odemri::train::{evaluate, train, zero_filled_report, TrainConfig};
use odemri::{Model, ModelSpec, ReconError, Result};

#[derive(Parser, Debug)]
#[command(name = "odemri", version, about = "Neural-ODE reconstruction of undersampled MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4, value_parser = clap::builder::PossibleValuesParser::new(["4", "8"]).map(|s| s.parse::<u32>().unwrap()))]
        af: u32,
        #[arg(long, default_value_t = 0.0)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one k-space file.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score a parameter archive, or the zero-filled baseline, on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "zero_filled")]
        model: Option<PathBuf>,
        /// Expected family; a different archive is rejected.
        #[arg(long)]
        family: Option<String>,
        #[arg(long, conflicts_with = "model")]
        zero_filled: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Global error and observed order of each tableau.
    SolverBench {
        #[arg(long, default_value = "exp_decay")]
        ode: String,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        steps: Vec<usize>,
    },
    /// Finite-difference check of model gradients.
    Gradcheck {
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn mask_from_file(path: &Path) -> Result<Mask> {
    let t = read_tensor_file(path)?;
    let sampled = t.data().iter().filter(|&&v| v != 0.0).count().max(1);
    let af = (t.numel() as f64 / sampled as f64).round() as u32;
    Mask::from_tensor(&t, af, default_center_fraction(af.max(1)), 0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, size, af, noise, seed } => {
            info!("gen-data: out={} count={count} size={size} af={af} noise={noise} seed={seed}", out.display());
            let cfg = GenConfig { count, size, acceleration: af, noise, seed };
            let entries = generate(&out, &cfg)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = match &config {
                Some(path) => TrainConfig::from_file(path)?,
                None => TrainConfig::default(),
            };
            info!("train: data={} out={}\n{}", data.display(), out.display(), cfg.render());
            let (tr, va) = split(load_dataset(&data)?, cfg.val_fraction)?;
            let outcome = train(&tr, &va, &cfg, Some(&out))?;
            let best = &outcome.log[outcome.best_epoch - 1];
            println!(
                "best epoch {}: val PSNR {:.3} dB, val SSIM {:.4}; archives in {}",
                outcome.best_epoch,
                best.val_psnr,
                best.val_ssim,
                out.display()
            );
        }
        Command::Reconstruct { input, mask, model, out, truth } => {
            info!(
                "reconstruct: input={} mask={} model={} out={} truth={}",
                input.display(),
                mask.display(),
                model.display(),
                out.display(),
                truth.as_deref().map_or("-".into(), |p| p.display().to_string())
            );
            let kspace = KSpace::from_tensor(&read_tensor_file(&input)?)?;
            let mask = mask_from_file(&mask)?;
            let model = Model::load(&model)?;
            info!("model {} with {} parameters", model.spec, model.param_count());
            let image = model.reconstruct(&kspace, &mask)?;
            write_tensor_file(&out, &image.to_tensor())?;
            if let Some(path) = truth {
                let truth = ComplexImage::from_tensor(&read_tensor_file(&path)?)?;
                println!("PSNR {:.4} dB, SSIM {:.6}", psnr(&image, &truth)?, ssim(&image, &truth)?);
            }
        }
        Command::Eval { data, model, family, zero_filled, out, batch_size } => {
            info!(
                "eval: data={} model={} family={} zero_filled={zero_filled} out={} batch_size={batch_size}",
                data.display(),
                model.as_deref().map_or("-".into(), |p| p.display().to_string()),
                family.as_deref().unwrap_or("-"),
                out.display()
            );
            let samples = load_dataset(&data)?;
            let report = match model {
                Some(path) => {
                    let model = Model::load(&path)?;
                    if let Some(name) = family {
                        let expected = ModelSpec::parse(&name)?;
                        if expected.family != model.spec.family || expected.kind != model.spec.kind {
                            return Err(ReconError::Config(format!(
                                "{} holds a {} model, not {expected}",
                                path.display(),
                                model.spec
                            )));
                        }
                    }
                    evaluate(&model, &samples, batch_size)?
                }
                None => zero_filled_report(&samples)?,
            };
            report.write_csv(&out)?;
            println!(
                "{} samples: mean PSNR {:.4} dB, mean SSIM {:.6}, {} parameters, {:.2} s, peak {} bytes",
                report.samples.len(),
                report.mean_psnr,
                report.mean_ssim,
                report.param_count,
                report.seconds,
                report.peak_bytes
            );
        }
        Command::SolverBench { ode, steps } => {
            info!("solver-bench: ode={ode} steps={steps:?}");
            let ode: BenchOde = ode.parse()?;
            let rows = solver_bench(ode, &steps)?;
            print!("{}", render(&rows));
            if ode == BenchOde::ExpDecay {
                let zero = solver_bench(BenchOde::Zero, &steps)?;
                println!("zero dynamics:");
                print!("{}", render(&zero));
            }
            let bad = out_of_band(&rows);
            if !bad.is_empty() {
                let which: Vec<String> = bad.iter().map(|r| format!("{} at n={}", r.kind, r.n_steps)).collect();
                return Err(ReconError::Numeric(format!("halving ratio outside its band: {}", which.join(", "))));
            }
        }
        Command::Gradcheck { family, size, seed } => {
            info!("gradcheck: family={family} size={size} seed={seed} tolerance={TOLERANCE} floor={FLOOR}");
            let report = gradcheck_family(ModelSpec::parse(&family)?, size, seed)?;
            println!(
                "{}: max relative error {:.3e} over {} of {} coordinates",
                report.family, report.max_rel_error, report.compared, report.checked
            );
            for (n, gap) in &report.gaps {
                println!("  adjoint gap at n={n}: {gap:.4e}");
            }
            if !report.fd_passed() {
                return Err(ReconError::Numeric(format!("gradient error {:.3e} exceeds {TOLERANCE}", report.max_rel_error)));
            }
            if !report.gaps_passed() {
                return Err(ReconError::Numeric(format!(
                    "adjoint gaps must decrease with n and stay below {GAP_TOLERANCE} at n=10 for rk4"
                )));
            }
            println!("PASS");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!(": {s}"));
                source = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
