//! Training loop, evaluation and the on-disk logs.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use odetensor::memory;
use rand::seq::SliceRandom;

use crate::data::Sample;
use crate::error::{ReconError, Result};
use crate::metrics::{psnr, ssim};
use crate::model::{Batch, Model, ModelSpec};
use crate::mri::{batch_to_images, zero_filled, ComplexImage};
use crate::optim::{Lookahead, OptimConfig, Optimizer, OptimizerKind};
use crate::seed;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_psnr,val_ssim,seconds,peak_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub family: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lookahead: bool,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub seed: u64,
    pub checkpoint: bool,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            family: ModelSpec::parse("ft_euler").expect("valid family"),
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::RAdam,
            lookahead: true,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            seed: 0,
            checkpoint: false,
            val_fraction: 0.2,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("invalid number {v:?}"))
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let (mut n_steps, mut dc) = (None, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ReconError::Config(format!("line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "family" => cfg.family = ModelSpec::parse(value).map_err(|e| e.to_string())?,
                    "epochs" => cfg.epochs = parse_num(value)?,
                    "batch_size" => cfg.batch_size = parse_num(value)?,
                    "learning_rate" => cfg.learning_rate = parse_num(value)?,
                    "optimizer" => cfg.optimizer = value.parse().map_err(|e: ReconError| e.to_string())?,
                    "lookahead" => cfg.lookahead = parse_bool(value)?,
                    "lookahead_k" => cfg.lookahead_k = parse_num(value)?,
                    "lookahead_alpha" => cfg.lookahead_alpha = parse_num(value)?,
                    "seed" => cfg.seed = parse_num(value)?,
                    "checkpoint" => cfg.checkpoint = parse_bool(value)?,
                    "n_steps" => n_steps = Some(parse_num(value)?),
                    "dc_every_step" => dc = Some(parse_bool(value)?),
                    "val_fraction" => cfg.val_fraction = parse_num(value)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        if let Some(n) = n_steps {
            cfg.family.n_steps = n;
        }
        if let Some(d) = dc {
            cfg.family.dc_every_step = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ReconError::io(path, e))?;
        TrainConfig::parse(&text).map_err(|e| match e {
            ReconError::Config(msg) => ReconError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ReconError::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lookahead && (self.lookahead_k == 0 || !(0.0..=1.0).contains(&self.lookahead_alpha)) {
            return bad("lookahead needs lookahead_k ≥ 1 and lookahead_alpha in [0, 1]".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        self.family.solver()?;
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            lookahead: self.lookahead.then_some(Lookahead { k: self.lookahead_k, alpha: self.lookahead_alpha }),
        }
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let f = &self.family;
        let _ = writeln!(s, "family = {}", f.name());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "lookahead = {}", self.lookahead);
        let _ = writeln!(s, "lookahead_k = {}", self.lookahead_k);
        let _ = writeln!(s, "lookahead_alpha = {}", self.lookahead_alpha);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint);
        let _ = writeln!(s, "n_steps = {}", f.n_steps);
        let _ = writeln!(s, "dc_every_step = {}", f.dc_every_step);
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub seconds: f64,
    pub peak_bytes: usize,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.8},{:.3},{}",
            self.epoch, self.train_loss, self.val_psnr, self.val_ssim, self.seconds, self.peak_bytes
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub param_count: usize,
    pub seconds: f64,
    pub peak_bytes: usize,
}

impl MetricsReport {
    fn from_samples(samples: Vec<SampleMetrics>, param_count: usize, seconds: f64, peak_bytes: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mean_psnr = samples.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = samples.iter().map(|s| s.ssim).sum::<f64>() / n;
        MetricsReport { samples, mean_psnr, mean_ssim, param_count, seconds, peak_bytes }
    }

    /// `id,psnr,ssim` rows and a trailing `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim\n");
        for m in &self.samples {
            let _ = writeln!(s, "{},{:.6},{:.8}", m.id, m.psnr, m.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.6},{:.8}", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| ReconError::io(path, e))
    }
}

fn score(preds: Vec<ComplexImage>, samples: &[Sample]) -> Result<Vec<SampleMetrics>> {
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok(SampleMetrics { id: s.id.clone(), psnr: psnr(p, &s.truth)?, ssim: ssim(p, &s.truth)? }))
        .collect()
}

pub fn make_batch(samples: &[&Sample], with_truth: bool) -> Result<Batch<f32>> {
    let truths: Vec<&ComplexImage> = samples.iter().map(|s| &s.truth).collect();
    Batch::new(
        samples.iter().map(|s| s.kspace.clone()).collect(),
        samples.iter().map(|s| s.mask.clone()).collect(),
        with_truth.then_some(&truths[..]),
    )
}

/// Reconstruct every sample and score it against its truth.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let start = Instant::now();
    let live = memory::live_bytes();
    memory::reset_peak();
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let out = model.reconstruct_batch(&make_batch(&refs, false)?)?;
        rows.extend(score(batch_to_images(&out)?, chunk)?);
    }
    let peak = memory::peak_bytes().saturating_sub(live);
    Ok(MetricsReport::from_samples(rows, model.param_count(), start.elapsed().as_secs_f64(), peak))
}

/// Metrics of the zero-filled starting images.
pub fn zero_filled_report(samples: &[Sample]) -> Result<MetricsReport> {
    let start = Instant::now();
    let preds = samples.iter().map(|s| zero_filled(&s.kspace, &s.mask)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(score(preds, samples)?, 0, start.elapsed().as_secs_f64(), 0))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Train on `train`, validating on `val` after every epoch.
///
/// With `out_dir`, `metrics.csv` is appended as epochs finish and
/// `best.params` / `final.params` are written.
pub fn train(train: &[Sample], val: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ReconError::Config("training needs non-empty train and validation sets".into()));
    }
    let mut model = Model::init(cfg.family, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optim(), &model.params)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| ReconError::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(|e| ReconError::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| ReconError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    log::info!(
        "training {} with {} parameters on {} samples, validating on {}",
        cfg.family,
        model.param_count(),
        train.len(),
        val.len()
    );

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, seed::SHUFFLE, epoch as u64));
        let live = memory::live_bytes();
        memory::reset_peak();
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, true)?;
            let (loss, grads) = model.loss_and_grads(&batch, cfg.checkpoint).map_err(|e| match e {
                ReconError::Numeric(m) => ReconError::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(ReconError::Numeric(format!("loss diverged at epoch {epoch}, batch {}", b + 1)));
            }
            opt.step(&mut model.params, &grads)?;
            total += loss * refs.len() as f64;
        }
        let peak_bytes = memory::peak_bytes().saturating_sub(live);
        let report = evaluate(&model, val, cfg.batch_size)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_psnr: report.mean_psnr,
            val_ssim: report.mean_ssim,
            seconds: start.elapsed().as_secs_f64(),
            peak_bytes,
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, val PSNR {:.3} dB, val SSIM {:.4}, {:.1} s, peak {} bytes",
            entry.train_loss,
            entry.val_psnr,
            entry.val_ssim,
            entry.seconds,
            entry.peak_bytes
        );
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", entry.csv_row()).map_err(|e| ReconError::io(&*path, e))?;
        }
        if best.as_ref().map_or(true, |(s, _, _)| entry.val_ssim > *s) {
            if let Some(dir) = out_dir {
                model.save(&dir.join("best.params"))?;
            }
            best = Some((entry.val_ssim, epoch, model.clone()));
        }
        log.push(entry);
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("final.params"))?;
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { final_model: model, best_model, best_epoch, log })
}
