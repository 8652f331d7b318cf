//! Single-coil Cartesian acquisition model.
//!
//! `E = M·F` with `F` the centered orthonormal DFT and `M` a column mask, so
//! `Eᴴ = Fᴴ·M` and `EᴴE` is an orthogonal projection. All transforms are
//! evaluated in f64 and stored as f32.

use num_complex::{Complex, Complex32};
use odetensor::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{ReconError, Result};
use crate::fft::{fft2c, ifft2c};
use crate::seed;

type C64 = Complex<f64>;

fn widen(data: &[Complex32]) -> Vec<C64> {
    data.iter().map(|c| Complex::new(c.re as f64, c.im as f64)).collect()
}

fn narrow(data: &[C64]) -> Vec<Complex32> {
    data.iter().map(|c| Complex::new(c.re as f32, c.im as f32)).collect()
}

fn planes_to_complex(t: &Tensor<f32>, op: &str) -> Result<(usize, usize, Vec<Complex32>)> {
    let (h, w) = match t.shape() {
        [2, h, w] | [1, 2, h, w] => (*h, *w),
        s => return Err(ReconError::Dimension(format!("{op}: expected a 2×H×W tensor, got {s:?}"))),
    };
    let (re, im) = t.data().split_at(h * w);
    Ok((h, w, re.iter().zip(im).map(|(&a, &b)| Complex::new(a, b)).collect()))
}

fn complex_to_planes(h: usize, w: usize, data: &[Complex32]) -> Tensor<f32> {
    let mut planes = Vec::with_capacity(2 * h * w);
    planes.extend(data.iter().map(|c| c.re));
    planes.extend(data.iter().map(|c| c.im));
    Tensor::new(&[2, h, w], planes).expect("2·H·W values")
}

/// Image-domain complex grid `x ∈ ℂ^{H×W}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex32>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ReconError::Dimension(format!(
                "{height}×{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ComplexImage { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexImage { height, width, data: vec![Complex32::new(0.0, 0.0); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    /// From a `2×H×W` (or `1×2×H×W`) real/imaginary tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w, data) = planes_to_complex(t, "image")?;
        Ok(ComplexImage { height: h, width: w, data })
    }

    /// `2×H×W` tensor with the real plane first.
    pub fn to_tensor(&self) -> Tensor<f32> {
        complex_to_planes(self.height, self.width, &self.data)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| (c.re as f64).hypot(c.im as f64)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr() as f64).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn check_shape(&self, h: usize, w: usize, op: &str) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(ReconError::Dimension(format!(
                "{op}: image is {}×{}, expected {h}×{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Measured k-space `y`. Entries outside the sampling mask are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    height: usize,
    width: usize,
    data: Vec<Complex32>,
    /// Standard deviation of the synthetic noise added at generation time.
    pub noise_std: f32,
}

impl KSpace {
    pub fn new(height: usize, width: usize, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ReconError::Dimension(format!(
                "{height}×{width} k-space needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(KSpace { height, width, data, noise_std: 0.0 })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w, data) = planes_to_complex(t, "k-space")?;
        Ok(KSpace { height: h, width: w, data, noise_std: 0.0 })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        complex_to_planes(self.height, self.width, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr() as f64).sum::<f64>().sqrt()
    }

    /// Add independent `N(0, std²)` noise to the real and imaginary parts of
    /// every sampled entry.
    pub fn add_noise(&mut self, mask: &Mask, std: f32, seed: u64) -> Result<()> {
        mask.check_width(self.width, "add_noise")?;
        if std <= 0.0 {
            return Ok(());
        }
        let normal = rand_distr::Normal::new(0.0f64, std as f64)
            .map_err(|e| ReconError::Config(format!("noise std {std}: {e}")))?;
        let mut rng = seed::rng(seed, seed::NOISE, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.columns[x] {
                    let c = &mut self.data[y * self.width + x];
                    c.re += rng.sample(normal) as f32;
                    c.im += rng.sample(normal) as f32;
                }
            }
        }
        self.noise_std = std;
        Ok(())
    }
}

/// Cartesian column (phase-encode) sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    columns: Vec<bool>,
    pub acceleration: u32,
    pub center_fraction: f64,
    pub seed: u64,
}

/// Center fraction used when none is given: 0.08 at AF 4, 0.04 at AF 8.
pub fn default_center_fraction(acceleration: u32) -> f64 {
    0.32 / acceleration.max(1) as f64
}

/// Draw a column mask.
///
/// `round(width·center_fraction)` contiguous columns around the DC column
/// are always sampled; every other column is sampled independently with the
/// probability that makes the expected total `width / acceleration`.
pub fn make_mask(width: usize, acceleration: u32, center_fraction: f64, seed: u64) -> Result<Mask> {
    if width < 8 {
        return Err(ReconError::Config(format!("mask width must be at least 8, got {width}")));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(ReconError::Config(format!("center fraction must lie in (0, 1), got {center_fraction}")));
    }
    if acceleration == 0 {
        return Err(ReconError::Config("acceleration factor must be positive".into()));
    }
    let center = (width as f64 * center_fraction).round() as usize;
    let target = width as f64 / acceleration as f64;
    if center as f64 > target {
        return Err(ReconError::Config(format!(
            "{center} center columns exceed the {target} columns allowed at acceleration {acceleration}"
        )));
    }
    let p = if width > center { (target - center as f64) / (width - center) as f64 } else { 0.0 };
    let start = width / 2 - center / 2;
    let mut rng = seed::rng(seed, seed::MASK, 0);
    let columns = (0..width)
        .map(|x| {
            let draw: f64 = rng.gen();
            (start..start + center).contains(&x) || draw < p
        })
        .collect();
    Ok(Mask { columns, acceleration, center_fraction, seed })
}

impl Mask {
    pub fn from_columns(columns: Vec<bool>, acceleration: u32, center_fraction: f64, seed: u64) -> Self {
        Mask { columns, acceleration, center_fraction, seed }
    }

    /// Every column sampled.
    pub fn full(width: usize) -> Self {
        Mask { columns: vec![true; width], acceleration: 1, center_fraction: 1.0, seed: 0 }
    }

    /// No column sampled.
    pub fn empty(width: usize) -> Self {
        Mask { columns: vec![false; width], acceleration: 0, center_fraction: 0.0, seed: 0 }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn sampled(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    /// The mask as a length-`W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.width()], self.columns.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
            .expect("one value per column")
    }

    pub fn from_tensor(t: &Tensor<f32>, acceleration: u32, center_fraction: f64, seed: u64) -> Result<Self> {
        if t.rank() != 1 {
            return Err(ReconError::Dimension(format!("mask must be a 1-D tensor, got {:?}", t.shape())));
        }
        Ok(Mask { columns: t.data().iter().map(|&v| v != 0.0).collect(), acceleration, center_fraction, seed })
    }

    fn check_width(&self, w: usize, op: &str) -> Result<()> {
        if self.width() != w {
            return Err(ReconError::Dimension(format!("{op}: mask has {} columns, data has {w}", self.width())));
        }
        Ok(())
    }

    fn apply(&self, data: &mut [C64], w: usize) {
        for (i, v) in data.iter_mut().enumerate() {
            if !self.columns[i % w] {
                *v = Complex::new(0.0, 0.0);
            }
        }
    }
}

/// `E x`: centered orthonormal DFT followed by masking.
pub fn forward_e(image: &ComplexImage, mask: &Mask) -> Result<KSpace> {
    mask.check_width(image.width, "forward_E")?;
    let mut buf = widen(&image.data);
    fft2c(&mut buf, image.height, image.width);
    mask.apply(&mut buf, image.width);
    Ok(KSpace { height: image.height, width: image.width, data: narrow(&buf), noise_std: 0.0 })
}

/// `Eᴴ y`: masking followed by the inverse DFT.
pub fn adjoint_e(kspace: &KSpace, mask: &Mask) -> Result<ComplexImage> {
    mask.check_width(kspace.width, "adjoint_E")?;
    let mut buf = widen(&kspace.data);
    mask.apply(&mut buf, kspace.width);
    ifft2c(&mut buf, kspace.height, kspace.width);
    Ok(ComplexImage { height: kspace.height, width: kspace.width, data: narrow(&buf) })
}

/// The initial condition `x(t₀) = Eᴴ y`.
pub fn zero_filled(measured: &KSpace, mask: &Mask) -> Result<ComplexImage> {
    adjoint_e(measured, mask)
}

/// Hard data consistency in f64: `Fᴴ((1−M)·F x + M·y)`.
fn consistency_f64(x: &mut [C64], measured: &[Complex32], mask: &Mask, h: usize, w: usize) {
    fft2c(x, h, w);
    for (i, v) in x.iter_mut().enumerate() {
        if mask.columns[i % w] {
            let m = measured[i];
            *v = Complex::new(m.re as f64, m.im as f64);
        }
    }
    ifft2c(x, h, w);
}

/// Replace the sampled k-space entries of `recon` by the measured ones.
pub fn data_consistency(recon: &ComplexImage, measured: &KSpace, mask: &Mask) -> Result<ComplexImage> {
    recon.check_shape(measured.height, measured.width, "data_consistency")?;
    mask.check_width(recon.width, "data_consistency")?;
    let mut buf = widen(&recon.data);
    consistency_f64(&mut buf, &measured.data, mask, recon.height, recon.width);
    Ok(ComplexImage { height: recon.height, width: recon.width, data: narrow(&buf) })
}

/// Data consistency as a differentiable layer on a `B×2×H×W` batch.
///
/// Sample `b` uses `measured[b]` and `masks[b]`. The layer is affine in its
/// input; its Jacobian is the projection `Fᴴ(1−M)F`, which is also its own
/// adjoint.
pub fn dc_layer<T: Real>(tape: &mut Tape<T>, x: Var, measured: &[KSpace], masks: &[Mask]) -> Result<Var> {
    let [b, c, h, w] = tape.try_value(x)?.dims4()?;
    if c != 2 || measured.len() != b || masks.len() != b {
        return Err(ReconError::Dimension(format!(
            "dc_layer: input {:?} with {} k-spaces and {} masks",
            [b, c, h, w],
            measured.len(),
            masks.len()
        )));
    }
    for (k, m) in measured.iter().zip(masks) {
        if (k.height, k.width) != (h, w) {
            return Err(ReconError::Dimension(format!("dc_layer: k-space {}×{} vs input {h}×{w}", k.height, k.width)));
        }
        m.check_width(w, "dc_layer")?;
    }
    let hw = h * w;
    let gather = move |src: &[T], s: usize| -> Vec<C64> {
        (0..hw).map(|p| Complex::new(src[s * 2 * hw + p].f64(), src[s * 2 * hw + hw + p].f64())).collect()
    };
    let scatter = move |dst: &mut [T], s: usize, v: &[C64]| {
        for (p, c) in v.iter().enumerate() {
            dst[s * 2 * hw + p] = T::of(c.re);
            dst[s * 2 * hw + hw + p] = T::of(c.im);
        }
    };
    let mut out = Tensor::zeros(&[b, 2, h, w]);
    for s in 0..b {
        let mut buf = gather(tape.value(x).data(), s);
        consistency_f64(&mut buf, &measured[s].data, &masks[s], h, w);
        scatter(out.data_mut(), s, &buf);
    }
    let masks: Vec<Mask> = masks.to_vec();
    Ok(tape.custom(&[x], out, move |ctx| {
        let mut g = Tensor::zeros(&[b, 2, h, w]);
        for (s, mask) in masks.iter().enumerate() {
            let mut buf = gather(ctx.grad.data(), s);
            fft2c(&mut buf, h, w);
            mask.apply_complement(&mut buf, w);
            ifft2c(&mut buf, h, w);
            scatter(g.data_mut(), s, &buf);
        }
        Ok(vec![Some(g)])
    })?)
}

impl Mask {
    fn apply_complement(&self, data: &mut [C64], w: usize) {
        for (i, v) in data.iter_mut().enumerate() {
            if self.columns[i % w] {
                *v = Complex::new(0.0, 0.0);
            }
        }
    }
}

/// Gradient-descent baseline on `½‖y − Ex‖² + λ‖x‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicalConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub iterations: usize,
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.lambda >= 0.0) || self.iterations == 0 {
            return Err(ReconError::Config(format!(
                "classical recon needs η ≥ 0, λ ≥ 0 and at least one iteration, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `x ← x − η[Eᴴ(Ex − y) + 2λx]` from the zero-filled start.
pub fn classical_recon(measured: &KSpace, mask: &Mask, cfg: &ClassicalConfig) -> Result<ComplexImage> {
    classical_recon_trace(measured, mask, cfg).map(|(x, _)| x)
}

/// Like [`classical_recon`], also returning `‖Ex − y‖₂` before every update
/// and after the last one.
pub fn classical_recon_trace(measured: &KSpace, mask: &Mask, cfg: &ClassicalConfig) -> Result<(ComplexImage, Vec<f64>)> {
    cfg.validate()?;
    mask.check_width(measured.width, "classical_recon")?;
    let (h, w) = (measured.height, measured.width);
    let y = widen(&measured.data);
    let mut x = widen(&zero_filled(measured, mask)?.data);
    let start = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let residual = |x: &[C64]| -> Vec<C64> {
        let mut r = x.to_vec();
        fft2c(&mut r, h, w);
        mask.apply(&mut r, w);
        for (v, m) in r.iter_mut().zip(&y) {
            *v -= m;
        }
        mask.apply(&mut r, w);
        r
    };
    for it in 0..cfg.iterations {
        let mut r = residual(&x);
        trace.push(r.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        ifft2c(&mut r, h, w);
        for (xi, gi) in x.iter_mut().zip(&r) {
            *xi -= (gi + *xi * (2.0 * cfg.lambda)) * cfg.learning_rate;
        }
        let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !norm.is_finite() || (start > 0.0 && norm > 1e6 * start) {
            return Err(ReconError::Numeric(format!(
                "classical recon diverged at iteration {it} (|x| = {norm:e}); reduce the learning rate η = {}",
                cfg.learning_rate
            )));
        }
    }
    trace.push(residual(&x).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
    Ok((ComplexImage { height: h, width: w, data: narrow(&x) }, trace))
}

/// Stack images into a `B×2×H×W` tensor.
pub fn images_to_batch<T: Real>(images: &[&ComplexImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| ReconError::Dimension("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 2 * h * w);
    for img in images {
        img.check_shape(h, w, "images_to_batch")?;
        data.extend(img.data.iter().map(|c| T::of(c.re as f64)));
        data.extend(img.data.iter().map(|c| T::of(c.im as f64)));
    }
    Ok(Tensor::new(&[images.len(), 2, h, w], data)?)
}

/// Split a `B×2×H×W` tensor into images.
pub fn batch_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ComplexImage>> {
    let [b, c, h, w] = t.dims4()?;
    if c != 2 {
        return Err(ReconError::Dimension(format!("expected 2 channels, got {c}")));
    }
    let hw = h * w;
    Ok((0..b)
        .map(|s| {
            let base = s * 2 * hw;
            let d = t.data();
            let data = (0..hw).map(|p| Complex::new(d[base + p].f64() as f32, d[base + hw + p].f64() as f32)).collect();
            ComplexImage { height: h, width: w, data }
        })
        .collect())
}
