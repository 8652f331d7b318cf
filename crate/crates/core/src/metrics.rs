//! PSNR, SSIM and the training loss, all on magnitude images.

use odetensor::{Real, Tape, Tensor, Var};

use crate::error::{ReconError, Result};
use crate::mri::ComplexImage;

pub const WINDOW: usize = 7;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn same_extent(pred: &ComplexImage, truth: &ComplexImage) -> Result<()> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(ReconError::Dimension(format!(
            "prediction is {}×{}, truth is {}×{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    Ok(())
}

fn peak(values: &[f64]) -> f64 {
    values.iter().cloned().fold(0.0, f64::max)
}

/// `10·log₁₀(max|truth|² / MSE)`; `+∞` when the magnitudes agree exactly.
pub fn psnr(pred: &ComplexImage, truth: &ComplexImage) -> Result<f64> {
    same_extent(pred, truth)?;
    let (p, t) = (pred.magnitude(), truth.magnitude());
    let max = peak(&t);
    if max == 0.0 {
        return Err(ReconError::Contract("PSNR is undefined for an all-zero truth image".into()));
    }
    let mse = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max * max / mse).log10())
}

/// Mean SSIM of the magnitudes over all valid 7×7 windows, with the dynamic
/// range taken from the truth.
pub fn ssim(pred: &ComplexImage, truth: &ComplexImage) -> Result<f64> {
    same_extent(pred, truth)?;
    let t = truth.magnitude();
    let range = peak(&t);
    ssim_with_range(&pred.magnitude(), &t, pred.height(), pred.width(), range)
}

/// SSIM of two real images with an explicit dynamic range.
pub fn ssim_with_range(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    Ok(Ssim::new(x, y, h, w, range)?.value)
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Iterator<Item = f64>, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    let mut it = values;
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += it.next().expect("h·w values");
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
    let ww = w + 1;
    s[r1 * ww + c1] - s[r0 * ww + c1] - s[r1 * ww + c0] + s[r0 * ww + c0]
}

struct Ssim {
    value: f64,
    h: usize,
    w: usize,
    /// Per-window coefficients of `∂S/∂x_p = α + β·x_p + γ·y_p`.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl Ssim {
    fn new(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> Result<Self> {
        if h < WINDOW || w < WINDOW {
            return Err(ReconError::Contract(format!("SSIM needs at least {WINDOW}×{WINDOW} pixels, got {h}×{w}")));
        }
        if x.len() != h * w || y.len() != h * w {
            return Err(ReconError::Dimension(format!("SSIM inputs must hold {} values", h * w)));
        }
        let c1 = (K1 * range).powi(2);
        let c2 = (K2 * range).powi(2);
        let sx = integral(x.iter().cloned(), h, w);
        let sy = integral(y.iter().cloned(), h, w);
        let sxx = integral(x.iter().map(|v| v * v), h, w);
        let syy = integral(y.iter().map(|v| v * v), h, w);
        let sxy = integral(x.iter().zip(y).map(|(a, b)| a * b), h, w);
        let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
        let n = (WINDOW * WINDOW) as f64;
        let cov_norm = 1.0 / (n - 1.0);
        let mut total = 0.0;
        let (mut alpha, mut beta, mut gamma) = (vec![0.0; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow]);
        for r in 0..oh {
            for c in 0..ow {
                let bs = |s: &[f64]| box_sum(s, w, r, c, r + WINDOW, c + WINDOW);
                let (mx, my) = (bs(&sx) / n, bs(&sy) / n);
                let vx = (bs(&sxx) - n * mx * mx) * cov_norm;
                let vy = (bs(&syy) - n * my * my) * cov_norm;
                let vxy = (bs(&sxy) - n * mx * my) * cov_norm;
                let (a1, a2) = (2.0 * mx * my + c1, 2.0 * vxy + c2);
                let (b1, b2) = (mx * mx + my * my + c1, vx + vy + c2);
                let s = a1 * a2 / (b1 * b2);
                total += s;

                let d_mx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
                let d_vx = -s / b2;
                let d_vxy = 2.0 * a1 / (b1 * b2);
                let k = r * ow + c;
                alpha[k] = d_mx / n - d_vx * cov_norm * 2.0 * mx - d_vxy * cov_norm * my;
                beta[k] = d_vx * cov_norm * 2.0;
                gamma[k] = d_vxy * cov_norm;
            }
        }
        Ok(Ssim { value: total / (oh * ow) as f64, h, w, alpha, beta, gamma })
    }

    /// Gradient of the mean SSIM with respect to `x`.
    fn grad(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
        let sa = integral(self.alpha.iter().cloned(), oh, ow);
        let sb = integral(self.beta.iter().cloned(), oh, ow);
        let sg = integral(self.gamma.iter().cloned(), oh, ow);
        let scale = 1.0 / (oh * ow) as f64;
        let mut g = vec![0.0; h * w];
        for r in 0..h {
            let (r0, r1) = (r.saturating_sub(WINDOW - 1), (r + 1).min(oh));
            for c in 0..w {
                let (c0, c1) = (c.saturating_sub(WINDOW - 1), (c + 1).min(ow));
                let p = r * w + c;
                let a = box_sum(&sa, ow, r0, c0, r1, c1);
                let b = box_sum(&sb, ow, r0, c0, r1, c1);
                let gm = box_sum(&sg, ow, r0, c0, r1, c1);
                g[p] = (a + b * x[p] + gm * y[p]) * scale;
            }
        }
        g
    }
}

/// Mean over the batch of per-image SSIM between `pred` (`B×1×H×W`) and the
/// fixed `truth`, each image using its own truth maximum as the range.
pub fn ssim_op<T: Real>(tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>) -> Result<Var> {
    let [b, c, h, w] = tape.try_value(pred)?.dims4()?;
    if c != 1 || truth.shape() != [b, 1, h, w] {
        return Err(ReconError::Dimension(format!(
            "ssim_op: prediction {:?} vs truth {:?}",
            [b, c, h, w],
            truth.shape()
        )));
    }
    let hw = h * w;
    let truth64: Vec<Vec<f64>> = (0..b).map(|s| truth.data()[s * hw..(s + 1) * hw].iter().map(|v| v.f64()).collect()).collect();
    let pred64: Vec<Vec<f64>> = {
        let d = tape.value(pred).data();
        (0..b).map(|s| d[s * hw..(s + 1) * hw].iter().map(|v| v.f64()).collect()).collect()
    };
    let mut parts = Vec::with_capacity(b);
    let mut total = 0.0;
    for (x, y) in pred64.iter().zip(&truth64) {
        let s = Ssim::new(x, y, h, w, peak(y))?;
        total += s.value;
        parts.push(s);
    }
    let value = Tensor::scalar(T::of(total / b as f64));
    Ok(tape.custom(&[pred], value, move |ctx| {
        let g = ctx.grad.data()[0].f64() / b as f64;
        let mut out = Vec::with_capacity(b * hw);
        for ((s, x), y) in parts.iter().zip(&pred64).zip(&truth64) {
            out.extend(s.grad(x, y).into_iter().map(|v| T::of(v * g)));
        }
        Ok(vec![Some(Tensor::new(&[b, 1, h, w], out)?)])
    })?)
}

/// `mean|(|pred|) − truth| + 0.5·(1 − SSIM)` for a `B×2×H×W` prediction and
/// `B×1×H×W` truth magnitudes.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth_mag: &Tensor<T>) -> Result<Var> {
    let mag = tape.magnitude(pred)?;
    let truth = tape.constant(truth_mag.clone());
    let diff = tape.sub(mag, truth)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;
    let s = ssim_op(tape, mag, truth_mag)?;
    let dissim = tape.affine(s, -0.5, 0.5)?;
    Ok(tape.add(l1, dissim)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use num_complex::Complex32;
    use odetensor::gradcheck::{finite_diff_at, max_relative_error};
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = seed::rng(seed, 5, 0);
        ComplexImage::new(h, w, (0..h * w).map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
            .unwrap()
    }

    fn real(values: Vec<f64>, h: usize, w: usize) -> ComplexImage {
        ComplexImage::new(h, w, values.into_iter().map(|v| Complex32::new(v as f32, 0.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let t = image(16, 16, 1);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);

        // max 1 and an error of 0.1 everywhere: MSE 0.01.
        let mut truth = vec![0.5; 64];
        truth[0] = 1.0;
        let pred: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&real(pred, 8, 8), &real(truth.clone(), 8, 8)).unwrap() - 20.0).abs() < 1e-5);

        let p = image(16, 16, 2);
        let scaled = |img: &ComplexImage, c: f32| ComplexImage::new(16, 16, img.data().iter().map(|v| v * c).collect()).unwrap();
        let a = psnr(&p, &t).unwrap();
        assert!((psnr(&scaled(&p, 3.0), &scaled(&t, 3.0)).unwrap() - a).abs() < 1e-5);

        assert!(matches!(psnr(&p, &ComplexImage::zeros(16, 16)), Err(ReconError::Contract(_))));
    }

    #[test]
    fn ssim_examples() {
        let t = image(16, 16, 1);
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-6);

        let (a, b) = (image(12, 12, 3).magnitude(), image(12, 12, 4).magnitude());
        let ab = ssim_with_range(&a, &b, 12, 12, 1.5).unwrap();
        let ba = ssim_with_range(&b, &a, 12, 12, 1.5).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        let c1 = (K1 * 1.0f64).powi(2);
        let want = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let got = ssim_with_range(&[0.5; 100], &[0.6; 100], 10, 10, 1.0).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");

        assert!(matches!(ssim(&image(6, 10, 1), &image(6, 10, 2)), Err(ReconError::Contract(_))));
    }

    fn loss_of(pred: &Tensor<f64>, truth: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let l = recon_loss(&mut tape, p, truth).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn loss_examples() {
        let t = image(16, 16, 7);
        let pred: Tensor<f64> = t.to_tensor().cast().reshape(&[1, 2, 16, 16]).unwrap();
        let mag = Tensor::new(&[1, 1, 16, 16], t.magnitude()).unwrap();
        assert!(loss_of(&pred, &mag).abs() < 1e-6);
        for s in 0..10 {
            let other: Tensor<f64> = image(16, 16, 100 + s).to_tensor().cast().reshape(&[1, 2, 16, 16]).unwrap();
            assert!(loss_of(&other, &mag) >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let truth = image(16, 16, 11);
        let mag = Tensor::new(&[2, 1, 16, 16], [truth.magnitude(), image(16, 16, 12).magnitude()].concat()).unwrap();
        let mut pred: Vec<f64> = Vec::new();
        for s in [13, 14] {
            pred.extend(image(16, 16, s).to_tensor().cast::<f64>().data());
        }
        let pred = Tensor::new(&[2, 2, 16, 16], pred).unwrap();

        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let l = recon_loss(&mut tape, p, &mag).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(p).unwrap().data().to_vec();

        let coords: Vec<usize> = (0..pred.numel()).step_by(7).collect();
        let numeric = finite_diff_at(|x| Ok(loss_of(x, &mag)), &pred, 1e-5, &coords).unwrap();
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        let err = max_relative_error(&picked, &numeric, 1e-4);
        assert!(err < 1e-3, "max relative error {err}");
    }
}
