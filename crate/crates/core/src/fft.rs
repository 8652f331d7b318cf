//! Centered, orthonormal 2D DFT.
//!
//! `F x = fftshift(fft2(ifftshift(x))) / √(HW)`, so the DC coefficient sits at
//! `(H/2, W/2)` and `Fᴴ = F⁻¹`.

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

fn shift<T: Copy>(data: &[T], h: usize, w: usize, forward: bool) -> Vec<T> {
    let (sh, sw) = (h / 2, w / 2);
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = ((y + sh) % h, (x + sw) % w);
            if forward {
                out[ty * w + tx] = data[y * w + x];
            } else {
                out[y * w + x] = data[ty * w + tx];
            }
        }
    }
    out
}

fn transform(data: &mut [Complex<f64>], h: usize, w: usize, dir: FftDirection) {
    assert_eq!(data.len(), h * w);
    let mut planner = FftPlanner::<f64>::new();
    let rows = planner.plan_fft(w, dir);
    let cols = planner.plan_fft(h, dir);
    let mut buf = shift(data, h, w, false);
    rows.process(&mut buf);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        cols.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for (d, v) in data.iter_mut().zip(shift(&buf, h, w, true)) {
        *d = v * scale;
    }
}

/// Image → k-space, in place.
pub fn fft2c(data: &mut [Complex<f64>], h: usize, w: usize) {
    transform(data, h, w, FftDirection::Forward)
}

/// k-space → image, in place.
pub fn ifft2c(data: &mut [Complex<f64>], h: usize, w: usize) {
    transform(data, h, w, FftDirection::Inverse)
}
