//! Random ellipse phantoms with smooth phase.

use std::f64::consts::PI;

use num_complex::Complex32;
use rand::Rng;

use crate::error::{ReconError, Result};
use crate::mri::ComplexImage;
use crate::seed;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let p = (du * self.cos + dv * self.sin) / self.a;
        let q = (-du * self.sin + dv * self.cos) / self.b;
        p * p + q * q <= 1.0
    }
}

/// A `size × size` phantom, deterministic in `seed`.
///
/// Magnitude is a sum of 5 to 12 filled ellipses with intensities in
/// `[0.1, 1]`, normalized to a maximum of exactly 1. Phase is a random
/// quadratic polynomial in the normalized coordinates bounded by `π/4`.
pub fn make_phantom(size: usize, seed: u64) -> Result<ComplexImage> {
    if size < 32 {
        return Err(ReconError::Config(format!("phantom size must be at least 32, got {size}")));
    }
    let mut rng = seed::rng(seed, seed::PHANTOM, 0);
    let count = rng.gen_range(5..=12);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..PI);
            Ellipse {
                cx: rng.gen_range(-0.5..=0.5),
                cy: rng.gen_range(-0.5..=0.5),
                a: rng.gen_range(0.1..=0.6),
                b: rng.gen_range(0.1..=0.6),
                cos: angle.cos(),
                sin: angle.sin(),
                intensity: rng.gen_range(0.1..=1.0),
            }
        })
        .collect();
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
    let amplitude: f64 = rng.gen_range(0.25..=1.0);

    // Pixel centers on [-1, 1].
    let coord = |i: usize| (2.0 * i as f64 + 1.0) / size as f64 - 1.0;
    let mut magnitude = vec![0.0f64; size * size];
    let mut phase = vec![0.0f64; size * size];
    for y in 0..size {
        let v = coord(y);
        for x in 0..size {
            let u = coord(x);
            let k = y * size + x;
            magnitude[k] = ellipses.iter().filter(|e| e.contains(u, v)).map(|e| e.intensity).sum();
            let basis = [1.0, u, v, u * v, u * u, v * v];
            phase[k] = basis.iter().zip(&coeffs).map(|(b, c)| b * c).sum();
        }
    }

    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        // Every ellipse missed the grid; fall back to a centered disc.
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (coord(x), coord(y));
                magnitude[y * size + x] = if u * u + v * v <= 0.25 { 1.0 } else { 0.0 };
            }
        }
    }
    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    let phase_peak = phase.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let phase_scale = if phase_peak > 0.0 { amplitude * PI / 4.0 / phase_peak } else { 0.0 };

    let data = magnitude
        .iter()
        .zip(&phase)
        .map(|(&m, &p)| {
            let (s, c) = (p * phase_scale).sin_cos();
            let m = m / peak;
            Complex32::new((m * c) as f32, (m * s) as f32)
        })
        .collect();
    ComplexImage::new(size, size, data)
}
