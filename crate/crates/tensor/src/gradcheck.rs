//! Central finite differences, used as the independent oracle for every
//! backward rule.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<T, F>(f: F, input: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    let values = finite_diff_at(f, input, eps, &coords)?;
    Tensor::new(input.shape(), values.into_iter().map(T::of).collect())
}

/// Central differences restricted to the listed flat coordinates.
pub fn finite_diff_at<T, F>(mut f: F, input: &Tensor<T>, eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let mut probe = input.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + eps);
        let up = f(&probe)?;
        probe.data_mut()[i] = T::of(orig.f64() - eps);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Symmetric relative error `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest [`relative_error`] over pairs whose analytic value exceeds `floor`
/// in magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > floor)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
