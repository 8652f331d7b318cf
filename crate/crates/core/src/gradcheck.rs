//! Finite-difference checks of whole-model gradients.
//!
//! The model is cast to f64 and the same forward code is differentiated
//! twice: by the tape and by central differences of the loss. Fixed-solver
//! families are checked on the through-solver path; `fa` families also
//! report the gap between adjoint and through-solver gradients as the step
//! count grows.

use num_complex::Complex32;
use odetensor::gradcheck::{finite_diff_at, max_relative_error};
use odetensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{ReconError, Result};
use crate::model::{Batch, Family, Model, ModelSpec};
use crate::mri::{default_center_fraction, forward_e, make_mask, ComplexImage};
use crate::seed;

pub const TOLERANCE: f64 = 1e-3;
pub const FLOOR: f64 = 1e-4;
pub const EPS: f64 = 1e-7;
pub const STEPS: usize = 3;
pub const COORDS_PER_TENSOR: usize = 6;
pub const GAP_STEPS: [usize; 3] = [5, 10, 20];
pub const GAP_TOLERANCE: f64 = 5e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub family: String,
    pub size: usize,
    pub max_rel_error: f64,
    /// Coordinates compared (analytic magnitude above the floor).
    pub compared: usize,
    pub checked: usize,
    /// `(n_steps, ‖g_FA − g_FT‖ / ‖g_FT‖)` for `fa` families.
    pub gaps: Vec<(usize, f64)>,
}

impl GradcheckReport {
    pub fn fd_passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.compared > 0
    }

    pub fn gaps_passed(&self) -> bool {
        let decreasing = self.gaps.windows(2).all(|w| w[1].1 < w[0].1);
        let bounded = !self.family.ends_with("rk4")
            || self.gaps.iter().filter(|(n, _)| *n == 10).all(|(_, g)| *g < GAP_TOLERANCE);
        decreasing && bounded
    }

    pub fn passed(&self) -> bool {
        self.fd_passed() && self.gaps_passed()
    }
}

/// A random complex truth, a random mask and the measured k-space, as a
/// one-sample f64 batch.
pub fn probe_batch(size: usize, seed: u64) -> Result<Batch<f64>> {
    let mut rng = seed::rng(seed, seed::SAMPLE, 0xc4ec);
    let data = (0..size * size).map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let truth = ComplexImage::new(size, size, data)?;
    let mask = make_mask(size, 4, default_center_fraction(4), seed)?;
    let k = forward_e(&truth, &mask)?;
    Batch::new(vec![k], vec![mask], Some(&[&truth]))
}

fn flat(grads: &[Tensor<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// ‖g_FA − g_FT‖ / ‖g_FT‖ over all parameters.
pub fn adjoint_gap(model: &Model<f64>, batch: &Batch<f64>, n_steps: usize) -> Result<f64> {
    let mut ft = model.clone();
    ft.spec.family = Family::Ft;
    ft.spec.n_steps = n_steps;
    let mut fa = ft.clone();
    fa.spec.family = Family::Fa;
    let (_, g_ft) = ft.loss_and_grads(batch, false)?;
    let (_, g_fa) = fa.loss_and_grads(batch, false)?;
    let (a, b) = (flat(&g_fa), flat(&g_ft));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    Ok(diff / norm)
}

pub fn gradcheck_family(spec: ModelSpec, size: usize, seed: u64) -> Result<GradcheckReport> {
    if !(8..=16).contains(&size) {
        return Err(ReconError::Config(format!("gradcheck size must lie in [8, 16], got {size}")));
    }
    let batch = probe_batch(size, seed)?;
    let mut spec = spec;
    spec.n_steps = STEPS;
    let model = Model::<f32>::init(spec, seed)?.cast::<f64>();

    // The through-solver path is the one checked for fa families too.
    let mut ft = model.clone();
    if ft.spec.family == Family::Fa {
        ft.spec.family = Family::Ft;
    }
    let (_, grads) = ft.loss_and_grads(&batch, false)?;

    let mut rng = seed::rng(seed, seed::SAMPLE, 0x6c);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, value) in ft.params.values().iter().enumerate() {
        let n = value.numel();
        let coords: Vec<usize> =
            if n <= COORDS_PER_TENSOR { (0..n).collect() } else { sample(&mut rng, n, COORDS_PER_TENSOR).into_vec() };
        let mut probe = ft.clone();
        let fd = finite_diff_at(
            |t| {
                probe.params.values_mut()[k] = t.clone();
                probe.loss(&batch).map_err(Into::into)
            },
            value,
            EPS,
            &coords,
        )?;
        analytic.extend(coords.iter().map(|&i| grads[k].data()[i]));
        numeric.extend(fd);
    }
    let compared = analytic.iter().filter(|a| a.abs() > FLOOR).count();
    let max_rel_error = max_relative_error(&analytic, &numeric, FLOOR);

    let gaps = if spec.family == Family::Fa {
        GAP_STEPS.iter().map(|&n| Ok((n, adjoint_gap(&model, &batch, n)?))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(GradcheckReport { family: spec.name(), size, max_rel_error, compared, checked: analytic.len(), gaps })
}
