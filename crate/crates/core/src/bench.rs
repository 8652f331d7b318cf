//! Order-of-accuracy benchmark on scalar test equations.

use std::fmt::Write as _;
use std::str::FromStr;

use odetensor::{Tape, Tensor, Var};

use crate::error::{ReconError, Result};
use crate::params::{Bound, ParamSet};
use crate::solvers::{integrate_values, SolverConfig, TableauKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOde {
    /// `dx/dt = −x`, `x₀ = 1`, exact `x(1) = e⁻¹`.
    ExpDecay,
    /// `dx/dt = 0`, `x₀ = 1`.
    Zero,
}

impl FromStr for BenchOde {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp_decay" => Ok(BenchOde::ExpDecay),
            "zero" => Ok(BenchOde::Zero),
            _ => Err(ReconError::Config(format!("unknown ODE {s:?}; expected exp_decay or zero"))),
        }
    }
}

impl BenchOde {
    fn rate(self) -> f64 {
        match self {
            BenchOde::ExpDecay => -1.0,
            BenchOde::Zero => 0.0,
        }
    }

    fn exact(self) -> f64 {
        self.rate().exp()
    }
}

/// Accepted error ratio when the step size halves.
pub fn halving_band(kind: TableauKind) -> (f64, f64) {
    match kind {
        TableauKind::Euler => (1.7, 2.3),
        TableauKind::Rk2 => (3.4, 4.6),
        TableauKind::Rk4 => (13.0, 19.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: TableauKind,
    pub n_steps: usize,
    pub error: f64,
    /// Observed order against the previous row of the same tableau.
    pub order: Option<f64>,
    /// Error ratio rescaled to a halving of the step size, `2^order`.
    pub halving_ratio: Option<f64>,
}

pub fn solve(ode: BenchOde, kind: TableauKind, n_steps: usize) -> Result<f64> {
    let rate = ode.rate();
    let f = move |tape: &mut Tape<f64>, _: &Bound, x: Var, _t: f64| -> Result<Var> { Ok(tape.scale(x, rate)?) };
    let cfg = SolverConfig::new(kind, n_steps)?;
    Ok(integrate_values(&f, &ParamSet::new(), &[], &Tensor::scalar(1.0), &cfg)?.data()[0])
}

pub fn solver_bench(ode: BenchOde, steps: &[usize]) -> Result<Vec<BenchRow>> {
    if steps.is_empty() {
        return Err(ReconError::Config("the step list is empty".into()));
    }
    let mut rows = Vec::new();
    for kind in TableauKind::ALL {
        let mut prev: Option<(usize, f64)> = None;
        for &n in steps {
            let error = (solve(ode, kind, n)? - ode.exact()).abs();
            let order = match prev {
                Some((pn, pe)) if pe > 0.0 && error > 0.0 && n != pn => Some((pe / error).ln() / (n as f64 / pn as f64).ln()),
                _ => None,
            };
            rows.push(BenchRow { kind, n_steps: n, error, order, halving_ratio: order.map(|p| 2f64.powf(p)) });
            prev = Some((n, error));
        }
    }
    Ok(rows)
}

/// Rows whose halving ratio falls outside the band of their tableau.
pub fn out_of_band(rows: &[BenchRow]) -> Vec<&BenchRow> {
    rows.iter()
        .filter(|r| {
            let (lo, hi) = halving_band(r.kind);
            r.halving_ratio.map_or(false, |q| !(lo..=hi).contains(&q))
        })
        .collect()
}

pub fn render(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<8} {:>8} {:>14} {:>10} {:>12}\n", "tableau", "n_steps", "global_error", "order", "halving");
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>14.6e} {:>10} {:>12}",
            r.kind.name(),
            r.n_steps,
            r.error,
            opt(r.order, 3),
            opt(r.halving_ratio, 3)
        );
    }
    s
}
