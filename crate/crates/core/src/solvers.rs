//! Explicit Runge–Kutta integration over `[0, 1]` with two gradient paths:
//! differentiation through the recorded solver steps, and the adjoint
//! method integrated backward in time.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use odetensor::{Real, Tape, Tensor, TensorError, Var};

use crate::error::{ReconError, Result};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TableauKind {
    Euler,
    Rk2,
    Rk4,
}

impl TableauKind {
    pub const ALL: [TableauKind; 3] = [TableauKind::Euler, TableauKind::Rk2, TableauKind::Rk4];

    pub fn name(self) -> &'static str {
        match self {
            TableauKind::Euler => "euler",
            TableauKind::Rk2 => "rk2",
            TableauKind::Rk4 => "rk4",
        }
    }

    pub fn stages(self) -> usize {
        match self {
            TableauKind::Euler => 1,
            TableauKind::Rk2 => 2,
            TableauKind::Rk4 => 4,
        }
    }

    pub fn from_stages(s: usize) -> Result<Self> {
        match s {
            1 => Ok(TableauKind::Euler),
            2 => Ok(TableauKind::Rk2),
            4 => Ok(TableauKind::Rk4),
            _ => Err(ReconError::Config(format!("no tableau with {s} stages"))),
        }
    }
}

impl fmt::Display for TableauKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TableauKind {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(TableauKind::Euler),
            "rk2" => Ok(TableauKind::Rk2),
            "rk4" => Ok(TableauKind::Rk4),
            _ => Err(ReconError::Config(format!("unknown tableau {s:?}; expected one of euler, rk2, rk4"))),
        }
    }
}

/// Explicit tableau: `x_{n+1} = x_n + Σ aᵢ Fᵢ` with
/// `Fᵢ = h·f(x_n + Σ_{j<i} b_ij F_j, t_n + cᵢh)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<f64>,
    /// Row `i` holds `b_ij` for `j < i`.
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.a.len()
    }
}

pub fn tableau(kind: TableauKind) -> ButcherTableau {
    match kind {
        TableauKind::Euler => ButcherTableau { a: vec![1.0], b: vec![vec![]], c: vec![0.0] },
        TableauKind::Rk2 => ButcherTableau { a: vec![0.5, 0.5], b: vec![vec![], vec![1.0]], c: vec![0.0, 1.0] },
        TableauKind::Rk4 => ButcherTableau {
            a: vec![1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0],
            b: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            c: vec![0.0, 0.5, 0.5, 1.0],
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub kind: TableauKind,
    pub n_steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl SolverConfig {
    pub fn new(kind: TableauKind, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(ReconError::Config("n_steps must be at least 1".into()));
        }
        Ok(SolverConfig { kind, n_steps, t0: 0.0, t1: 1.0 })
    }

    pub fn h(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }
}

/// Right-hand side `f(x, t)`; parameters and fixed inputs are looked up in
/// `env`.
pub trait OdeFunc<T: Real> {
    fn eval(&self, tape: &mut Tape<T>, env: &Bound, x: Var, t: f64) -> Result<Var>;
}

impl<T: Real, F> OdeFunc<T> for F
where
    F: Fn(&mut Tape<T>, &Bound, Var, f64) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape<T>, env: &Bound, x: Var, t: f64) -> Result<Var> {
        self(tape, env, x, t)
    }
}

/// Record `params` (as leaves when `trainable`) and named constants.
pub fn bind_env<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    consts: &[(&str, &Tensor<T>)],
    trainable: bool,
) -> Bound {
    let mut env = params.bind(tape, trainable);
    for (name, value) in consts {
        let v = tape.constant((*value).clone());
        env = env.with(name, v);
    }
    env
}

/// One explicit RK step recorded on `tape`.
pub fn rk_step<T: Real>(
    tape: &mut Tape<T>,
    f: &dyn OdeFunc<T>,
    env: &Bound,
    x: Var,
    t: f64,
    h: f64,
    tab: &ButcherTableau,
) -> Result<Var> {
    if !(h > 0.0) {
        return Err(ReconError::Config(format!("step size must be positive, got {h}")));
    }
    let mut stages: Vec<Var> = Vec::with_capacity(tab.stages());
    for i in 0..tab.stages() {
        let mut xi = x;
        for (j, &bij) in tab.b[i].iter().enumerate() {
            if bij != 0.0 {
                xi = tape.axpy(xi, bij, stages[j])?;
            }
        }
        let fi = f.eval(tape, env, xi, t + tab.c[i] * h)?;
        if !tape.value(fi).is_finite() {
            return Err(ReconError::Numeric(format!("stage {} produced non-finite values at t = {t}", i + 1)));
        }
        stages.push(tape.scale(fi, h)?);
    }
    let mut out = x;
    for (&ai, &fi) in tab.a.iter().zip(&stages) {
        if ai != 0.0 {
            out = tape.axpy(out, ai, fi)?;
        }
    }
    Ok(out)
}

fn check_divergence<T: Real>(value: &Tensor<T>, start: f64, step: usize) -> Result<()> {
    let norm = value.norm();
    if !norm.is_finite() || (start > 0.0 && norm > 1e6 * start) {
        return Err(ReconError::Numeric(format!(
            "integration diverged at step {step}: |x| = {norm:e} against |x0| = {start:e}"
        )));
    }
    Ok(())
}

fn at_step(step: usize, e: ReconError) -> ReconError {
    match e {
        ReconError::Numeric(msg) | ReconError::Tensor(TensorError::NonFinite(msg)) => {
            ReconError::Numeric(format!("step {step}: {msg}"))
        }
        other => other,
    }
}

/// `n_steps` RK steps from `x0` recorded on `tape`.
///
/// With `checkpoint`, each step is a checkpointed segment: only step
/// boundaries stay on the tape and stage activations are recomputed during
/// the backward sweep.
pub fn integrate<T: Real>(
    tape: &mut Tape<T>,
    f: &Rc<dyn OdeFunc<T>>,
    env: &Bound,
    x0: Var,
    cfg: &SolverConfig,
    checkpoint: bool,
) -> Result<Var> {
    let tab = Rc::new(tableau(cfg.kind));
    let h = cfg.h();
    let start = tape.try_value(x0)?.norm();
    let mut x = x0;
    for n in 0..cfg.n_steps {
        let t = cfg.t0 + n as f64 * h;
        x = if checkpoint {
            let (f, tab, env0) = (Rc::clone(f), Rc::clone(&tab), env.clone());
            let mut inputs = vec![x];
            inputs.extend_from_slice(env.vars());
            tape.checkpoint(&inputs, move |tape, vars| {
                let env = env0.rebind(&vars[1..]);
                Ok(rk_step(tape, f.as_ref(), &env, vars[0], t, h, &tab)?)
            })
            .map_err(ReconError::from)
        } else {
            rk_step(tape, f.as_ref(), env, x, t, h, &tab)
        }
        .map_err(|e| at_step(n + 1, e))?;
        check_divergence(tape.value(x), start, n + 1)?;
    }
    Ok(x)
}

/// Integrate without recording gradients; every step runs on its own
/// short-lived tape.
pub fn integrate_values<T: Real>(
    f: &dyn OdeFunc<T>,
    params: &ParamSet<T>,
    consts: &[(&str, &Tensor<T>)],
    x0: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<Tensor<T>> {
    let tab = tableau(cfg.kind);
    let h = cfg.h();
    let start = x0.norm();
    let mut x = x0.clone();
    for n in 0..cfg.n_steps {
        let mut tape = Tape::new();
        let env = bind_env(&mut tape, params, consts, false);
        let xv = tape.constant(x);
        let out = rk_step(&mut tape, f, &env, xv, cfg.t0 + n as f64 * h, h, &tab).map_err(|e| at_step(n + 1, e))?;
        x = tape.value(out).clone();
        check_divergence(&x, start, n + 1)?;
    }
    Ok(x)
}

/// Loss value and gradients with respect to the initial state and every
/// parameter.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    pub loss: f64,
    pub x0: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

/// Gradients of `loss_fn(integrate(f, x0))` by backpropagating through the
/// recorded solver operations.
pub fn through_solver_grad<T: Real>(
    f: &Rc<dyn OdeFunc<T>>,
    params: &ParamSet<T>,
    consts: &[(&str, &Tensor<T>)],
    x0: &Tensor<T>,
    cfg: &SolverConfig,
    checkpoint: bool,
    loss_fn: &dyn Fn(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Gradients<T>> {
    let mut tape = Tape::new();
    let env = bind_env(&mut tape, params, consts, true);
    let x0v = tape.leaf(x0.clone());
    let x1 = integrate(&mut tape, f, &env, x0v, cfg, checkpoint)?;
    let loss = loss_fn(&mut tape, x1)?;
    let value = tape.try_value(loss)?.data()[0].f64();
    let mut grads = tape.backward(loss)?;
    let gx = grads.take(x0v).expect("x0 is a leaf");
    let gp = params.grads_from(&env, &mut grads)?;
    Ok(Gradients { loss: value, x0: gx, params: gp })
}

/// Result of the backward adjoint sweep.
#[derive(Clone, Debug)]
pub struct AdjointGrads<T: Real> {
    /// `x(t₀)` recovered by integrating the state backward.
    pub x0: Tensor<T>,
    /// `∂L/∂x(t₀)`.
    pub adjoint: Tensor<T>,
    /// `∂L/∂θ`, one tensor per parameter.
    pub params: Vec<Tensor<T>>,
}

fn axpy_into<T: Real>(y: &mut Tensor<T>, alpha: f64, x: &Tensor<T>) {
    let al = T::of(alpha);
    for (a, &b) in y.data_mut().iter_mut().zip(x.data()) {
        *a += al * b;
    }
}

struct Augmented<T: Real> {
    x: Tensor<T>,
    a: Tensor<T>,
    g: Vec<Tensor<T>>,
}

impl<T: Real> Augmented<T> {
    fn axpy(&self, alpha: f64, d: &Augmented<T>) -> Augmented<T> {
        let mut out = Augmented { x: self.x.clone(), a: self.a.clone(), g: self.g.clone() };
        out.axpy_assign(alpha, d);
        out
    }

    fn axpy_assign(&mut self, alpha: f64, d: &Augmented<T>) {
        axpy_into(&mut self.x, alpha, &d.x);
        axpy_into(&mut self.a, alpha, &d.a);
        for (g, dg) in self.g.iter_mut().zip(&d.g) {
            axpy_into(g, alpha, dg);
        }
    }
}

/// Time derivative of `(x, a, g)`: `(f, −aᵀ∂f/∂x, −aᵀ∂f/∂θ)`, with the
/// vector-Jacobian products taken on a tape that holds one evaluation of `f`.
fn augmented_rhs<T: Real>(
    f: &dyn OdeFunc<T>,
    params: &ParamSet<T>,
    consts: &[(&str, &Tensor<T>)],
    x: &Tensor<T>,
    a: &Tensor<T>,
    t: f64,
) -> Result<Augmented<T>> {
    let mut tape = Tape::new();
    let env = bind_env(&mut tape, params, consts, true);
    let xv = tape.leaf(x.clone());
    let out = f.eval(&mut tape, &env, xv, t)?;
    let fx = tape.value(out).clone();
    let mut grads = tape.backward_with(out, a.clone())?;
    let neg = |t: Tensor<T>| t.map(|v| -v);
    let vjp_x = neg(grads.take(xv).expect("x is a leaf"));
    let vjp_p = params.grads_from(&env, &mut grads)?.into_iter().map(neg).collect();
    Ok(Augmented { x: fx, a: vjp_x, g: vjp_p })
}

/// Adjoint sensitivity: integrate `(x, a, ∂L/∂θ)` from `t₁` back to `t₀`
/// with the same tableau and step count as the forward pass, starting from
/// `x(t₁)` and `a(t₁) = ∂L/∂x(t₁)`.
pub fn adjoint_grad<T: Real>(
    f: &dyn OdeFunc<T>,
    params: &ParamSet<T>,
    consts: &[(&str, &Tensor<T>)],
    x1: &Tensor<T>,
    a1: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<AdjointGrads<T>> {
    if x1.shape() != a1.shape() {
        return Err(ReconError::Dimension(format!(
            "adjoint seed {:?} does not match state {:?}",
            a1.shape(),
            x1.shape()
        )));
    }
    let tab = tableau(cfg.kind);
    let h = -cfg.h();
    let mut z = Augmented {
        x: x1.clone(),
        a: a1.clone(),
        g: params.values().iter().map(|v| Tensor::zeros(v.shape())).collect(),
    };
    for n in (0..cfg.n_steps).rev() {
        let t = cfg.t0 + (n + 1) as f64 * cfg.h();
        let mut ks: Vec<Augmented<T>> = Vec::with_capacity(tab.stages());
        for i in 0..tab.stages() {
            let mut zi = Augmented { x: z.x.clone(), a: z.a.clone(), g: Vec::new() };
            for (j, &bij) in tab.b[i].iter().enumerate() {
                if bij != 0.0 {
                    axpy_into(&mut zi.x, bij * h, &ks[j].x);
                    axpy_into(&mut zi.a, bij * h, &ks[j].a);
                }
            }
            let d = augmented_rhs(f, params, consts, &zi.x, &zi.a, t + tab.c[i] * h)?;
            let finite = d.x.is_finite() && d.a.is_finite() && d.g.iter().all(Tensor::is_finite);
            if !finite {
                return Err(ReconError::Numeric(format!(
                    "adjoint stage {} of backward step {} is non-finite",
                    i + 1,
                    n + 1
                )));
            }
            ks.push(d);
        }
        let mut next = z.axpy(0.0, &z);
        for (&ai, k) in tab.a.iter().zip(&ks) {
            if ai != 0.0 {
                next.axpy_assign(ai * h, k);
            }
        }
        z = next;
    }
    Ok(AdjointGrads { x0: z.x, adjoint: z.a, params: z.g })
}
