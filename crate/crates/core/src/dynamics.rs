//! The dynamics network `f(x, t, y; θ)` driving the fixed-solver models.

use odetensor::{Real, Tape, Var};

use crate::error::Result;
use crate::layers::{five_layer_plan, init_time_stack, time_stack};
use crate::params::{Bound, ParamSet};
use crate::seed;
use crate::solvers::OdeFunc;

pub const PREFIX: &str = "dyn";
pub const LAYERS: usize = 5;
/// Name under which the zero-filled measurement image is bound.
pub const Y_IMG: &str = "y_img";

/// Parameters `dyn.layer{1..5}` for the `4 → 32 → 32 → 32 → 32 → 2` plan.
pub fn init_dynamics<T: Real>(seed: u64) -> ParamSet<T> {
    let mut params = ParamSet::new();
    let mut rng = seed::rng(seed, seed::INIT, 0);
    init_time_stack(&mut params, PREFIX, &five_layer_plan(4), &mut rng);
    params
}

/// `concat(x, y_img)` through five time-dependent layers.
pub fn dynamics_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, t: f64, y_img: Var) -> Result<Var> {
    let input = tape.concat_channels(&[x, y_img])?;
    time_stack(tape, p, PREFIX, LAYERS, input, t, 1)
}

/// [`dynamics_forward`] as an ODE right-hand side reading `y_img` from the
/// environment.
#[derive(Clone, Copy, Debug, Default)]
pub struct DynamicsNet;

impl<T: Real> OdeFunc<T> for DynamicsNet {
    fn eval(&self, tape: &mut Tape<T>, env: &Bound, x: Var, t: f64) -> Result<Var> {
        let y = env.get(Y_IMG)?;
        dynamics_forward(tape, env, x, t, y)
    }
}
