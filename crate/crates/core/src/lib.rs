//! Undersampled MRI reconstruction as a neural ODE.
//!
//! The reconstruction trajectory `dx/dt = f(x, t, y; θ)` starts at the
//! zero-filled image and is integrated over `[0, 1]`, either with a fixed
//! explicit Runge–Kutta tableau (families `ft` and `fa`, differing in how
//! gradients are computed) or with learned solver steps (family `lt`).

pub mod bench;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod layers;
pub mod learned;
pub mod metrics;
pub mod model;
pub mod mri;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod seed;
pub mod solvers;
pub mod train;

pub use error::{ReconError, Result};
pub use model::{Batch, Family, Model, ModelSpec};
pub use solvers::{SolverConfig, TableauKind};
