//! Model families and their forward passes.
//!
//! * `FT` integrates the dynamics net with a fixed tableau and is trained by
//!   backpropagating through the solver.
//! * `FA` uses the same network and forward pass, with gradients from the
//!   adjoint method.
//! * `LT` cascades learned solver steps with shared weights.

use std::fmt;
use std::path::Path;
use std::rc::Rc;

use odetensor::{Real, Tape, Tensor, Var};

use crate::dynamics::{init_dynamics, DynamicsNet, Y_IMG};
use crate::error::{ReconError, Result};
use crate::learned::{init_learned, learned_step};
use crate::metrics::recon_loss;
use crate::mri::{batch_to_images, dc_layer, images_to_batch, zero_filled, ComplexImage, KSpace, Mask};
use crate::params::{Bound, ParamSet};
use crate::solvers::{adjoint_grad, bind_env, integrate, integrate_values, OdeFunc, SolverConfig, TableauKind};

pub const DEFAULT_STEPS: usize = 5;
const META: &str = "meta.model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Fa,
    Ft,
    Lt,
}

impl Family {
    fn code(self) -> f32 {
        match self {
            Family::Fa => 0.0,
            Family::Ft => 1.0,
            Family::Lt => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Self> {
        match c as i32 {
            0 => Ok(Family::Fa),
            1 => Ok(Family::Ft),
            2 => Ok(Family::Lt),
            _ => Err(ReconError::Config(format!("unknown family code {c} in archive"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Fa => "fa",
            Family::Ft => "ft",
            Family::Lt => "lt",
        }
    }
}

/// Family, tableau and step count of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: Family,
    pub kind: TableauKind,
    pub n_steps: usize,
    /// Learned cascades only: apply data consistency after every step
    /// instead of once at the end.
    pub dc_every_step: bool,
}

pub const FAMILY_NAMES: [&str; 9] =
    ["fa_euler", "fa_rk2", "fa_rk4", "ft_euler", "ft_rk2", "ft_rk4", "lt_euler", "lt_rk2", "lt_rk4"];

impl ModelSpec {
    pub fn new(family: Family, kind: TableauKind) -> Self {
        ModelSpec { family, kind, n_steps: DEFAULT_STEPS, dc_every_step: true }
    }

    /// Parse names such as `ft_euler` or `lt_rk4`.
    pub fn parse(name: &str) -> Result<Self> {
        let invalid = || {
            ReconError::Config(format!("invalid family {name:?}; valid options: {}", FAMILY_NAMES.join(", ")))
        };
        let (family, kind) = name.split_once('_').ok_or_else(invalid)?;
        let family = match family {
            "fa" => Family::Fa,
            "ft" => Family::Ft,
            "lt" => Family::Lt,
            _ => return Err(invalid()),
        };
        let kind = kind.parse().map_err(|_| invalid())?;
        Ok(ModelSpec::new(family, kind))
    }

    pub fn name(&self) -> String {
        format!("{}_{}", self.family.name(), self.kind.name())
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        SolverConfig::new(self.kind, self.n_steps)
    }

    fn meta(&self) -> Tensor<f32> {
        let v = vec![self.family.code(), self.kind.stages() as f32, self.n_steps as f32, self.dc_every_step as u8 as f32];
        Tensor::new(&[4], v).expect("four values")
    }

    fn from_meta(t: &Tensor<f32>) -> Result<Self> {
        match t.data() {
            &[family, stages, n_steps, dc] => Ok(ModelSpec {
                family: Family::from_code(family)?,
                kind: TableauKind::from_stages(stages as usize)?,
                n_steps: n_steps as usize,
                dc_every_step: dc != 0.0,
            }),
            other => Err(ReconError::Config(format!("malformed model metadata {other:?}"))),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (n_steps {}, dc_every_step {})", self.name(), self.n_steps, self.dc_every_step)
    }
}

/// Inputs of a batch: measurements, masks, the zero-filled start and,
/// for training, the truth magnitudes.
#[derive(Clone, Debug)]
pub struct Batch<T: Real = f32> {
    pub kspace: Vec<KSpace>,
    pub masks: Vec<Mask>,
    /// `B×2×H×W` zero-filled images, which are both `x(t₀)` and the
    /// measurement input of every network.
    pub x0: Tensor<T>,
    /// `B×1×H×W` truth magnitudes.
    pub truth_mag: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn new(kspace: Vec<KSpace>, masks: Vec<Mask>, truth: Option<&[&ComplexImage]>) -> Result<Self> {
        if kspace.len() != masks.len() || kspace.is_empty() {
            return Err(ReconError::Dimension(format!("{} k-spaces with {} masks", kspace.len(), masks.len())));
        }
        let starts: Vec<ComplexImage> = kspace.iter().zip(&masks).map(|(k, m)| zero_filled(k, m)).collect::<Result<_>>()?;
        let x0 = images_to_batch(&starts.iter().collect::<Vec<_>>())?;
        let truth_mag = match truth {
            None => None,
            Some(images) => {
                if images.len() != kspace.len() {
                    return Err(ReconError::Dimension("one truth image per sample is required".into()));
                }
                let [b, _, h, w] = x0.dims4()?;
                let mut data = Vec::with_capacity(b * h * w);
                for img in images {
                    if (img.height(), img.width()) != (h, w) {
                        return Err(ReconError::Dimension(format!(
                            "truth is {}×{}, k-space is {h}×{w}",
                            img.height(),
                            img.width()
                        )));
                    }
                    data.extend(img.magnitude().into_iter().map(T::of));
                }
                Some(Tensor::new(&[b, 1, h, w], data)?)
            }
        };
        Ok(Batch { kspace, masks, x0, truth_mag })
    }

    pub fn len(&self) -> usize {
        self.kspace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kspace.is_empty()
    }

    fn truth(&self) -> Result<&Tensor<T>> {
        self.truth_mag.as_ref().ok_or_else(|| ReconError::Contract("batch has no truth images".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.solver()?;
        let params = match spec.family {
            Family::Fa | Family::Ft => init_dynamics(seed),
            Family::Lt => init_learned(spec.kind.stages(), seed)?,
        };
        Ok(Model { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { spec: self.spec, params: self.params.cast() }
    }

    fn dynamics(&self) -> Rc<dyn OdeFunc<T>> {
        Rc::new(DynamicsNet)
    }

    /// Record the reconstruction of `batch` on `tape`. `env` holds the
    /// parameters and the measurement image under [`Y_IMG`].
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, env: &Bound, x0: Var, batch: &Batch<T>, checkpoint: bool) -> Result<Var> {
        match self.spec.family {
            Family::Fa | Family::Ft => {
                let x1 = integrate(tape, &self.dynamics(), env, x0, &self.spec.solver()?, checkpoint)?;
                dc_layer(tape, x1, &batch.kspace, &batch.masks)
            }
            Family::Lt => self.cascade_on_tape(tape, env, x0, batch, checkpoint),
        }
    }

    fn cascade_on_tape(&self, tape: &mut Tape<T>, env: &Bound, x0: Var, batch: &Batch<T>, checkpoint: bool) -> Result<Var> {
        let n = self.spec.n_steps;
        let stages = self.spec.kind.stages();
        let start = tape.try_value(x0)?.norm();
        let data = Rc::new((batch.kspace.clone(), batch.masks.clone()));
        let mut x = x0;
        for i in 0..n {
            let t = i as f64 / n as f64;
            let dc = self.spec.dc_every_step || i + 1 == n;
            let iteration = {
                let data = Rc::clone(&data);
                move |tape: &mut Tape<T>, env: &Bound, x: Var| -> Result<Var> {
                    let y = env.get(Y_IMG)?;
                    let next = learned_step(tape, env, stages, x, t, y)?;
                    if dc {
                        dc_layer(tape, next, &data.0, &data.1)
                    } else {
                        Ok(next)
                    }
                }
            };
            x = if checkpoint {
                let env0 = env.clone();
                let mut inputs = vec![x];
                inputs.extend_from_slice(env.vars());
                tape.checkpoint(&inputs, move |tape, vars| Ok(iteration(tape, &env0.rebind(&vars[1..]), vars[0])?))?
            } else {
                iteration(tape, env, x)?
            };
            check_norm(tape.value(x), start, i + 1)?;
        }
        Ok(x)
    }

    /// Reconstruct without recording gradients.
    pub fn reconstruct_batch(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let consts = [(Y_IMG, &batch.x0)];
        match self.spec.family {
            Family::Fa | Family::Ft => {
                let x1 = integrate_values(&DynamicsNet, &self.params, &consts, &batch.x0, &self.spec.solver()?)?;
                let mut tape = Tape::new();
                let x = tape.constant(x1);
                let out = dc_layer(&mut tape, x, &batch.kspace, &batch.masks)?;
                Ok(tape.value(out).clone())
            }
            Family::Lt => {
                let n = self.spec.n_steps;
                let start = batch.x0.norm();
                let mut x = batch.x0.clone();
                for i in 0..n {
                    let mut tape = Tape::new();
                    let env = bind_env(&mut tape, &self.params, &consts, false);
                    let xv = tape.constant(x);
                    let y = env.get(Y_IMG)?;
                    let mut next = learned_step(&mut tape, &env, self.spec.kind.stages(), xv, i as f64 / n as f64, y)?;
                    if self.spec.dc_every_step || i + 1 == n {
                        next = dc_layer(&mut tape, next, &batch.kspace, &batch.masks)?;
                    }
                    x = tape.value(next).clone();
                    check_norm(&x, start, i + 1)?;
                }
                Ok(x)
            }
        }
    }

    /// Single-sample reconstruction.
    pub fn reconstruct(&self, measured: &KSpace, mask: &Mask) -> Result<ComplexImage> {
        let batch = Batch::new(vec![measured.clone()], vec![mask.clone()], None)?;
        Ok(batch_to_images(&self.reconstruct_batch(&batch)?)?.remove(0))
    }

    /// Training loss of `batch` and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch<T>, checkpoint: bool) -> Result<(f64, Vec<Tensor<T>>)> {
        let truth = batch.truth()?;
        match self.spec.family {
            Family::Fa => {
                let consts = [(Y_IMG, &batch.x0)];
                let cfg = self.spec.solver()?;
                let x1 = integrate_values(&DynamicsNet, &self.params, &consts, &batch.x0, &cfg)?;
                let mut tape = Tape::new();
                let x1v = tape.leaf(x1.clone());
                let out = dc_layer(&mut tape, x1v, &batch.kspace, &batch.masks)?;
                let loss = recon_loss(&mut tape, out, truth)?;
                let value = tape.value(loss).data()[0].f64();
                let a1 = tape.backward(loss)?.take(x1v).expect("x1 is a leaf");
                drop(tape);
                let adj = adjoint_grad(&DynamicsNet, &self.params, &consts, &x1, &a1, &cfg)?;
                Ok((value, adj.params))
            }
            Family::Ft | Family::Lt => {
                let mut tape = Tape::new();
                let env = bind_env(&mut tape, &self.params, &[(Y_IMG, &batch.x0)], true);
                let x0 = tape.constant(batch.x0.clone());
                let out = self.forward_on_tape(&mut tape, &env, x0, batch, checkpoint)?;
                let loss = recon_loss(&mut tape, out, truth)?;
                let value = tape.value(loss).data()[0].f64();
                let mut grads = tape.backward(loss)?;
                Ok((value, self.params.grads_from(&env, &mut grads)?))
            }
        }
    }

    /// Loss only, without gradients.
    pub fn loss(&self, batch: &Batch<T>) -> Result<f64> {
        let pred = self.reconstruct_batch(batch)?;
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let loss = recon_loss(&mut tape, p, batch.truth()?)?;
        Ok(tape.value(loss).data()[0].f64())
    }
}

fn check_norm<T: Real>(x: &Tensor<T>, start: f64, step: usize) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || (start > 0.0 && norm > 1e6 * start) {
        return Err(ReconError::Numeric(format!("cascade diverged at step {step}: |x| = {norm:e}")));
    }
    Ok(())
}

impl Model<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &[(META, &self.spec.meta())])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamSet::load(path)?;
        let meta = meta
            .iter()
            .find(|(n, _)| n == META)
            .ok_or_else(|| ReconError::Config(format!("{} has no model metadata", path.display())))?;
        let spec = ModelSpec::from_meta(&meta.1)?;
        let model = Model { spec, params };
        model.check_layout()?;
        Ok(model)
    }

    /// Names and shapes must match a freshly initialized model of the same
    /// spec.
    pub fn check_layout(&self) -> Result<()> {
        let reference = Model::<f32>::init(self.spec, 0)?;
        let ok = reference.params.len() == self.params.len()
            && reference.params.iter().all(|(name, t)| self.params.get(name).map(|p| p.shape()) == Some(t.shape()));
        if !ok {
            return Err(ReconError::Config(format!("archive parameters do not match family {}", self.spec.name())));
        }
        Ok(())
    }
}
