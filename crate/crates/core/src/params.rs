//! Named parameter bundles and their binding to a tape.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use odetensor::io::{read_archive, write_archive};
use odetensor::{Grads, Real, Tape, Tensor, Var};

use crate::error::{ReconError, Result};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.values[i] = value,
            None => {
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    /// Record every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Bound { index: Rc::new(index), vars, params: self.len() }
    }

    /// Gradients for every parameter from a sweep over a tape it was bound to.
    pub fn grads_from(&self, bound: &Bound, grads: &mut Grads<T>) -> Result<Vec<Tensor<T>>> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (name, value))| {
                let g = grads.take(bound.vars[i]).ok_or_else(|| {
                    ReconError::Config(format!("parameter {name} was not bound as a trainable leaf"))
                })?;
                if g.shape() != value.shape() {
                    return Err(ReconError::Dimension(format!("gradient of {name} has shape {:?}", g.shape())));
                }
                Ok(g)
            })
            .collect()
    }
}

impl ParamSet<f32> {
    pub fn save(&self, path: &Path, extra: &[(&str, &Tensor<f32>)]) -> Result<()> {
        let file = File::create(path).map_err(|e| ReconError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let entries: Vec<(&str, &Tensor<f32>)> = extra.iter().copied().chain(self.iter()).collect();
        write_archive(&mut w, entries)?;
        w.flush().map_err(|e| ReconError::io(path, e))
    }

    /// Load an archive; entries whose names start with `meta.` are returned
    /// separately.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, Tensor<f32>)>)> {
        let file = File::open(path).map_err(|e| ReconError::io(path, e))?;
        let mut params = ParamSet::new();
        let mut meta = Vec::new();
        for (name, value) in read_archive(BufReader::new(file))? {
            if name.starts_with("meta.") {
                meta.push((name, value));
            } else {
                params.insert(name, value);
            }
        }
        Ok((params, meta))
    }
}

/// Tape variables of a [`ParamSet`] plus any named constants, addressable by
/// name.
#[derive(Clone, Debug)]
pub struct Bound {
    index: Rc<HashMap<String, usize>>,
    vars: Vec<Var>,
    params: usize,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ReconError::Config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// All variables, parameters first and constants after.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars[..self.params]
    }

    /// Add a named input that is not a parameter.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        let i = self.vars.len();
        Rc::make_mut(&mut self.index).insert(name.to_string(), i);
        self.vars.push(var);
        self
    }

    /// The same names over a different set of variables, e.g. the inputs of
    /// a checkpointed segment.
    pub fn rebind(&self, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), self.vars.len(), "rebind needs one variable per name");
        Bound { index: Rc::clone(&self.index), vars: vars.to_vec(), params: self.params }
    }
}
