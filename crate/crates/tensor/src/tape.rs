use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::memory;
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether each input wants a gradient; rules may return `None` otherwise.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> =
    Rc<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

/// Ordered record of operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so indices are a topological
/// order by construction. A tape is single-threaded and meant to live for a
/// single training step; values it holds are charged to [`memory`].
pub struct Tape<T: Real = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    bytes: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Drop for Tape<T> {
    fn drop(&mut self) {
        memory::release(self.bytes);
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), bytes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of values recorded on this tape.
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    fn push(&mut self, node: Node<T>) -> Var {
        let bytes = node.value.numel() * T::BYTES;
        self.bytes += bytes;
        memory::charge(bytes);
        self.nodes.push(node);
        Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::Contract(format!(
                "variable {v:?} was not recorded on tape {}",
                self.id
            )));
        }
        Ok(v.index())
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, inputs: vec![], backward: None, requires_grad: true, leaf: true })
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, inputs: vec![], backward: None, requires_grad: false, leaf: true })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let idx = self.check(v).expect("foreign variable");
        &self.nodes[idx].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Record an operation with a caller-supplied backward rule.
    ///
    /// The rule receives the input values, the output value and the upstream
    /// gradient and must return one optional gradient per input, each with
    /// the shape of that input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<T>, backward: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        self.record(inputs, value, Rc::new(backward))
    }

    pub(crate) fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let node = if requires_grad {
            Node { value, inputs: idx, backward: Some(backward), requires_grad, leaf: false }
        } else {
            Node { value, inputs: vec![], backward: None, requires_grad, leaf: false }
        };
        Ok(self.push(node))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let idx = self.check(loss)?;
        let value = &self.nodes[idx].value;
        if value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, Tensor::full(value.shape(), T::one()))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`
    /// (a vector-Jacobian product).
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let out = self.check(out)?;
        self.nodes[out].value.same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out].requires_grad {
            grads[out] = Some(seed);
        }
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if node.leaf {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let Some(rule) = &node.backward else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> =
                node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &grad, needs: &needs };
            let input_grads = rule(&ctx)?;
            for ((&j, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[j].value.shape(), "grad shape of node {j}");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { tape: self.id, grads })
    }
}

/// Gradients of every trainable leaf after a reverse sweep.
pub struct Grads<T: Real> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf recorded with [`Tape::leaf`]; `None` for constants
    /// and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}
