//! Differentiable operations recorded on a [`Tape`].
//!
//! Shapes must match exactly; the only broadcasts are bias-add inside
//! convolution, scalar multiplies, [`Tape::broadcast_scalar`] and the
//! per-pixel gate of [`Tape::mul_channel`].

use std::rc::Rc;

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardCtx, Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    fn binary_shapes(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.try_value(a)?.same_shape(self.try_value(b)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record(&[a, b], value, Rc::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record(&[a, b], value, Rc::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(
            &[a, b],
            value,
            Rc::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
                let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
                Ok(vec![ga, gb])
            }),
        )
    }

    /// `c · a` for a fixed scalar `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.try_value(a)?.map(|x| c * x);
        self.record(&[a], value, Rc::new(move |ctx| Ok(vec![Some(ctx.grad.map(|g| g * c))])))
    }

    /// `c · a + shift` for fixed scalars.
    pub fn affine(&mut self, a: Var, c: f64, shift: f64) -> Result<Var> {
        let (c, shift) = (T::of(c), T::of(shift));
        let value = self.try_value(a)?.map(|x| c * x + shift);
        self.record(&[a], value, Rc::new(move |ctx| Ok(vec![Some(ctx.grad.map(|g| g * c))])))
    }

    /// `y + alpha · x`.
    pub fn axpy(&mut self, y: Var, alpha: f64, x: Var) -> Result<Var> {
        self.binary_shapes(y, x, "axpy")?;
        let al = T::of(alpha);
        let value = self.value(y).zip_map(self.value(x), |a, b| a + al * b);
        self.record(
            &[y, x],
            value,
            Rc::new(move |ctx| Ok(vec![Some(ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.map(|g| g * al))])),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let src = self.try_value(a)?;
        let value = Tensor::scalar(src.sum());
        self.record(&[a], value, Rc::new(|ctx| Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.data()[0]))])))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.try_value(a)?.numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.try_value(a)?.map(|x| if x > T::zero() { x } else { T::zero() });
        self.record(
            &[a],
            value,
            Rc::new(|ctx| {
                Ok(vec![Some(ctx.grad.zip_map(ctx.output, |g, y| if y > T::zero() { g } else { T::zero() }))])
            }),
        )
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.try_value(a)?.map(|x| x.abs());
        self.record(
            &[a],
            value,
            Rc::new(|ctx| {
                Ok(vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }))])
            }),
        )
    }

    /// Fill a tensor of `shape` with the single value held by `s`.
    pub fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let src = self.try_value(s)?;
        if src.numel() != 1 {
            return Err(TensorError::shape("broadcast_scalar", format!("source must hold one value, got {:?}", src.shape())));
        }
        let value = Tensor::full(shape, src.data()[0]);
        self.record(
            &[s],
            value,
            Rc::new(|ctx| Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.sum()))])),
        )
    }

    /// Stack `B×Cᵢ×H×W` tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_channels needs at least one input".into()));
        }
        let dims: Vec<[usize; 4]> = parts.iter().map(|&p| self.try_value(p)?.dims4()).collect::<Result<_>>()?;
        let [b, _, h, w] = dims[0];
        if let Some(bad) = dims.iter().find(|d| d[0] != b || d[2] != h || d[3] != w) {
            return Err(TensorError::shape(
                "concat_channels",
                format!("batch/spatial extents differ: {:?} vs {:?}", dims[0], bad),
            ));
        }
        let channels: Vec<usize> = dims.iter().map(|d| d[1]).collect();
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut value = Tensor::zeros(&[b, total, h, w]);
        for s in 0..b {
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = &self.value(p).data()[s * c * hw..(s + 1) * c * hw];
                value.data_mut()[(s * total + off) * hw..(s * total + off + c) * hw].copy_from_slice(src);
                off += c;
            }
        }
        self.record(
            parts,
            value,
            Rc::new(move |ctx| {
                let mut out = Vec::with_capacity(channels.len());
                let mut off = 0;
                for (i, &c) in channels.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut g = Tensor::zeros(&[b, c, h, w]);
                        for s in 0..b {
                            g.data_mut()[s * c * hw..(s + 1) * c * hw].copy_from_slice(
                                &ctx.grad.data()[(s * total + off) * hw..(s * total + off + c) * hw],
                            );
                        }
                        out.push(Some(g));
                    } else {
                        out.push(None);
                    }
                    off += c;
                }
                Ok(out)
            }),
        )
    }

    /// Channels `[start, start + len)` of a `B×C×H×W` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.try_value(a)?.dims4()?;
        if start + len > c {
            return Err(TensorError::shape("slice_channels", format!("[{start}, {}) exceeds {c} channels", start + len)));
        }
        let hw = h * w;
        let mut value = Tensor::zeros(&[b, len, h, w]);
        for s in 0..b {
            value.data_mut()[s * len * hw..(s + 1) * len * hw]
                .copy_from_slice(&self.value(a).data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        self.record(
            &[a],
            value,
            Rc::new(move |ctx| {
                let mut g = Tensor::zeros(&[b, c, h, w]);
                for s in 0..b {
                    g.data_mut()[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&ctx.grad.data()[s * len * hw..(s + 1) * len * hw]);
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Scale every channel of `x: B×C×H×W` by the per-pixel map `gate: B×1×H×W`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [b, c, h, w] = self.try_value(x)?.dims4()?;
        let gd = self.try_value(gate)?.dims4()?;
        if gd != [b, 1, h, w] {
            return Err(TensorError::shape("mul_channel", format!("gate {gd:?} does not fit input {:?}", [b, c, h, w])));
        }
        let hw = h * w;
        let mut value = self.value(x).clone();
        let gv = self.value(gate).data();
        for s in 0..b {
            for ch in 0..c {
                let dst = &mut value.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (v, &g) in dst.iter_mut().zip(&gv[s * hw..(s + 1) * hw]) {
                    *v *= g;
                }
            }
        }
        self.record(
            &[x, gate],
            value,
            Rc::new(move |ctx| {
                let (xv, gv, go) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let gx = ctx.needs[0].then(|| {
                    let mut gx = ctx.grad.clone();
                    for s in 0..b {
                        for ch in 0..c {
                            let dst = &mut gx.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                            for (v, &g) in dst.iter_mut().zip(&gv[s * hw..(s + 1) * hw]) {
                                *v *= g;
                            }
                        }
                    }
                    gx
                });
                let gg = ctx.needs[1].then(|| {
                    let mut gg = Tensor::zeros(&[b, 1, h, w]);
                    for s in 0..b {
                        let dst = &mut gg.data_mut()[s * hw..(s + 1) * hw];
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for (p, d) in dst.iter_mut().enumerate() {
                                *d += go[base + p] * xv[base + p];
                            }
                        }
                    }
                    gg
                });
                Ok(vec![gx, gg])
            }),
        )
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let [b, c, h, w] = self.try_value(a)?.dims4()?;
        let hw = h * w;
        let mut value = self.value(a).clone();
        for s in 0..b {
            let base = s * c * hw;
            let d = value.data_mut();
            for p in 0..hw {
                let m = (0..c).map(|ch| d[base + ch * hw + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (d[base + ch * hw + p] - m).exp();
                    d[base + ch * hw + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    d[base + ch * hw + p] = d[base + ch * hw + p] / z;
                }
            }
        }
        self.record(
            &[a],
            value,
            Rc::new(move |ctx| {
                // dL/dz_k = y_k (g_k − Σ_j g_j y_j)
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut out = Tensor::zeros(&[b, c, h, w]);
                let o = out.data_mut();
                for s in 0..b {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let dot: T = (0..c).map(|ch| g[base + ch * hw + p] * y[base + ch * hw + p]).sum();
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            o[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                Ok(vec![Some(out)])
            }),
        )
    }

    /// Pixelwise modulus of a two-channel (real, imaginary) `B×2×H×W` tensor.
    ///
    /// Returns `B×1×H×W`. The gradient at a zero pixel is taken as zero.
    pub fn magnitude(&mut self, a: Var) -> Result<Var> {
        let [b, c, h, w] = self.try_value(a)?.dims4()?;
        if c != 2 {
            return Err(TensorError::shape("magnitude", format!("needs 2 channels, got {c}")));
        }
        let hw = h * w;
        let src = self.value(a).data();
        let mut value = Tensor::zeros(&[b, 1, h, w]);
        for s in 0..b {
            for p in 0..hw {
                let (re, im) = (src[s * 2 * hw + p], src[s * 2 * hw + hw + p]);
                value.data_mut()[s * hw + p] = re.hypot(im);
            }
        }
        self.record(
            &[a],
            value,
            Rc::new(move |ctx| {
                let (src, m, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
                let mut out = Tensor::zeros(&[b, 2, h, w]);
                for s in 0..b {
                    for p in 0..hw {
                        let mag = m[s * hw + p];
                        if mag > T::zero() {
                            let k = g[s * hw + p] / mag;
                            out.data_mut()[s * 2 * hw + p] = k * src[s * 2 * hw + p];
                            out.data_mut()[s * 2 * hw + hw + p] = k * src[s * 2 * hw + hw + p];
                        }
                    }
                }
                Ok(vec![Some(out)])
            }),
        )
    }

    /// Zero-padded "same" cross-correlation.
    ///
    /// `x: B×C×H×W`, `weight: O×C×kh×kw` (odd extents), `bias: O`. Padding
    /// is `(k−1)·dilation/2` per side so the output is `B×O×H×W`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let value = conv2d_forward(self.try_value(x)?, self.try_value(weight)?, self.try_value(bias)?, dilation)?;
        self.record(
            &[x, weight, bias],
            value,
            Rc::new(move |ctx: &BackwardCtx<'_, T>| {
                let needs = [ctx.needs[0], ctx.needs[1], ctx.needs[2]];
                let [gx, gw, gb] = conv2d_backward(ctx.inputs[0], ctx.inputs[1], dilation, ctx.grad, needs)?;
                Ok(vec![gx, gw, gb])
            }),
        )
    }

    /// Run `segment` without keeping its intermediate values.
    ///
    /// The forward pass evaluates `segment` on a scratch tape and keeps only
    /// its output. During the reverse sweep the segment is evaluated again
    /// from the saved inputs and differentiated locally, so the gradients are
    /// identical to the un-checkpointed ones as long as `segment` is a
    /// deterministic function of `inputs`. Parameters used inside the
    /// segment must be passed through `inputs` to receive gradients; a
    /// segment that reads hidden mutable state is not supported.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], segment: F) -> Result<Var>
    where
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static,
    {
        let segment = Rc::new(segment);
        let grad_mask: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
        let value = {
            let mut scratch = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(&grad_mask)
                .map(|(&v, &g)| {
                    let t = self.value(v).clone();
                    if g {
                        scratch.leaf(t)
                    } else {
                        scratch.constant(t)
                    }
                })
                .collect();
            let out = segment(&mut scratch, &vars)?;
            scratch.try_value(out)?.clone()
        };
        self.record(
            inputs,
            value,
            Rc::new(move |ctx| {
                let mut scratch = Tape::new();
                let vars: Vec<Var> = ctx
                    .inputs
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&t, &g)| if g { scratch.leaf(t.clone()) } else { scratch.constant(t.clone()) })
                    .collect();
                let out = segment(&mut scratch, &vars)?;
                let mut grads = scratch.backward_with(out, ctx.grad.clone())?;
                Ok(vars.iter().zip(ctx.needs).map(|(&v, &g)| if g { grads.take(v) } else { None }).collect())
            }),
        )
    }
}
