//! Dilated "same" 2D cross-correlation via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::real::{dot, matmul, sum, with_scratch, Real};
use crate::tensor::Tensor;

/// Weights and geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// `out_ch × in_ch × kh × kw`, odd spatial extents.
    pub weight: Tensor<T>,
    /// `out_ch`
    pub bias: Tensor<T>,
    pub dilation: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        let geom = Geometry::of(&weight, dilation)?;
        if bias.shape() != [geom.out_ch] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", bias.shape(), geom.out_ch),
            ));
        }
        Ok(ConvParams { weight, bias, dilation })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Zero padding applied on each side of (rows, cols).
    pub fn padding(&self) -> (usize, usize) {
        let s = self.weight.shape();
        ((s[2] - 1) * self.dilation / 2, (s[3] - 1) * self.dilation / 2)
    }

    /// Tape-free evaluation.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(input, &self.weight, &self.bias, self.dilation)
    }
}

/// Layers with at most this many output channels use the direct kernel.
const DIRECT_MAX_OUT: usize = 2;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl Geometry {
    pub fn of<T: Real>(weight: &Tensor<T>, dilation: usize) -> Result<Self> {
        let [out_ch, in_ch, kh, kw] = weight.dims4().map_err(|_| {
            TensorError::shape("conv2d", format!("weight must be O×C×kh×kw, got {:?}", weight.shape()))
        })?;
        if dilation == 0 {
            return Err(TensorError::shape("conv2d", "dilation must be at least 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("same padding needs odd kernel extents, got {kh}×{kw}"),
            ));
        }
        Ok(Geometry { out_ch, in_ch, kh, kw, dilation })
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn pad(&self) -> (isize, isize) {
        (((self.kh - 1) * self.dilation / 2) as isize, ((self.kw - 1) * self.dilation / 2) as isize)
    }

    /// Column range `[lo, hi)` of output `x` whose source `x + dx` is in bounds.
    fn span(dx: isize, w: usize) -> (usize, usize) {
        let lo = (-dx).max(0) as usize;
        let hi = (w as isize - dx).clamp(0, w as isize) as usize;
        (lo.min(hi), hi)
    }

    /// Kernel taps as `(ky, kx, rows, offset)` on a grid padded to width
    /// `wp = w + 2·pw`: `rows` are the output rows whose source row is in
    /// bounds, `offset` the flat distance from an output pixel to its source.
    fn padded_taps(&self, h: usize, w: usize) -> Vec<(usize, usize, (usize, usize), isize)> {
        let (ph, pw) = self.pad();
        let wp = w as isize + 2 * pw;
        let d = self.dilation as isize;
        let mut taps = Vec::with_capacity(self.kh * self.kw);
        for ky in 0..self.kh {
            let dy = ky as isize * d - ph;
            let rows = Self::span(dy, h);
            if rows.0 >= rows.1 {
                continue;
            }
            for kx in 0..self.kw {
                let dx = kx as isize * d - pw;
                taps.push((ky, kx, rows, dy * wp + dx + pw));
            }
        }
        taps
    }

    fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + c) * self.kh + ky) * self.kw + kx
    }

    /// Narrow outputs skip im2col: GEMM packing would cost more than the
    /// arithmetic.
    fn direct(&self) -> bool {
        self.out_ch <= DIRECT_MAX_OUT && !(self.kh == 1 && self.kw == 1)
    }

    /// Copy `channels` planes of width `w` into zeroed planes of width `wp`,
    /// shifted right by `pw`.
    fn pad_planes<T: Real>(src: &[T], channels: usize, h: usize, w: usize, wp: usize, pw: usize, dst: &mut [T]) {
        dst.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..channels {
            for y in 0..h {
                let at = (c * h + y) * wp + pw;
                dst[at..at + w].copy_from_slice(&src[(c * h + y) * w..(c * h + y + 1) * w]);
            }
        }
    }

    /// Flat range `[start, start + len)` of padded output pixels touched by
    /// a tap with output rows `[y0, y1)`. Columns past `w` are junk and the
    /// last row stops at `w` so sources stay inside the plane.
    fn flat_range((y0, y1): (usize, usize), w: usize, wp: usize) -> (usize, usize) {
        (y0 * wp, (y1 - y0 - 1) * wp + w)
    }

    /// `dst = bias + conv(src)` for one sample, one long axpy per tap.
    fn direct_forward<T: Real>(&self, src: &[T], weight: &[T], bias: &[T], h: usize, w: usize, dst: &mut [T]) {
        let pw = self.pad().1 as usize;
        let wp = w + 2 * pw;
        let plane = h * wp;
        let taps = self.padded_taps(h, w);
        with_scratch(self.in_ch * plane, |xp: &mut [T]| {
            with_scratch(self.out_ch * plane, |outp: &mut [T]| {
                Self::pad_planes(src, self.in_ch, h, w, wp, pw, xp);
                for o in 0..self.out_ch {
                    let out = &mut outp[o * plane..(o + 1) * plane];
                    out.iter_mut().for_each(|v| *v = bias[o]);
                    for c in 0..self.in_ch {
                        let x = &xp[c * plane..(c + 1) * plane];
                        for &(ky, kx, rows, off) in &taps {
                            let wv = weight[self.weight_index(o, c, ky, kx)];
                            let (start, len) = Self::flat_range(rows, w, wp);
                            let lo = (start as isize + off) as usize;
                            let hi = lo + len;
                            for (p, v) in out[start..start + len].iter_mut().zip(&x[lo..hi]) {
                                *p += wv * *v;
                            }
                        }
                    }
                    for y in 0..h {
                        dst[(o * h + y) * w..(o * h + y + 1) * w].copy_from_slice(&out[y * wp..y * wp + w]);
                    }
                }
            })
        })
    }

    /// Input and weight gradients of [`direct_forward`](Self::direct_forward)
    /// for one sample; both are accumulated into.
    #[allow(clippy::too_many_arguments)]
    fn direct_backward<T: Real>(
        &self,
        src: &[T],
        weight: &[T],
        go: &[T],
        h: usize,
        w: usize,
        mut gx: Option<&mut [T]>,
        mut gw: Option<&mut [T]>,
    ) {
        let pw = self.pad().1 as usize;
        let wp = w + 2 * pw;
        let plane = h * wp;
        let taps = self.padded_taps(h, w);
        let (cin, cout) = (self.in_ch, self.out_ch);
        with_scratch(if gw.is_some() { cin * plane } else { 0 }, |xp: &mut [T]| {
            with_scratch(cout * plane, |gop: &mut [T]| {
                with_scratch(if gx.is_some() { cin * plane } else { 0 }, |gxp: &mut [T]| {
                    if gw.is_some() {
                        Self::pad_planes(src, cin, h, w, wp, pw, xp);
                    }
                    // Output gradients sit at the left of each padded row,
                    // junk columns zero.
                    Self::pad_planes(go, cout, h, w, wp, 0, gop);
                    gxp.iter_mut().for_each(|v| *v = T::zero());
                    for o in 0..cout {
                        let g = &gop[o * plane..(o + 1) * plane];
                        for c in 0..cin {
                            for &(ky, kx, rows, off) in &taps {
                                let wi = self.weight_index(o, c, ky, kx);
                                let (start, len) = Self::flat_range(rows, w, wp);
                                let grow = &g[start..start + len];
                                let lo = c * plane + (start as isize + off) as usize;
                                let hi = lo + len;
                                if gx.is_some() {
                                    let wv = weight[wi];
                                    for (p, v) in gxp[lo..hi].iter_mut().zip(grow) {
                                        *p += wv * *v;
                                    }
                                }
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw[wi] += dot(grow, &xp[lo..hi]);
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        for c in 0..cin {
                            for y in 0..h {
                                let row = &gxp[c * plane + y * wp + pw..c * plane + y * wp + pw + w];
                                for (p, v) in gx[(c * h + y) * w..(c * h + y + 1) * w].iter_mut().zip(row) {
                                    *p += *v;
                                }
                            }
                        }
                    }
                })
            })
        })
    }

    /// Unfold one `C×H×W` sample into a `(C·kh·kw) × (H·W)` matrix.
    pub fn im2col<T: Real>(&self, src: &[T], h: usize, w: usize, col: &mut [T]) {
        let hw = h * w;
        let (ph, pw) = self.pad();
        let d = self.dilation as isize;
        for c in 0..self.in_ch {
            let plane = &src[c * hw..(c + 1) * hw];
            for ky in 0..self.kh {
                let dy = ky as isize * d - ph;
                for kx in 0..self.kw {
                    let dx = kx as isize * d - pw;
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let (lo, hi) = Self::span(dx, w);
                    for y in 0..h {
                        let out = &mut dst[y * w..(y + 1) * w];
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || lo >= hi {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                        out[..lo].iter_mut().for_each(|v| *v = T::zero());
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        out[hi..].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back into `dst`.
    pub fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, dst: &mut [T]) {
        let hw = h * w;
        let (ph, pw) = self.pad();
        let d = self.dilation as isize;
        for c in 0..self.in_ch {
            let plane = &mut dst[c * hw..(c + 1) * hw];
            for ky in 0..self.kh {
                let dy = ky as isize * d - ph;
                for kx in 0..self.kw {
                    let dx = kx as isize * d - pw;
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let (lo, hi) = Self::span(dx, w);
                    if lo >= hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (lo as isize + dx) as usize;
                        let prow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                        for (p, v) in prow.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                            *p += *v;
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Real>(input: &Tensor<T>, geom: &Geometry) -> Result<[usize; 4]> {
    let [b, c, h, w] = input.dims4()?;
    if c != geom.in_ch {
        return Err(TensorError::shape(
            "conv2d",
            format!("input has {c} channels but the kernel expects {}", geom.in_ch),
        ));
    }
    Ok([b, c, h, w])
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let geom = Geometry::of(weight, dilation)?;
    if bias.shape() != [geom.out_ch] {
        return Err(TensorError::shape(
            "conv2d",
            format!("bias {:?} does not match {} output channels", bias.shape(), geom.out_ch),
        ));
    }
    let [b, c, h, w] = check_input(input, &geom)?;
    let hw = h * w;
    let k = geom.cols();
    let pointwise = geom.kh == 1 && geom.kw == 1;
    let mut out = Tensor::zeros(&[b, geom.out_ch, h, w]);
    if geom.direct() {
        for s in 0..b {
            let src = &input.data()[s * c * hw..(s + 1) * c * hw];
            let dst = &mut out.data_mut()[s * geom.out_ch * hw..(s + 1) * geom.out_ch * hw];
            geom.direct_forward(src, weight.data(), bias.data(), h, w, dst);
        }
        return Ok(out);
    }
    with_scratch(if pointwise { 0 } else { k * hw }, |col| {
        for s in 0..b {
            let src = &input.data()[s * c * hw..(s + 1) * c * hw];
            let dst = &mut out.data_mut()[s * geom.out_ch * hw..(s + 1) * geom.out_ch * hw];
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
            let cols = if pointwise {
                src
            } else {
                geom.im2col(src, h, w, col);
                &col[..]
            };
            matmul(geom.out_ch, k, hw, weight.data(), false, cols, false, dst, true);
        }
    });
    Ok(out)
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
    grad_out: &Tensor<T>,
    needs: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let geom = Geometry::of(weight, dilation)?;
    let [b, c, h, w] = check_input(input, &geom)?;
    let hw = h * w;
    let k = geom.cols();
    let o = geom.out_ch;
    let pointwise = geom.kh == 1 && geom.kw == 1;
    let mut gx = needs[0].then(|| Tensor::zeros(input.shape()));
    let mut gw = needs[1].then(|| Tensor::zeros(weight.shape()));
    let mut gb = needs[2].then(|| Tensor::zeros(&[o]));
    if geom.direct() {
        for s in 0..b {
            let src = &input.data()[s * c * hw..(s + 1) * c * hw];
            let go = &grad_out.data()[s * o * hw..(s + 1) * o * hw];
            if let Some(gb) = gb.as_mut() {
                for (oc, acc) in gb.data_mut().iter_mut().enumerate() {
                    *acc += sum(&go[oc * hw..(oc + 1) * hw]);
                }
            }
            let gxs = gx.as_mut().map(|t| &mut t.data_mut()[s * c * hw..(s + 1) * c * hw]);
            geom.direct_backward(src, weight.data(), go, h, w, gxs, gw.as_mut().map(|t| t.data_mut()));
        }
        return Ok([gx, gw, gb]);
    }
    let col_len = if pointwise || !needs[1] { 0 } else { k * hw };
    let gcol_len = if pointwise || !needs[0] { 0 } else { k * hw };
    with_scratch(col_len, |col: &mut [T]| {
        with_scratch(gcol_len, |gcol: &mut [T]| {
            for s in 0..b {
                let src = &input.data()[s * c * hw..(s + 1) * c * hw];
                let go = &grad_out.data()[s * o * hw..(s + 1) * o * hw];
                if let Some(gb) = gb.as_mut() {
                    for (oc, acc) in gb.data_mut().iter_mut().enumerate() {
                        *acc += sum(&go[oc * hw..(oc + 1) * hw]);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let cols = if pointwise {
                        src
                    } else {
                        geom.im2col(src, h, w, col);
                        &col[..]
                    };
                    // dW (O×K) += dY (O×HW) · colsᵀ (HW×K)
                    matmul(o, hw, k, go, false, cols, true, gw.data_mut(), true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx.data_mut()[s * c * hw..(s + 1) * c * hw];
                    if pointwise {
                        matmul(k, o, hw, weight.data(), true, go, false, dst, true);
                    } else {
                        // dcols (K×HW) = Wᵀ (K×O) · dY (O×HW)
                        matmul(k, o, hw, weight.data(), true, go, false, gcol, false);
                        geom.col2im(gcol, h, w, dst);
                    }
                }
            }
        })
    });
    Ok([gx, gw, gb])
}
