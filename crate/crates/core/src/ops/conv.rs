//! Dilated 2-D convolution, 2×2 max pooling and fixed bilinear upsampling.

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Geometry of a convolution: input extents, kernel extents and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w() as isize;
        let (s, off) = (self.stride as isize, kx as isize * self.dilation as isize - self.padding as isize);
        // 0 ≤ ox·s + off < w
        let lo = ((-off).max(0) + s - 1) / s;
        let hi = ((self.w as isize - off).max(0) + s - 1) / s;
        (lo.min(ow) as usize, hi.min(ow) as usize)
    }

    /// Unfold one C×H×W sample into a (C·kh·kw) × (out_h·out_w) matrix.
    fn im2col<T: Float>(&self, x: &[T], col: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (s, d, p) = (self.stride as isize, self.dilation as isize, self.padding as isize);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kx);
                    let off = kx as isize * d - p;
                    let dst = &mut col[row * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize * d;
                        let line = &mut dst[oy * ow..][..ow];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = (lo as isize * s + off) as usize;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(self.stride)) {
                                *v = x;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add a column matrix into a sample.
    fn col2im<T: Float>(&self, col: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (s, d, p) = (self.stride as isize, self.dilation as isize, self.padding as isize);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kx);
                    let off = kx as isize * d - p;
                    let src = &col[row * oh * ow..][..oh * ow];
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let start = (lo as isize * s + off) as usize;
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize * d;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        let line = &src[oy * ow..][lo..hi];
                        for (t, &v) in dst[start..].iter_mut().step_by(self.stride).zip(line) {
                            *t += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cache-blocked transpose of a rows×cols row-major matrix.
fn transpose_into<T: Float>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

struct Conv2dRule<T> {
    geom: ConvGeom,
    batch: usize,
    has_bias: bool,
    /// Unfolded input columns per sample, kept from the forward pass when
    /// the kernel needs a gradient (empty for pointwise kernels).
    cols: Vec<T>,
}

impl<T: Float> Backward<T> for Conv2dRule<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let geom = &self.geom;
        let (k, p, co) = (geom.col_rows(), geom.col_cols(), geom.c_out);
        let x = ctx.input(0).data();
        let w = ctx.input(1).data();
        let in_size = geom.c_in * geom.h * geom.w;
        let mut dcol = vec![T::zero(); k * p];
        let mut rows = vec![T::zero(); k * p];
        let (dx, dw, db) = grads.triple_mut();
        let (mut dx, mut dw, mut db) = (dx, dw, if self.has_bias { db } else { None });
        for n in 0..self.batch {
            let gn = &g[n * co * p..][..co * p];
            let xn = &x[n * in_size..][..in_size];
            if let Some(dw) = dw.as_deref_mut() {
                let cols: &[T] = if geom.is_pointwise() { xn } else { &self.cols[n * k * p..][..k * p] };
                // dW (co×k) += G (co×p) · colᵀ, with colᵀ materialized: the
                // gemm packs a row-major operand several times faster.
                transpose_into(cols, k, p, &mut rows);
                T::gemm(co, p, k, T::one(), gn, p as isize, 1, &rows, k as isize, 1, T::one(), dw, k as isize, 1);
            }
            if let Some(db) = db.as_deref_mut() {
                for (b, row) in db.iter_mut().zip(gn.chunks(p)) {
                    *b += row.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * in_size..][..in_size];
                if geom.is_pointwise() {
                    T::gemm(k, co, p, T::one(), w, 1, k as isize, gn, p as isize, 1, T::one(), dxn, p as isize, 1);
                } else {
                    // dcol (k×p) = Wᵀ · G
                    T::gemm(k, co, p, T::one(), w, 1, k as isize, gn, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
                    geom.col2im(&dcol, dxn);
                }
            }
        }
    }
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl<T: Float> Backward<T> for MaxPoolRule {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        if let Some(dx) = grads.get_mut(0) {
            for (&src, &gi) in self.argmax.iter().zip(g) {
                dx[src] += gi;
            }
        }
    }
}

/// The two source taps and weights of output index `o` when doubling an
/// axis of length `n` with edge-clamped bilinear interpolation.
pub(crate) fn upsample_taps<T: Float>(o: usize, n: usize) -> [(usize, T); 2] {
    let m = o / 2;
    let near = T::lit(0.75);
    let far = T::lit(0.25);
    let other = if o % 2 == 0 { m.saturating_sub(1) } else { (m + 1).min(n - 1) };
    [(m, near), (other, far)]
}

struct UpsampleRule {
    dims: (usize, usize, usize, usize),
}

impl<T: Float> Backward<T> for UpsampleRule {
    fn name(&self) -> &'static str {
        "bilinear_upsample2x"
    }

    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dx) = grads.get_mut(0) else { return };
        let (n, c, h, w) = self.dims;
        let (oh, ow) = (2 * h, 2 * w);
        for plane in 0..n * c {
            let src = &g[plane * oh * ow..][..oh * ow];
            let dst = &mut dx[plane * h * w..][..h * w];
            for oy in 0..oh {
                let ty = upsample_taps::<T>(oy, h);
                for ox in 0..ow {
                    let tx = upsample_taps::<T>(ox, w);
                    let gi = src[oy * ow + ox];
                    for &(y, wy) in &ty {
                        for &(x, wx) in &tx {
                            dst[y * w + x] += gi * wy * wx;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tape<T> {
    /// Dilated cross-correlation with zero padding, plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, dilation: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(Error::config(format!("conv2d: kernel expects {wc_in} input channels, input has {c_in}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::config("conv2d: stride and dilation must be at least 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::config(format!("conv2d: bias shape {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(Error::config(format!(
                "conv2d: {h}×{w} input with padding {padding} is smaller than the {span_h}×{span_w} dilated kernel"
            )));
        }
        let geom = ConvGeom { c_in, h, w, c_out, kh, kw, stride, dilation, padding };
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut out = vec![T::zero(); n * c_out * p];
        let keep = self.requires_grad(weight);
        let unfolded = if geom.is_pointwise() {
            0
        } else if keep {
            n
        } else {
            1
        };
        let mut cols_buf = vec![T::zero(); unfolded * k * p];
        let in_size = c_in * h * w;
        for s in 0..n {
            let xn = &xs[s * in_size..][..in_size];
            let cols: &[T] = if geom.is_pointwise() {
                xn
            } else {
                let slot = if keep { s } else { 0 };
                let col = &mut cols_buf[slot * k * p..][..k * p];
                geom.im2col(xn, col);
                col
            };
            let dst = &mut out[s * c_out * p..][..c_out * p];
            T::gemm(c_out, k, p, T::one(), ws, k as isize, 1, cols, p as isize, 1, T::zero(), dst, p as isize, 1);
            if let Some(b) = bias {
                for (row, &bv) in dst.chunks_mut(p).zip(self.value(b).data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Conv2dRule { geom, batch: n, has_bias: bias.is_some(), cols: if keep { cols_buf } else { Vec::new() } }))
    }

    /// 2×2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("max_pool2 needs even extents, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, vec![x], MaxPoolRule { argmax }))
    }

    /// Fixed bilinear 2× upsampling: a stride-2 transposed convolution with
    /// the 4×4 bilinear kernel over an edge-replicated input.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::config("bilinear_upsample2x on an empty map"));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..][..h * w];
            let d = &mut out[plane * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let ty = upsample_taps::<T>(oy, h);
                for ox in 0..ow {
                    let tx = upsample_taps::<T>(ox, w);
                    let mut acc = T::zero();
                    for &(y, wy) in &ty {
                        for &(xx, wx) in &tx {
                            acc += s[y * w + xx] * wy * wx;
                        }
                    }
                    d[oy * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, vec![x], UpsampleRule { dims }))
    }
}
