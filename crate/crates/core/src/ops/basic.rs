//! Elementwise arithmetic, matrix products, reductions and shape plumbing.

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

struct AddRule;
struct SubRule;
struct MulRule;
struct ScaleRule<T>(T);
struct ActivationRule(Activation);
struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}
struct RowBiasRule {
    cols: usize,
}
struct SumRule;
struct MeanRule;
struct ConcatRule {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}
struct SliceRule {
    outer: usize,
    inner: usize,
    extent: usize,
    start: usize,
    len: usize,
}
struct PermuteRule {
    in_shape: Vec<usize>,
    perm: Vec<usize>,
}
struct ReshapeRule;
struct SelectRule {
    index: usize,
}
struct StackRule;

fn accumulate<T: Float>(dst: Option<&mut [T]>, src: &[T]) {
    if let Some(dst) = dst {
        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
    }
}

impl<T: Float> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (a, b) = grads.pair_mut(0, 1);
        accumulate(a, g);
        accumulate(b, g);
    }
}

impl<T: Float> Backward<T> for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (a, b) = grads.pair_mut(0, 1);
        accumulate(a, g);
        if let Some(b) = b {
            b.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
        }
    }
}

impl<T: Float> Backward<T> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (xa, xb) = (ctx.input(0).data(), ctx.input(1).data());
        let (a, b) = grads.pair_mut(0, 1);
        if let Some(a) = a {
            for ((d, &gi), &bv) in a.iter_mut().zip(g).zip(xb) {
                *d += gi * bv;
            }
        }
        if let Some(b) = b {
            for ((d, &gi), &av) in b.iter_mut().zip(g).zip(xa) {
                *d += gi * av;
            }
        }
    }
}

impl<T: Float> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        if let Some(dx) = grads.get_mut(0) {
            dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * self.0);
        }
    }
}

impl<T: Float> Backward<T> for ActivationRule {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dx) = grads.get_mut(0) else { return };
        let y = ctx.output().data();
        match self.0 {
            Activation::Relu => {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    if yi > T::zero() {
                        *d += gi;
                    }
                }
            }
            Activation::Sigmoid => {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (T::one() - yi);
                }
            }
            Activation::Tanh => {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (T::one() - yi * yi);
                }
            }
        }
    }
}

impl<T: Float> Backward<T> for MatMulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        let (da, db) = grads.pair_mut(0, 1);
        if let Some(da) = da {
            // dA (m×k) += G (m×n) · Bᵀ
            T::gemm(m, n, k, T::one(), g, n as isize, 1, b, 1, n as isize, T::one(), da, k as isize, 1);
        }
        if let Some(db) = db {
            // dB (k×n) += Aᵀ · G
            T::gemm(k, m, n, T::one(), a, 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
        }
    }
}

impl<T: Float> Backward<T> for RowBiasRule {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (dx, db) = grads.pair_mut(0, 1);
        accumulate(dx, g);
        if let Some(db) = db {
            for row in g.chunks(self.cols) {
                db.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
            }
        }
    }
}

impl<T: Float> Backward<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        if let Some(dx) = grads.get_mut(0) {
            dx.iter_mut().for_each(|d| *d += g[0]);
        }
    }
}

impl<T: Float> Backward<T> for MeanRule {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        if let Some(dx) = grads.get_mut(0) {
            let share = g[0] / T::from_usize(dx.len()).unwrap();
            dx.iter_mut().for_each(|d| *d += share);
        }
    }
}

impl<T: Float> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        for (i, &extent) in self.extents.iter().enumerate() {
            if let Some(dx) = grads.get_mut(i) {
                let chunk = extent * self.inner;
                for o in 0..self.outer {
                    let src = &g[(o * total + offset) * self.inner..][..chunk];
                    dx[o * chunk..][..chunk].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            offset += extent;
        }
    }
}

impl<T: Float> Backward<T> for SliceRule {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dx) = grads.get_mut(0) else { return };
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = &mut dx[(o * self.extent + self.start) * self.inner..][..chunk];
            dst.iter_mut().zip(&g[o * chunk..][..chunk]).for_each(|(d, &s)| *d += s);
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element of a permutation.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for axis in (0..idx.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

impl<T: Float> Backward<T> for PermuteRule {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dx) = grads.get_mut(0) else { return };
        for (&src, &gi) in permute_map(&self.in_shape, &self.perm).iter().zip(g) {
            dx[src] += gi;
        }
    }
}

impl<T: Float> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        accumulate(grads.get_mut(0), g);
    }
}

impl<T: Float> Backward<T> for SelectRule {
    fn name(&self) -> &'static str {
        "select"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        if let Some(dx) = grads.get_mut(0) {
            let n = g.len();
            dx[self.index * n..][..n].iter_mut().zip(g).for_each(|(d, &s)| *d += s);
        }
    }
}

impl<T: Float> Backward<T> for StackRule {
    fn name(&self) -> &'static str {
        "stack"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let n = ctx.input(0).len();
        for (i, chunk) in g.chunks(n).enumerate() {
            accumulate(grads.get_mut(i), chunk);
        }
    }
}

fn same_shape<T: Float>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::config(format!("{op}: shape mismatch {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, vec![a, b], AddRule))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, vec![a, b], SubRule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, vec![a, b], MulRule))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, vec![a], ScaleRule(factor))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, vec![x], ActivationRule(kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::config(format!("matmul: incompatible shapes {sa:?} and {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, vec![a, b], MatMulRule { m, k, n }))
    }

    /// Add a length-`k` bias to every row of an r×k matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = match (self.shape(x), self.shape(bias)) {
            (&[_, k], &[kb]) if k == kb => k,
            (sx, sb) => return Err(Error::config(format!("add_row_bias: shapes {sx:?} and {sb:?}"))),
        };
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(v, &bv)| *v += bv);
        }
        Ok(self.push(out, vec![x, bias], RowBiasRule { cols }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, vec![x], SumRule)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, vec![x], MeanRule)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::config("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::config(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::config(format!("concat along axis {axis}: shape {s:?} incompatible with {base:?}")));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &extent) in xs.iter().zip(&extents) {
                let chunk = extent * inner;
                data.extend_from_slice(&self.value(x).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, xs.to_vec(), ConcatRule { outer, inner, extents }))
    }

    /// Channel concatenation of N×C×H×W maps.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        for &x in xs {
            self.value(x).dims4()?;
        }
        self.concat(xs, 1)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::config(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * extent + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, vec![x], SliceRule { outer, inner, extent, start, len }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::config(format!("invalid permutation {perm:?} for {in_shape:?}")));
        }
        let src = self.value(x).data();
        let data = permute_map(&in_shape, perm).iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, vec![x], PermuteRule { in_shape, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, vec![x], ReshapeRule))
    }

    /// `x[index]` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::config(format!("select index {index} out of range for {shape:?}")));
        }
        let n: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * n..][..n].to_vec();
        let out = Tensor::from_vec(&shape[1..], data)?;
        Ok(self.push(out, vec![x], SelectRule { index }))
    }

    /// Stack equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = xs.iter().map(|&x| self.value(x).clone()).collect();
        let out = Tensor::stack(&values)?;
        Ok(self.push(out, xs.to_vec(), StackRule))
    }
}
