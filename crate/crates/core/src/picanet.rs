//! Pixel-wise contextual attention.
//!
//! For every pixel, a softmax over D context positions weights the features
//! found there; the weighted sum is the attended contextual feature.
//!
//! * Global attention looks at a regular grid of `A_w × A_h` anchors spaced
//!   `dilation` apart and centered on the map. Every pixel first sees the
//!   whole map through a ReNet (row biLSTM, then column biLSTM).
//! * Local attention looks at a `W̄ × H̄` dilated window centered on the
//!   pixel, zero padded at the border. Its context comes from a dilated conv.
//!
//! Attention channels are indexed row-major over the grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, Group, Init, ParamRegistry};
use crate::ops::Mode;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    pub renet_hidden: usize,
    /// (A_w, A_h)
    pub attn_grid: (usize, usize),
    pub dilation: usize,
    pub bn_before_softmax: bool,
    /// Number of horizontal+vertical sweep pairs in the ReNet.
    #[serde(default = "one")]
    pub renet_passes: usize,
}

fn one() -> usize {
    1
}

impl GlobalConfig {
    /// 256 hidden units, 10×10 grid, dilation 3 (for a 28×28 map).
    pub fn paper() -> Self {
        Self { renet_hidden: 256, attn_grid: (10, 10), dilation: 3, bn_before_softmax: true, renet_passes: 1 }
    }

    /// Desk-scale default for 16×16 maps: a 6×6 grid with dilation 3 spans 16.
    pub fn toy() -> Self {
        Self { renet_hidden: 16, attn_grid: (6, 6), dilation: 3, bn_before_softmax: true, renet_passes: 1 }
    }

    pub fn positions(&self) -> usize {
        self.attn_grid.0 * self.attn_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 || self.attn_grid.0 == 0 || self.attn_grid.1 == 0 {
            return Err(Error::config("global attention grid and dilation must be at least 1"));
        }
        if self.renet_hidden == 0 || self.renet_passes == 0 {
            return Err(Error::config("ReNet needs at least one hidden unit and one pass"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub context_kernel: usize,
    pub context_dilation: usize,
    pub context_channels: usize,
    /// (W̄, H̄), both odd
    pub attn_grid: (usize, usize),
    pub attend_dilation: usize,
    #[serde(default = "yes")]
    pub bn_before_softmax: bool,
}

fn yes() -> bool {
    true
}

impl LocalConfig {
    /// 7×7 context conv with dilation 2 and 128 channels; 7×7 grid with dilation 2.
    pub fn paper() -> Self {
        Self {
            context_kernel: 7,
            context_dilation: 2,
            context_channels: 128,
            attn_grid: (7, 7),
            attend_dilation: 2,
            bn_before_softmax: true,
        }
    }

    pub fn toy() -> Self {
        Self { context_kernel: 5, context_dilation: 2, context_channels: 8, attn_grid: (5, 5), attend_dilation: 2, bn_before_softmax: true }
    }

    pub fn positions(&self) -> usize {
        self.attn_grid.0 * self.attn_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let (gw, gh) = self.attn_grid;
        if gw % 2 == 0 || gh % 2 == 0 {
            return Err(Error::config(format!("local attention grid {gw}×{gh} must be odd in both extents")));
        }
        if self.context_kernel % 2 == 0 {
            return Err(Error::config("local context kernel must be odd"));
        }
        if self.context_dilation == 0 || self.attend_dilation == 0 || self.context_channels == 0 {
            return Err(Error::config("local dilations and context channels must be at least 1"));
        }
        Ok(())
    }
}

/// Context region used by a pooling baseline: the same positions the
/// corresponding attention module would attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum Footprint {
    /// Anchor positions from [`attention_positions`].
    Global(Vec<(isize, isize)>),
    /// Dilated window centered on each pixel: (W̄, H̄, d).
    Local { grid: (usize, usize), dilation: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Anchor coordinates `(row, col)` for each attention index, row-major.
///
/// Anchors form a grid with spacing `dilation`, centered on the map:
/// offset = ⌊(extent − ((A − 1)·d + 1)) / 2⌋ per axis. Offsets may be
/// negative; anchors off the map read zero features.
pub fn attention_positions(width: usize, height: usize, grid: (usize, usize), dilation: usize) -> Vec<(isize, isize)> {
    let (aw, ah) = grid;
    let offset = |extent: usize, a: usize| -> isize {
        let span = ((a as isize) - 1) * dilation as isize + 1;
        (extent as isize - span).div_euclid(2)
    };
    let (ox, oy) = (offset(width, aw), offset(height, ah));
    let d = dilation as isize;
    (0..ah).flat_map(|r| (0..aw).map(move |c| (oy + r as isize * d, ox + c as isize * d))).collect()
}

fn anchor_indices(positions: &[(isize, isize)], h: usize, w: usize) -> Vec<Option<usize>> {
    positions
        .iter()
        .map(|&(r, c)| (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| r as usize * w + c as usize))
        .collect()
}

/// Offsets (dy, dx) of the window taps, row-major over the grid.
fn window_offsets(grid: (usize, usize), dilation: usize) -> Vec<(isize, isize)> {
    let (gw, gh) = grid;
    let (cx, cy) = ((gw / 2) as isize, (gh / 2) as isize);
    let d = dilation as isize;
    (0..gh as isize).flat_map(|r| (0..gw as isize).map(move |c| ((r - cy) * d, (c - cx) * d))).collect()
}

/// Output rows/cols `y` for which `y + off` stays inside `[0, n)`.
fn valid_range(n: usize, off: isize) -> std::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    lo.min(hi)..hi
}

struct GlobalAttendRule {
    anchors: Vec<Option<usize>>,
}

fn gather_anchors<T: Float>(f: &[T], c: usize, hw: usize, anchors: &[Option<usize>]) -> Vec<T> {
    let d = anchors.len();
    let mut g = vec![T::zero(); c * d];
    for ch in 0..c {
        for (i, a) in anchors.iter().enumerate() {
            if let Some(p) = a {
                g[ch * d + i] = f[ch * hw + p];
            }
        }
    }
    g
}

impl<T: Float> Backward<T> for GlobalAttendRule {
    fn name(&self) -> &'static str {
        "global_attend"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &[T], grads: &mut InputGrads<T>) {
        let f = ctx.input(0);
        let a = ctx.input(1).data();
        let (n, c, h, w) = f.dims4().expect("rank-4");
        let (hw, d) = (h * w, self.anchors.len());
        let (df, da) = grads.pair_mut(0, 1);
        let (mut df, mut da) = (df, da);
        let mut dg = vec![T::zero(); c * d];
        for s in 0..n {
            let gs = &grad[s * c * hw..][..c * hw];
            let as_ = &a[s * d * hw..][..d * hw];
            if let Some(da) = da.as_deref_mut() {
                let g = gather_anchors(&f.data()[s * c * hw..][..c * hw], c, hw, &self.anchors);
                // dA (d×hw) += Gᵀ · grad
                T::gemm(
                    d,
                    c,
                    hw,
                    T::one(),
                    &g,
                    1,
                    d as isize,
                    gs,
                    hw as isize,
                    1,
                    T::one(),
                    &mut da[s * d * hw..][..d * hw],
                    hw as isize,
                    1,
                );
            }
            if let Some(df) = df.as_deref_mut() {
                // dG (c×d) = grad · Aᵀ
                T::gemm(c, hw, d, T::one(), gs, hw as isize, 1, as_, 1, hw as isize, T::zero(), &mut dg, d as isize, 1);
                let dfs = &mut df[s * c * hw..][..c * hw];
                for ch in 0..c {
                    for (i, anchor) in self.anchors.iter().enumerate() {
                        if let Some(p) = anchor {
                            dfs[ch * hw + p] += dg[ch * d + i];
                        }
                    }
                }
            }
        }
    }
}

struct LocalAttendRule {
    offsets: Vec<(isize, isize)>,
}

impl<T: Float> Backward<T> for LocalAttendRule {
    fn name(&self) -> &'static str {
        "local_attend"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &[T], grads: &mut InputGrads<T>) {
        let f = ctx.input(0);
        let a = ctx.input(1).data();
        let (n, c, h, w) = f.dims4().expect("rank-4");
        let f = f.data();
        let (hw, d) = (h * w, self.offsets.len());
        let (mut df, mut da) = grads.pair_mut(0, 1);
        for s in 0..n {
            for (i, &(dy, dx)) in self.offsets.iter().enumerate() {
                let ai = &a[(s * d + i) * hw..][..hw];
                let (rows, cols) = (valid_range(h, dy), valid_range(w, dx));
                for ch in 0..c {
                    let gp = &grad[(s * c + ch) * hw..][..hw];
                    let base = (s * c + ch) * hw;
                    if let Some(df) = df.as_deref_mut() {
                        let fp = &mut df[base..base + hw];
                        for y in rows.clone() {
                            let sy = (y as isize + dy) as usize;
                            for x in cols.clone() {
                                let sx = (x as isize + dx) as usize;
                                fp[sy * w + sx] += ai[y * w + x] * gp[y * w + x];
                            }
                        }
                    }
                    if let Some(da) = da.as_deref_mut() {
                        let fp = &f[base..base + hw];
                        let dai = &mut da[(s * d + i) * hw..][..hw];
                        for y in rows.clone() {
                            let sy = (y as isize + dy) as usize;
                            for x in cols.clone() {
                                let sx = (x as isize + dx) as usize;
                                dai[y * w + x] += fp[sy * w + sx] * gp[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct PoolRule {
    mode: PoolMode,
    /// Per output element: the input index that won the max, if any.
    argmax: Vec<Option<usize>>,
    /// For average pooling: the tap list (global) or window offsets (local).
    footprint: Footprint,
}

impl<T: Float> Backward<T> for PoolRule {
    fn name(&self) -> &'static str {
        "pooled_context"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &[T], grads: &mut InputGrads<T>) {
        let Some(df) = grads.get_mut(0) else { return };
        let (n, c, h, w) = ctx.input(0).dims4().expect("rank-4");
        let hw = h * w;
        match self.mode {
            PoolMode::Max => {
                for (&src, &g) in self.argmax.iter().zip(grad) {
                    if let Some(src) = src {
                        df[src] += g;
                    }
                }
            }
            PoolMode::Avg => match &self.footprint {
                Footprint::Global(positions) => {
                    let inv = T::one() / T::from_usize(positions.len()).unwrap();
                    let anchors = anchor_indices(positions, h, w);
                    for plane in 0..n * c {
                        let total: T = grad[plane * hw..][..hw].iter().copied().sum();
                        for p in anchors.iter().flatten() {
                            df[plane * hw + p] += total * inv;
                        }
                    }
                }
                Footprint::Local { grid, dilation } => {
                    let offsets = window_offsets(*grid, *dilation);
                    let inv = T::one() / T::from_usize(offsets.len()).unwrap();
                    for plane in 0..n * c {
                        let gp = &grad[plane * hw..][..hw];
                        let fp = &mut df[plane * hw..][..hw];
                        for &(dy, dx) in &offsets {
                            for y in valid_range(h, dy) {
                                let sy = (y as isize + dy) as usize;
                                for x in valid_range(w, dx) {
                                    fp[sy * w + (x as isize + dx) as usize] += gp[y * w + x] * inv;
                                }
                            }
                        }
                    }
                }
            },
        }
    }
}

fn check_attention<T: Float>(tape: &Tape<T>, f: Var, attn: Var, d: usize) -> Result<(usize, usize, usize, usize)> {
    let dims @ (n, _, h, w) = tape.value(f).dims4()?;
    let (an, ad, ah, aw) = tape.value(attn).dims4()?;
    if ad != d {
        return Err(Error::config(format!("attention has {ad} channels, the context has {d} positions")));
    }
    if (an, ah, aw) != (n, h, w) {
        return Err(Error::config(format!("attention extents {an}×{ah}×{aw} do not match features {n}×{h}×{w}")));
    }
    Ok(dims)
}

impl<T: Float> Tape<T> {
    /// `F_att(h, w) = Σᵢ αᵢ(h, w) · f(anchorᵢ)`, zero features off the map.
    pub fn global_attend(&mut self, f: Var, attn: Var, positions: &[(isize, isize)]) -> Result<Var> {
        let (n, c, h, w) = check_attention(self, f, attn, positions.len())?;
        let anchors = anchor_indices(positions, h, w);
        let (hw, d) = (h * w, positions.len());
        let fd = self.value(f).data();
        let ad = self.value(attn).data();
        let mut out = vec![T::zero(); n * c * hw];
        for s in 0..n {
            let g = gather_anchors(&fd[s * c * hw..][..c * hw], c, hw, &anchors);
            T::gemm(
                c,
                d,
                hw,
                T::one(),
                &g,
                d as isize,
                1,
                &ad[s * d * hw..][..d * hw],
                hw as isize,
                1,
                T::zero(),
                &mut out[s * c * hw..][..c * hw],
                hw as isize,
                1,
            );
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(out, vec![f, attn], GlobalAttendRule { anchors }))
    }

    /// `F_att(h, w) = Σᵢ ᾱᵢ(h, w) · F(h + δyᵢ, w + δxᵢ)` over the dilated
    /// window centered on (h, w), zero padded.
    pub fn local_attend(&mut self, f: Var, attn: Var, grid: (usize, usize), dilation: usize) -> Result<Var> {
        if grid.0 % 2 == 0 || grid.1 % 2 == 0 {
            return Err(Error::config(format!("local attention grid {}×{} must be odd", grid.0, grid.1)));
        }
        if dilation == 0 {
            return Err(Error::config("local attention dilation must be at least 1"));
        }
        let offsets = window_offsets(grid, dilation);
        let (n, c, h, w) = check_attention(self, f, attn, offsets.len())?;
        let (hw, d) = (h * w, offsets.len());
        let fd = self.value(f).data();
        let ad = self.value(attn).data();
        let mut out = vec![T::zero(); n * c * hw];
        for s in 0..n {
            for (i, &(dy, dx)) in offsets.iter().enumerate() {
                let ai = &ad[(s * d + i) * hw..][..hw];
                let (rows, cols) = (valid_range(h, dy), valid_range(w, dx));
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let fp = &fd[base..base + hw];
                    let op = &mut out[base..base + hw];
                    for y in rows.clone() {
                        let sy = (y as isize + dy) as usize;
                        for x in cols.clone() {
                            op[y * w + x] += ai[y * w + x] * fp[sy * w + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(out, vec![f, attn], LocalAttendRule { offsets }))
    }

    /// Non-parametric baseline: per-pixel max or mean over the positions the
    /// matching attention module would attend to (zero-padded taps included).
    pub fn pooled_context(&mut self, f: Var, mode: PoolMode, footprint: &Footprint) -> Result<Var> {
        let (n, c, h, w) = self.value(f).dims4()?;
        let hw = h * w;
        let fd = self.value(f).data();
        let mut out = vec![T::zero(); n * c * hw];
        let mut argmax = Vec::new();
        match footprint {
            Footprint::Global(positions) => {
                if positions.is_empty() {
                    return Err(Error::config("empty global footprint"));
                }
                let anchors = anchor_indices(positions, h, w);
                let padded = anchors.iter().any(Option::is_none);
                let inv = T::one() / T::from_usize(anchors.len()).unwrap();
                for plane in 0..n * c {
                    let fp = &fd[plane * hw..][..hw];
                    let (value, winner) = match mode {
                        PoolMode::Avg => (anchors.iter().flatten().map(|&p| fp[p]).sum::<T>() * inv, None),
                        PoolMode::Max => {
                            let mut best: Option<(T, Option<usize>)> = padded.then_some((T::zero(), None));
                            for &p in anchors.iter().flatten() {
                                if best.is_none_or(|(b, _)| fp[p] > b) {
                                    best = Some((fp[p], Some(plane * hw + p)));
                                }
                            }
                            best.expect("non-empty footprint")
                        }
                    };
                    out[plane * hw..][..hw].fill(value);
                    if mode == PoolMode::Max {
                        argmax.extend(std::iter::repeat_n(winner, hw));
                    }
                }
            }
            Footprint::Local { grid, dilation } => {
                if grid.0 % 2 == 0 || grid.1 % 2 == 0 || *dilation == 0 {
                    return Err(Error::config("local footprint needs an odd grid and dilation ≥ 1"));
                }
                let offsets = window_offsets(*grid, *dilation);
                let inv = T::one() / T::from_usize(offsets.len()).unwrap();
                if mode == PoolMode::Max {
                    argmax = vec![None; n * c * hw];
                }
                for plane in 0..n * c {
                    let fp = &fd[plane * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = T::zero();
                            let mut best: Option<(T, Option<usize>)> = None;
                            for &(dy, dx) in &offsets {
                                let (sy, sx) = (y as isize + dy, x as isize + dx);
                                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                                let (v, src) = if inside {
                                    let p = sy as usize * w + sx as usize;
                                    (fp[p], Some(plane * hw + p))
                                } else {
                                    (T::zero(), None)
                                };
                                acc += v;
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, src));
                                }
                            }
                            let idx = plane * hw + y * w + x;
                            match mode {
                                PoolMode::Avg => out[idx] = acc * inv,
                                PoolMode::Max => {
                                    let (v, src) = best.expect("non-empty window");
                                    out[idx] = v;
                                    argmax[idx] = src;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(out, vec![f], PoolRule { mode, argmax, footprint: footprint.clone() }))
    }
}

/// Normalized per-pixel attention, exported for inspection.
#[derive(Clone, Debug)]
pub struct AttentionField<T> {
    /// N×D×H×W
    pub weights: Tensor<T>,
    /// (A_w, A_h) or (W̄, H̄)
    pub grid: (usize, usize),
    pub dilation: usize,
}

impl<T: Float> AttentionField<T> {
    /// The D weights of pixel (row, col) in sample `n`, row-major over the grid.
    pub fn pixel(&self, n: usize, row: usize, col: usize) -> Vec<T> {
        let (_, d, _, _) = self.weights.dims4().expect("rank-4");
        (0..d).map(|i| self.weights.at4(n, i, row, col)).collect()
    }

    /// Largest |Σᵢ wᵢ − 1| over all pixels; also fails on negative weights.
    pub fn max_normalization_error(&self) -> f64 {
        let (n, d, h, w) = self.weights.dims4().expect("rank-4");
        let mut worst = 0.0f64;
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut total = 0.0;
                    for i in 0..d {
                        let v = self.weights.at4(s, i, y, x).as_f64();
                        if v < 0.0 {
                            return f64::INFINITY;
                        }
                        total += v;
                    }
                    worst = worst.max((total - 1.0).abs());
                }
            }
        }
        worst
    }
}

/// Output of a PiCANet module on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// N×C×H×W, same shape as the input features.
    pub features: Var,
    /// N×D×H×W normalized weights.
    pub attention: Var,
}

/// Register the ReNet sweeps: per pass, a row biLSTM then a column biLSTM.
pub fn register_renet<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    in_channels: usize,
    hidden: usize,
    passes: usize,
    group: Group,
) -> Result<()> {
    let mut channels = in_channels;
    for p in 0..passes {
        nn::register_bilstm(reg, init, &format!("{prefix}.pass{p}.rows"), channels, hidden, group)?;
        nn::register_bilstm(reg, init, &format!("{prefix}.pass{p}.cols"), 2 * hidden, hidden, group)?;
        channels = 2 * hidden;
    }
    Ok(())
}

/// Bidirectional sweep along the last axis of a (L, N, S, C) layout:
/// returns (L, N, S, 2·hidden) where the recurrence runs over L.
fn sweep<T: Float>(tape: &mut Tape<T>, bind: &Binding<T>, prefix: &str, seq_major: Var) -> Result<Var> {
    let shape = tape.shape(seq_major).to_vec();
    let (len, n, s, c) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(seq_major, &[len, n * s, c])?;
    let steps: Vec<Var> = (0..len).map(|t| tape.select(flat, t)).collect::<Result<_>>()?;
    let fwd = nn::lstm_weights(bind, &format!("{prefix}.fwd"))?;
    let bwd = nn::lstm_weights(bind, &format!("{prefix}.bwd"))?;
    let outs = nn::bilstm_scan(tape, &steps, &fwd, &bwd)?;
    let stacked = tape.stack(&outs)?;
    let width = tape.shape(stacked)[2];
    tape.reshape(stacked, &[len, n, s, width])
}

/// ReNet context sweep: N×C×H×W → N×2·hidden×H×W, each output pixel
/// depending on every input pixel.
pub fn renet_sweep<T: Float>(tape: &mut Tape<T>, bind: &Binding<T>, prefix: &str, f: Var, passes: usize) -> Result<Var> {
    tape.value(f).dims4()?;
    // (N, C, H, W) → (W, N, H, C): rows are sequences over W.
    let mut x = tape.permute(f, &[3, 0, 2, 1])?;
    for p in 0..passes {
        let rows = sweep(tape, bind, &format!("{prefix}.pass{p}.rows"), x)?;
        // (W, N, H, C') → (H, N, W, C'): columns are sequences over H.
        let by_col = tape.permute(rows, &[2, 1, 0, 3])?;
        let cols = sweep(tape, bind, &format!("{prefix}.pass{p}.cols"), by_col)?;
        // back to (W, N, H, C') for a further pass
        x = tape.permute(cols, &[2, 1, 0, 3])?;
    }
    // (W, N, H, C') → (N, C', H, W)
    tape.permute(x, &[1, 3, 2, 0])
}

pub fn register_global<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    channels: usize,
    cfg: &GlobalConfig,
    group: Group,
) -> Result<()> {
    cfg.validate()?;
    register_renet(reg, init, &format!("{prefix}.renet"), channels, cfg.renet_hidden, cfg.renet_passes, group)?;
    register_logits(reg, init, prefix, cfg.positions(), 2 * cfg.renet_hidden, cfg.bn_before_softmax, group)?;
    Ok(())
}

pub fn register_local<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    channels: usize,
    cfg: &LocalConfig,
    group: Group,
) -> Result<()> {
    cfg.validate()?;
    nn::register_conv(reg, init, &format!("{prefix}.context"), cfg.context_channels, channels, cfg.context_kernel, group)?;
    register_logits(reg, init, prefix, cfg.positions(), cfg.context_channels, cfg.bn_before_softmax, group)?;
    Ok(())
}

/// 1×1 conv to `positions` logits; with BN after it the conv has no bias.
fn register_logits<T: Float>(
    reg: &mut ParamRegistry<T>,
    init: &mut Init,
    prefix: &str,
    positions: usize,
    c_in: usize,
    bn: bool,
    group: Group,
) -> Result<()> {
    let name = format!("{prefix}.logits");
    if bn {
        nn::register_conv_weight(reg, init, &name, positions, c_in, 1, group)?;
        nn::register_bn(reg, &format!("{prefix}.logits_bn"), positions, group)
    } else {
        nn::register_conv(reg, init, &name, positions, c_in, 1, group)
    }
}

fn normalize_logits<T: Float>(tape: &mut Tape<T>, bind: &mut Binding<T>, prefix: &str, logits: Var, bn: bool, mode: Mode) -> Result<Var> {
    let logits = if bn { nn::batch_norm(tape, bind, &format!("{prefix}.logits_bn"), logits, mode)? } else { logits };
    tape.channel_softmax(logits)
}

/// ReNet → 1×1 conv to D logits → BN → softmax → global attending.
pub fn global_picanet_forward<T: Float>(
    tape: &mut Tape<T>,
    bind: &mut Binding<T>,
    prefix: &str,
    f: Var,
    cfg: &GlobalConfig,
    mode: Mode,
) -> Result<Attended> {
    let (_, _, h, w) = tape.value(f).dims4()?;
    let context = renet_sweep(tape, bind, &format!("{prefix}.renet"), f, cfg.renet_passes)?;
    let logits = nn::conv(tape, bind, &format!("{prefix}.logits"), context, 1)?;
    let attention = normalize_logits(tape, bind, prefix, logits, cfg.bn_before_softmax, mode)?;
    let positions = attention_positions(w, h, cfg.attn_grid, cfg.dilation);
    let features = tape.global_attend(f, attention, &positions)?;
    Ok(Attended { features, attention })
}

/// Dilated context conv + ReLU → 1×1 conv to D̄ logits → BN → softmax →
/// local attending.
pub fn local_picanet_forward<T: Float>(
    tape: &mut Tape<T>,
    bind: &mut Binding<T>,
    prefix: &str,
    f: Var,
    cfg: &LocalConfig,
    mode: Mode,
) -> Result<Attended> {
    let context = nn::conv(tape, bind, &format!("{prefix}.context"), f, cfg.context_dilation)?;
    let context = tape.relu(context);
    let logits = nn::conv(tape, bind, &format!("{prefix}.logits"), context, 1)?;
    let attention = normalize_logits(tape, bind, prefix, logits, cfg.bn_before_softmax, mode)?;
    let features = tape.local_attend(f, attention, cfg.attn_grid, cfg.attend_dilation)?;
    Ok(Attended { features, attention })
}
