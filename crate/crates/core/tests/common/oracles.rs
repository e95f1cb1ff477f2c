//! Brute-force attending oracles shared by the test targets.
#![allow(dead_code)]

use picanet_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random per-pixel distributions over `d` entries.
pub fn random_attention(r: &mut ChaCha8Rng, n: usize, d: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, d, h, w]);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let raw: Vec<f64> = (0..d).map(|_| r.random_range(0.0..1.0f64).powi(3)).collect();
                let total: f64 = raw.iter().sum();
                for (i, v) in raw.into_iter().enumerate() {
                    t.data_mut()[((s * d + i) * h + y) * w + x] = v / total;
                }
            }
        }
    }
    t
}

pub fn feature(f: &Tensor<f64>, n: usize, c: usize, y: isize, x: isize) -> f64 {
    let s = f.shape();
    if y < 0 || x < 0 || y as usize >= s[2] || x as usize >= s[3] {
        0.0
    } else {
        f.at4(n, c, y as usize, x as usize)
    }
}

pub fn brute_global(f: &Tensor<f64>, a: &Tensor<f64>, positions: &[(isize, isize)]) -> Tensor<f64> {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[n, c, h, w], |idx| {
        let (x, y, ch, b) = (idx % w, (idx / w) % h, (idx / (w * h)) % c, idx / (w * h * c));
        positions.iter().enumerate().map(|(i, &(r, col))| a.at4(b, i, y, x) * feature(f, b, ch, r, col)).sum()
    })
}

/// Window taps of pixel (y, x), row-major over the grid.
pub fn taps(y: usize, x: usize, grid: (usize, usize), d: usize) -> Vec<(isize, isize)> {
    let (gw, gh) = grid;
    let mut out = Vec::new();
    for r in 0..gh as isize {
        for c in 0..gw as isize {
            out.push((y as isize + (r - gh as isize / 2) * d as isize, x as isize + (c - gw as isize / 2) * d as isize));
        }
    }
    out
}

pub fn brute_local(f: &Tensor<f64>, a: &Tensor<f64>, grid: (usize, usize), d: usize) -> Tensor<f64> {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[n, c, h, w], |idx| {
        let (x, y, ch, b) = (idx % w, (idx / w) % h, (idx / (w * h)) % c, idx / (w * h * c));
        taps(y, x, grid, d).into_iter().enumerate().map(|(i, (r, col))| a.at4(b, i, y, x) * feature(f, b, ch, r, col)).sum()
    })
}

pub fn run_global(f: &Tensor<f64>, a: &Tensor<f64>, positions: &[(isize, isize)]) -> Tensor<f64> {
    let mut t = Tape::new();
    let (fv, av) = (t.constant(f.clone()), t.constant(a.clone()));
    let y = t.global_attend(fv, av, positions).unwrap();
    t.value(y).clone()
}

pub fn run_local(f: &Tensor<f64>, a: &Tensor<f64>, grid: (usize, usize), d: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let (fv, av) = (t.constant(f.clone()), t.constant(a.clone()));
    let y = t.local_attend(fv, av, grid, d).unwrap();
    t.value(y).clone()
}

pub fn min_max_context(f: &Tensor<f64>, n: usize, c: usize, ctx: &[(isize, isize)]) -> (f64, f64) {
    ctx.iter().map(|&(y, x)| feature(f, n, c, y, x)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Weighted F-measure step by step: direct 2-D Gaussian filtering,
/// brute-force nearest foreground, then the dependency/importance weighting.
pub fn naive_weighted_f(pred: &[f32], gt: &[f32], h: usize, w: usize) -> f64 {
    let at = |y: usize, x: usize| y * w + x;
    let e: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).abs()).collect();
    let mut et = e.clone();
    let mut dst = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if gt[at(y, x)] == 1.0 {
                continue;
            }
            let mut best = (f64::INFINITY, 0);
            for fy in 0..h {
                for fx in 0..w {
                    let d = ((fy as f64 - y as f64).powi(2) + (fx as f64 - x as f64).powi(2)).sqrt();
                    if gt[at(fy, fx)] == 1.0 && d < best.0 {
                        best = (d, at(fy, fx));
                    }
                }
            }
            dst[at(y, x)] = best.0;
            et[at(y, x)] = e[best.1];
        }
    }
    // 7×7 Gaussian with σ = 5, normalized to unit sum
    let mut k = [[0.0f64; 7]; 7];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-(((i as f64 - 3.0).powi(2) + (j as f64 - 3.0).powi(2)) / 50.0)).exp();
        }
    }
    let total: f64 = k.iter().flatten().sum();
    let mut ea = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for i in -3..=3isize {
                for j in -3..=3isize {
                    let (sy, sx) = (y + i, x + j);
                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        acc += k[(i + 3) as usize][(j + 3) as usize] / total * et[at(sy as usize, sx as usize)];
                    }
                }
            }
            ea[at(y as usize, x as usize)] = acc;
        }
    }
    let mut min_e_ea = e.clone();
    for i in 0..h * w {
        if gt[i] == 1.0 && ea[i] < e[i] {
            min_e_ea[i] = ea[i];
        }
    }
    let b: Vec<f64> = (0..h * w).map(|i| if gt[i] == 1.0 { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * dst[i]).exp() }).collect();
    let ew: Vec<f64> = min_e_ea.iter().zip(&b).map(|(m, b)| m * b).collect();
    let fg: Vec<usize> = (0..h * w).filter(|&i| gt[i] == 1.0).collect();
    let tpw = fg.len() as f64 - fg.iter().map(|&i| ew[i]).sum::<f64>();
    let fpw: f64 = (0..h * w).filter(|&i| gt[i] != 1.0).map(|i| ew[i]).sum();
    let r = 1.0 - fg.iter().map(|&i| ew[i]).sum::<f64>() / fg.len() as f64;
    let p = tpw / (f64::EPSILON + tpw + fpw);
    2.0 * r * p / (f64::EPSILON + r + p)
}
