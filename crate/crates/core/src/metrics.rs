//! Saliency evaluation: PR curves, Fβ, weighted Fβ and MAE.
//!
//! Per-image precision/recall curves are averaged threshold by threshold
//! across a dataset; the max Fβ is taken over that mean curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// β² for the PR-based F-measure.
pub const BETA2: f64 = 0.3;
/// Number of binarization thresholds, `k/255` for `k = 0..=255`.
pub const THRESHOLDS: usize = 256;

/// Gaussian window of the weighted F-measure (7×7, σ = 5).
pub const WF_WINDOW: usize = 7;
pub const WF_SIGMA: f64 = 5.0;
/// Background importance decays as `2 − exp(ln(0.5)/5 · dist)`.
pub const WF_DECAY: f64 = 5.0;
/// MATLAB's `eps`, used by the reference code.
pub const WF_EPS: f64 = 2.220446049250313e-16;

/// A saliency map and its binary ground truth, both H×W row-major.
#[derive(Clone, Copy, Debug)]
pub struct MapPair<'a> {
    pub pred: &'a [f32],
    pub gt: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl<'a> MapPair<'a> {
    pub fn new(pred: &'a [f32], gt: &'a [f32], height: usize, width: usize) -> Result<Self> {
        if pred.len() != height * width || gt.len() != pred.len() {
            return Err(Error::data(format!(
                "prediction ({}) and ground truth ({}) must both hold {height}×{width} values",
                pred.len(),
                gt.len()
            )));
        }
        if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("ground truth must be binary"));
        }
        if pred.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::data("predictions must lie in [0, 1]"));
        }
        Ok(Self { pred, gt, height, width })
    }

    fn positives(&self) -> Result<usize> {
        let n = self.gt.iter().filter(|&&g| g > 0.0).count();
        if n == 0 {
            return Err(Error::data("ground truth has no positive pixel; recall is undefined"));
        }
        Ok(n)
    }
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// `TP/(TP+FP)` (1 when nothing is predicted) and `TP/(TP+FN)`.
fn precision_recall(tp: usize, predicted: usize, positives: usize) -> (f64, f64) {
    let p = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
    (p, tp as f64 / positives as f64)
}

/// Precision and recall at the 256 thresholds `k/255`, binarizing `pred ≥ t`.
pub fn pr_curve(pair: &MapPair<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let positives = pair.positives()?;
    // histogram of the first threshold index each pixel falls below
    let mut hist_all = [0usize; THRESHOLDS + 1];
    let mut hist_pos = [0usize; THRESHOLDS + 1];
    for (&p, &g) in pair.pred.iter().zip(pair.gt) {
        // pixel is predicted positive for every k ≤ kmax
        let kmax = (0..THRESHOLDS).rev().find(|&k| p as f64 >= threshold(k)).map_or(0, |k| k + 1);
        hist_all[kmax] += 1;
        if g > 0.0 {
            hist_pos[kmax] += 1;
        }
    }
    let (mut predicted, mut tp) = (0, 0);
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    for k in (0..THRESHOLDS).rev() {
        predicted += hist_all[k + 1];
        tp += hist_pos[k + 1];
        (precision[k], recall[k]) = precision_recall(tp, predicted, positives);
    }
    Ok((precision, recall))
}

/// `(1+β²)·P·R / (β²·P + R)`, 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// Fβ at the image-adaptive threshold `min(1, 2·mean(pred))`.
pub fn adaptive_f_measure(pair: &MapPair<'_>) -> Result<f64> {
    let positives = pair.positives()?;
    let mean = pair.pred.iter().map(|&p| p as f64).sum::<f64>() / pair.pred.len() as f64;
    let t = (2.0 * mean).min(1.0);
    let (mut tp, mut predicted) = (0, 0);
    for (&p, &g) in pair.pred.iter().zip(pair.gt) {
        if p as f64 >= t {
            predicted += 1;
            if g > 0.0 {
                tp += 1;
            }
        }
    }
    let (p, r) = precision_recall(tp, predicted, positives);
    Ok(f_measure(p, r, BETA2))
}

pub fn mae(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::data(format!("MAE of {} vs {} values", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).abs()).sum::<f64>() / pred.len() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> Vec<f64> {
    let r = (WF_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..WF_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * WF_SIGMA * WF_SIGMA)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Zero-padded "same" correlation with the separable Gaussian window.
fn smooth(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = (WF_WINDOW / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            rows[y * w + xx] = taps
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| {
                    let sx = xx as isize + i as isize - r;
                    (0..w as isize).contains(&sx).then(|| t * x[y * w + sx as usize])
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = taps
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| {
                    let sy = y as isize + i as isize - r;
                    (0..h as isize).contains(&sy).then(|| t * rows[sy as usize * w + xx])
                })
                .sum();
        }
    }
    out
}

/// For every pixel: Euclidean distance to, and index of, the nearest
/// foreground pixel (ties go to the lowest row-major index).
fn nearest_foreground(gt: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg: Vec<(usize, isize, isize)> = (0..h * w).filter(|&i| gt[i] > 0.0).map(|i| (i, (i / w) as isize, (i % w) as isize)).collect();
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0; h * w];
    for i in 0..h * w {
        if gt[i] > 0.0 {
            idx[i] = i;
            continue;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let (mut best, mut best_i) = (isize::MAX, 0);
        for &(j, fy, fx) in &fg {
            let d = (fy - y).pow(2) + (fx - x).pow(2);
            if d < best {
                (best, best_i) = (d, j);
            }
        }
        dist[i] = (best as f64).sqrt();
        idx[i] = best_i;
    }
    (dist, idx)
}

/// Weighted F-measure with dependency-smoothed errors and
/// distance-weighted background importance (β² = 1).
pub fn weighted_f_measure(pair: &MapPair<'_>) -> Result<f64> {
    pair.positives()?;
    let (h, w) = (pair.height, pair.width);
    let fgm: Vec<bool> = pair.gt.iter().map(|&g| g > 0.0).collect();
    let e: Vec<f64> = pair.pred.iter().zip(pair.gt).map(|(&p, &g)| (p as f64 - g as f64).abs()).collect();
    let (dist, nearest) = nearest_foreground(pair.gt, h, w);
    // background pixels inherit the error of their nearest foreground pixel
    let et: Vec<f64> = (0..h * w).map(|i| if fgm[i] { e[i] } else { e[nearest[i]] }).collect();
    let ea = smooth(&et, h, w);
    let (mut fg_err, mut bg_err, mut n_fg) = (0.0, 0.0, 0usize);
    for i in 0..h * w {
        if fgm[i] {
            fg_err += if ea[i] < e[i] { ea[i] } else { e[i] };
            n_fg += 1;
        } else {
            let b = 2.0 - (0.5f64.ln() / WF_DECAY * dist[i]).exp();
            bg_err += e[i] * b;
        }
    }
    let tpw = n_fg as f64 - fg_err;
    let fpw = bg_err;
    let r = 1.0 - fg_err / n_fg as f64;
    let p = tpw / (WF_EPS + tpw + fpw);
    Ok(2.0 * r * p / (WF_EPS + r + p))
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_beta_adaptive: f64,
    pub f_beta_weighted: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(pair: &MapPair<'_>) -> Result<Self> {
        let (precision, recall) = pr_curve(pair)?;
        Ok(Self {
            precision,
            recall,
            f_beta_adaptive: adaptive_f_measure(pair)?,
            f_beta_weighted: weighted_f_measure(pair)?,
            mae: mae(pair.pred, pair.gt)?,
        })
    }
}

/// Dataset-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Max over thresholds of Fβ on the mean PR curve.
    pub f_beta_max: f64,
    pub f_beta_adaptive: f64,
    pub f_beta_weighted: f64,
    pub mae: f64,
    pub images: usize,
}

impl MetricReport {
    /// Average per-image metrics in index order.
    pub fn aggregate(items: &[ImageMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::data("cannot aggregate metrics over zero images"));
        }
        let n = items.len() as f64;
        let mean_curve = |get: fn(&ImageMetrics) -> &[f64]| -> Vec<f64> {
            (0..THRESHOLDS).map(|k| items.iter().map(|m| get(m)[k]).sum::<f64>() / n).collect()
        };
        let precision = mean_curve(|m| &m.precision);
        let recall = mean_curve(|m| &m.recall);
        let f_beta_max = precision.iter().zip(&recall).map(|(&p, &r)| f_measure(p, r, BETA2)).fold(0.0, f64::max);
        let mean = |get: fn(&ImageMetrics) -> f64| items.iter().map(get).sum::<f64>() / n;
        Ok(Self {
            f_beta_max,
            f_beta_adaptive: mean(|m| m.f_beta_adaptive),
            f_beta_weighted: mean(|m| m.f_beta_weighted),
            mae: mean(|m| m.mae),
            precision,
            recall,
            images: items.len(),
        })
    }

    /// `threshold,precision,recall` with a header and 256 data rows.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for k in 0..THRESHOLDS {
            out.push_str(&format!("{:.6},{:.9},{:.9}\n", threshold(k), self.precision[k], self.recall[k]));
        }
        out
    }
}

/// Worker count for evaluation: `PICANET_THREADS` if set, else the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("PICANET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Per-image metrics computed on up to `threads` scoped threads; results
/// come back in input order so the reduction is order-fixed.
pub fn evaluate_pairs(pairs: &[MapPair<'_>], threads: usize) -> Result<Vec<ImageMetrics>> {
    let threads = threads.clamp(1, pairs.len().max(1));
    if threads == 1 {
        return pairs.iter().map(ImageMetrics::compute).collect();
    }
    let chunk = pairs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ImageMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            pairs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(ImageMetrics::compute).collect::<Result<Vec<_>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Predict every sample with `net` (eval mode) and score it against its mask.
pub fn evaluate_model(
    net: &crate::net::SaliencyNet,
    params: &crate::nn::ParamRegistry<f32>,
    samples: &[crate::data::Sample],
    threads: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let refs: Vec<&crate::data::Sample> = samples.iter().collect();
    let (images, masks) = crate::data::collate(&refs)?;
    let preds = net.predict(params, &images, 16)?;
    let (h, w) = samples[0].size();
    let plane = h * w;
    let pairs: Vec<MapPair<'_>> = (0..samples.len())
        .map(|i| MapPair::new(&preds.data()[i * plane..][..plane], &masks.data()[i * plane..][..plane], h, w))
        .collect::<Result<_>>()?;
    MetricReport::aggregate(&evaluate_pairs(&pairs, threads)?)
}
