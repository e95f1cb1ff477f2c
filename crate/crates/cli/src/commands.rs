use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use picanet_core::checkpoint::{self, write_atomic};
use picanet_core::data::{self, DatasetSource, Sample};
use picanet_core::gradcheck;
use picanet_core::metrics::{self, evaluate_pairs, ImageMetrics, MapPair, MetricReport};
use picanet_core::net::{Placement, SaliencyNet};
use picanet_core::nn::ParamRegistry;
use picanet_core::train::Trainer;
use picanet_core::Tensor;
use serde_json::json;

use crate::config::RunConfig;

/// A gradient check that ran but did not pass; exits with status 2.
#[derive(Debug)]
pub struct GradcheckFailed(pub Vec<&'static str>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradcheck failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_params(net: &SaliencyNet, cfg: &RunConfig) -> Result<ParamRegistry<f32>> {
    let path = cfg.checkpoint.as_deref().context("no checkpoint: pass --checkpoint or set `checkpoint`")?;
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let mut params = net.init_params::<f32>(0)?;
    checkpoint::load(&mut params, path)?;
    Ok(params)
}

fn report_summary(r: &MetricReport) -> serde_json::Value {
    json!({
        "f_beta_max": r.f_beta_max,
        "f_beta_adaptive": r.f_beta_adaptive,
        "f_beta_weighted": r.f_beta_weighted,
        "mae": r.mae,
        "images": r.images,
    })
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let source = DatasetSource::parse(cfg.data.as_deref().context("no training data: pass --data or set `data`")?)?;
    let eval_source = cfg.eval_data.as_deref().map(DatasetSource::parse).transpose()?;
    let net = SaliencyNet::new(cfg.network.clone())?;
    let size = net.spec().input_size;
    let samples = source.load(size)?;
    let eval_samples = match eval_source {
        Some(s) => s.load(size)?,
        None => samples.clone(),
    };
    std::fs::create_dir_all(out)?;
    let mut resolved = cfg.clone();
    // where a run is written is not part of what it is
    resolved.command = None;
    resolved.out = None;
    write_json(&out.join("run_config.json"), &serde_json::to_value(&resolved)?)?;

    let tc = cfg.train.clone();
    let mut trainer = Trainer::new(net, tc.clone())?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
    let final_path = out.join("checkpoint.pica");
    if tc.max_steps == 0 {
        log.flush()?;
        checkpoint::save(&trainer.params, &final_path)?;
        println!("max_steps is 0: wrote the initialization to {}", final_path.display());
        return Ok(());
    }
    let per_epoch = samples.len().div_ceil(tc.batch);
    let threads = metrics::eval_threads();
    for _ in 0..tc.max_steps {
        let report = trainer.step_on(&samples)?;
        let done = report.step + 1;
        writeln!(log, "{}", json!({ "step": report.step, "loss": report.loss, "lr": report.lr }))?;
        if done % tc.decay_steps == 0 && done < tc.max_steps {
            checkpoint::save(&trainer.params, &out.join(format!("checkpoint_step{done}.pica")))?;
        }
        if cfg.eval_every_epochs > 0 && done % (per_epoch * cfg.eval_every_epochs) == 0 {
            let r = metrics::evaluate_model(trainer.net(), &trainer.params, &eval_samples, threads)?;
            let mut line = report_summary(&r);
            line["epoch"] = json!(done / per_epoch);
            line["step"] = json!(done);
            writeln!(log, "{line}")?;
            println!("epoch {:>3} step {done:>5} loss {:.4} mae {:.4} fw {:.4}", done / per_epoch, report.loss, r.mae, r.f_beta_weighted);
        }
    }
    log.flush()?;
    checkpoint::save(&trainer.params, &final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

/// Named RGB inputs at their native resolution.
fn load_inputs(spec: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    match DatasetSource::parse(spec)? {
        DatasetSource::Synthetic { seed, n } => {
            Ok(data::synth_range(seed, 0, n, data::SYNTH_SIZE).into_iter().map(|s| (s.name, s.image)).collect())
        }
        DatasetSource::Directory(dir) => {
            let names = data::list_images(&dir)?;
            if names.is_empty() {
                bail!("no `<name>.png` images in {}", dir.display());
            }
            names
                .into_iter()
                .map(|n| {
                    let img = data::read_rgb(&dir.join(format!("{n}.png")))?;
                    Ok((n, img))
                })
                .collect()
        }
    }
}

/// Saliency at the input's own resolution.
fn saliency(net: &SaliencyNet, params: &ParamRegistry<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let s = net.spec().input_size;
    let x = data::resize_bilinear(image, s, s)?.reshape(&[1, 3, s, s])?;
    let p = net.predict(params, &x, 1)?.reshape(&[1, s, s])?;
    Ok(data::resize_bilinear(&p, h, w)?.map(|v| v.clamp(0.0, 1.0)))
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let net = SaliencyNet::new(cfg.network.clone())?;
    let params = load_params(&net, cfg)?;
    let spec = cfg.images.as_deref().or(cfg.data.as_deref()).context("no inputs: pass --data or set `images`")?;
    let inputs = load_inputs(spec)?;
    for (name, image) in &inputs {
        let map = saliency(&net, &params, image)?;
        write_atomic(&out.join(format!("{name}.png")), &data::encode_gray_png(&map)?)?;
    }
    println!("wrote {} saliency maps to {}", inputs.len(), out.display());
    Ok(())
}

/// Stems of ground-truth maps: `<name>_mask.png` when any exist, else `<name>.png`.
fn ground_truth_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let files: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    let masks: Vec<&String> = files.iter().filter(|f| f.ends_with("_mask.png")).collect();
    let mut out: Vec<(String, PathBuf)> = if masks.is_empty() {
        files.iter().filter_map(|f| f.strip_suffix(".png").map(|s| (s.to_string(), dir.join(f)))).collect()
    } else {
        masks.iter().map(|f| (f.trim_end_matches("_mask.png").to_string(), dir.join(f))).collect()
    };
    out.sort();
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let threads = metrics::eval_threads();
    let report = if let Some(pred_dir) = &cfg.predictions {
        let gt_dir = cfg.ground_truth.as_deref().context("`predictions` needs `ground_truth`")?;
        let preds: Vec<String> = data::list_images(pred_dir)?;
        let gts = ground_truth_files(gt_dir)?;
        let pred_set: BTreeSet<&str> = preds.iter().map(String::as_str).collect();
        let gt_set: BTreeSet<&str> = gts.iter().map(|(n, _)| n.as_str()).collect();
        let no_gt: Vec<&str> = pred_set.difference(&gt_set).copied().collect();
        let no_pred: Vec<&str> = gt_set.difference(&pred_set).copied().collect();
        if !no_gt.is_empty() || !no_pred.is_empty() {
            bail!("unmatched files: predictions without ground truth {no_gt:?}, ground truth without predictions {no_pred:?}");
        }
        if preds.is_empty() {
            bail!("no predictions in {}", pred_dir.display());
        }
        let mut maps = Vec::with_capacity(gts.len());
        for (name, gt_path) in &gts {
            let pred = data::read_gray(&pred_dir.join(format!("{name}.png")))?;
            let gt = data::read_mask(gt_path)?;
            if pred.shape() != gt.shape() {
                bail!("`{name}`: prediction {:?} and ground truth {:?} differ in size", pred.shape(), gt.shape());
            }
            maps.push((pred, gt));
        }
        let pairs: Vec<MapPair<'_>> =
            maps.iter().map(|(p, g)| MapPair::new(p.data(), g.data(), g.shape()[1], g.shape()[2])).collect::<picanet_core::Result<_>>()?;
        let items: Vec<ImageMetrics> = evaluate_pairs(&pairs, threads)?;
        MetricReport::aggregate(&items)?
    } else {
        let net = SaliencyNet::new(cfg.network.clone())?;
        let params = load_params(&net, cfg)?;
        let source = DatasetSource::parse(cfg.data.as_deref().context("pass --predictions/--ground-truth, or --checkpoint with --data")?)?;
        let samples: Vec<Sample> = source.load(net.spec().input_size)?;
        metrics::evaluate_model(&net, &params, &samples, threads)?
    };
    write_json(&out.join("report.json"), &report_summary(&report))?;
    write_atomic(&out.join("pr.csv"), report.pr_csv().as_bytes())?;
    println!(
        "images {}  Fβ(max) {:.4}  Fβ(adaptive) {:.4}  Fω {:.4}  MAE {:.4}",
        report.images, report.f_beta_max, report.f_beta_adaptive, report.f_beta_weighted, report.mae
    );
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<&'static str>) -> Result<()> {
    if cfg.gradcheck_seeds == 0 {
        bail!("gradcheck_seeds must be at least 1");
    }
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..cfg.gradcheck_seeds as u64).map(|k| base + k).collect();
    let mut table = format!("{:<24} {:>14}  result\n", "op", "max rel err");
    print!("{table}");
    let rows = gradcheck::run_suite(&seeds, fault, |row| {
        let line = format!("{:<24} {:>14.3e}  {}\n", row.op, row.max_rel_error, if row.passed { "pass" } else { "FAIL" });
        print!("{line}");
        table.push_str(&line);
    })?;
    if let Some(out) = &cfg.out {
        write_atomic(&out.join("gradcheck.txt"), table.as_bytes())?;
    }
    let failed: Vec<&'static str> = rows.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if !failed.is_empty() {
        return Err(GradcheckFailed(failed).into());
    }
    Ok(())
}

/// The attnviz input and, for synthetic inputs, its mask.
fn attnviz_input(spec: &str) -> Result<(String, Tensor<f32>, Option<Tensor<f32>>)> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (seed, index) = rest.split_once(':').context("expected synthetic:<seed>:<index>")?;
        let (seed, index): (u64, usize) = (seed.parse()?, index.parse()?);
        let s = data::synth_range(seed, index, 1, data::SYNTH_SIZE).remove(0);
        return Ok((s.name, s.image, Some(s.mask)));
    }
    let path = Path::new(spec);
    let name = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let mask_path = path.with_file_name(format!("{name}_mask.png"));
    let mask = if mask_path.is_file() { Some(data::read_mask(&mask_path)?) } else { None };
    Ok((name, data::read_rgb(path)?, mask))
}

pub fn attnviz(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (name, image, mask) = attnviz_input(cfg.image.as_deref().context("no image: pass --image or set `image`")?)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if cfg.pixels.is_empty() {
        bail!("no pixels requested: pass --pixel x,y");
    }
    if let Some(&(x, y)) = cfg.pixels.iter().find(|&&(x, y)| x >= w || y >= h) {
        bail!("pixel ({x}, {y}) is outside the {w}×{h} image");
    }
    let net = SaliencyNet::new(cfg.network.clone())?;
    let params = load_params(&net, cfg)?;
    let s = net.spec().input_size;
    let x = data::resize_bilinear(&image, s, s)?.reshape(&[1, 3, s, s])?;
    let fields = net.attention_fields(&params, &x)?;
    if fields.is_empty() {
        bail!("placement `{}` has no attending module", net.spec().placement);
    }
    let mask = mask.map(|m| data::resize_mask(&m, s, s)).transpose()?;
    for (index, placement, field) in &fields {
        let (_, d, fh, fw) = field.weights.dims4()?;
        let (gw, gh) = field.grid;
        let dil = field.dilation;
        let positions = match placement {
            Placement::Global => picanet_core::picanet::attention_positions(fw, fh, field.grid, dil),
            _ => Vec::new(),
        };
        for &(px, py) in &cfg.pixels {
            let (fx, fy) = (px * fw / w, py * fh / h);
            let weights: Vec<f32> = field.pixel(0, fy, fx);
            debug_assert_eq!(weights.len(), d);
            // grid cell (r, c) blown up to a dil×dil block of the footprint
            let peak = weights.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
            let (ih, iw) = (gh * dil, gw * dil);
            let img = Tensor::from_fn(&[1, ih, iw], |i| weights[(i / iw / dil) * gw + (i % iw) / dil] / peak);
            let stem = format!("{name}_d{index}{}_x{px}_y{py}", placement.code());
            write_atomic(&out.join(format!("{stem}.png")), &data::encode_gray_png(&img)?)?;

            // anchor locations in feature-map coordinates
            let anchors: Vec<(isize, isize)> = match placement {
                Placement::Global => positions.clone(),
                _ => (0..gh as isize)
                    .flat_map(|r| (0..gw as isize).map(move |c| (r, c)))
                    .map(|(r, c)| (fy as isize + (r - gh as isize / 2) * dil as isize, fx as isize + (c - gw as isize / 2) * dil as isize))
                    .collect(),
            };
            let background_mass = mask.as_ref().map(|m| {
                let scale = s / fh;
                weights
                    .iter()
                    .zip(&anchors)
                    .filter(|(_, &(r, c))| r >= 0 && c >= 0 && (r as usize) < fh && (c as usize) < fw)
                    .filter(|(_, &(r, c))| m.data()[(r as usize * scale + scale / 2) * s + c as usize * scale + scale / 2] == 0.0)
                    .map(|(&wt, _)| wt as f64)
                    .sum::<f64>()
            });
            let argmax = weights.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
            write_json(
                &out.join(format!("{stem}.json")),
                &json!({
                    "module": index,
                    "placement": placement.code().to_string(),
                    "pixel": [px, py],
                    "feature_pixel": [fx, fy],
                    "feature_size": [fw, fh],
                    "grid": [gw, gh],
                    "dilation": dil,
                    "anchors": anchors,
                    "weights": weights,
                    "sum": weights.iter().map(|&v| v as f64).sum::<f64>(),
                    "argmax": argmax,
                    "foreground_pixel": mask.as_ref().map(|m| m.data()[(py * s / h) * s + px * s / w] > 0.0),
                    "background_mass": background_mass,
                }),
            )?;
        }
    }
    println!("wrote attention maps for {} modules × {} pixels to {}", fields.len(), cfg.pixels.len(), out.display());
    Ok(())
}
