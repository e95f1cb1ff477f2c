//! Image/mask pairs: the synthetic generator, directory ingestion, PNG I/O
//! and training-time augmentation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Masks are binarized at this value after any resampling.
pub const MASK_THRESHOLD: f32 = 0.5;

/// One training or test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stem used for output file names.
    pub name: String,
    /// 3×S×S in [0, 1].
    pub image: Tensor<f32>,
    /// 1×S×S with values in {0, 1}.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let name = name.into();
        let (ic, ih, iw) = dims3(&image)?;
        let (mc, mh, mw) = dims3(&mask)?;
        if ic != 3 || mc != 1 || (ih, iw) != (mh, mw) {
            return Err(Error::data(format!(
                "sample `{name}`: image {:?} and mask {:?} must be 3×H×W and 1×H×W",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("sample `{name}`: mask is not binary")));
        }
        Ok(Self { name, image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}

fn dims3<T: crate::tensor::Float>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::data(format!("expected a C×H×W tensor, got shape {s:?}"))),
    }
}

/// Bilinear resampling of a C×H×W tensor (pixel-centre aligned, edges clamped).
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(t)?;
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let taps = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Resize a binary mask bilinearly and re-binarize it.
pub fn resize_mask(mask: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    Ok(resize_bilinear(mask, out_h, out_w)?.map(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }))
}

fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (c, _, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let plane = t.shape()[1] * w;
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let start = ch * plane + (top + y) * w + left;
            out.extend_from_slice(&t.data()[start..start + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out).expect("crop shape")
}

/// Augmentation geometry: resize to `resize`, flip, crop `crop`×`crop`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    pub resize: usize,
    pub crop: usize,
}

impl AugmentSpec {
    /// 64×64 crops from 72×72 resizes.
    pub fn toy() -> Self {
        Self { resize: 72, crop: 64 }
    }

    /// Same 8/9 crop ratio for any input size.
    pub fn for_size(size: usize) -> Self {
        Self { resize: size * 9 / 8, crop: size }
    }
}

/// The random choices made by one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
}

impl AugmentDraw {
    pub fn sample(rng: &mut impl Rng, spec: AugmentSpec) -> Self {
        let slack = spec.resize - spec.crop;
        Self { flip: rng.random_bool(0.5), top: rng.random_range(0..=slack), left: rng.random_range(0..=slack) }
    }
}

/// Apply a fixed draw to a sample; image and mask get identical geometry.
pub fn augment_with(sample: &Sample, spec: AugmentSpec, draw: AugmentDraw) -> Result<Sample> {
    if spec.crop > spec.resize || draw.top + spec.crop > spec.resize || draw.left + spec.crop > spec.resize {
        return Err(Error::config(format!("crop {draw:?} of {} does not fit in {}", spec.crop, spec.resize)));
    }
    let mut image = resize_bilinear(&sample.image, spec.resize, spec.resize)?;
    let mut mask = resize_mask(&sample.mask, spec.resize, spec.resize)?;
    if draw.flip {
        image = flip_horizontal(&image);
        mask = flip_horizontal(&mask);
    }
    Sample::new(sample.name.clone(), crop(&image, draw.top, draw.left, spec.crop), crop(&mask, draw.top, draw.left, spec.crop))
}

/// Resize, random horizontal flip, random crop.
pub fn augment(sample: &Sample, spec: AugmentSpec, rng: &mut impl Rng) -> Result<Sample> {
    let draw = AugmentDraw::sample(rng, spec);
    augment_with(sample, spec, draw)
}

/// Side length of generated samples.
pub const SYNTH_SIZE: usize = 64;
/// Accepted range of the foreground area fraction.
pub const SYNTH_AREA: (f64, f64) = (0.05, 0.5);

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = rng.random_range(0.2..0.8) * size;
        let cy = rng.random_range(0.2..0.8) * size;
        let r = rng.random_range(0.12..0.3) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cx, cy, rx: r, ry: r * rng.random_range(0.5..1.0), angle: rng.random_range(0.0..std::f64::consts::PI) }
        } else {
            // convex polygon from sorted angles on a circle
            let k = rng.random_range(3..=7);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            Shape::Polygon(angles.iter().map(|a| (cx + r * a.cos(), cy + r * a.sin())).collect())
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // inside a counter-clockwise convex polygon: left of every edge
                (0..pts.len()).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % pts.len()];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

fn synth_one(seed: u64, index: u64, size: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;
    loop {
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        let grad_dir = rng.random_range(0.0..std::f64::consts::TAU);
        let grad_amp = rng.random_range(0.0..0.15);
        let shapes: Vec<Shape> = (0..rng.random_range(1..=2)).map(|_| Shape::random(&mut rng, s)).collect();
        // foreground colour pushed away from the background in every channel
        let fg: [f64; 3] = std::array::from_fn(|c| {
            let shift = rng.random_range(0.45..0.6);
            if base[c] < 0.5 {
                (base[c] + shift).min(1.0)
            } else {
                (base[c] - shift).max(0.0)
            }
        });
        let mut mask = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if shapes.iter().any(|sh| sh.contains(px, py)) {
                    mask[y * size + x] = 1.0;
                }
            }
        }
        let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / (size * size) as f64;
        if !(SYNTH_AREA.0..=SYNTH_AREA.1).contains(&frac) {
            continue;
        }
        let (gx, gy) = (grad_dir.cos(), grad_dir.sin());
        let mut image = vec![0.0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let ramp = grad_amp * ((x as f64 / s - 0.5) * gx + (y as f64 / s - 0.5) * gy);
                for c in 0..3 {
                    let noise = rng.random_range(-0.05..0.05);
                    let v = if mask[i] > 0.0 { fg[c] + noise } else { base[c] + ramp + noise };
                    image[c * size * size + i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        return Sample::new(
            format!("synth_{seed}_{index:05}"),
            Tensor::from_vec(&[3, size, size], image).expect("image shape"),
            Tensor::from_vec(&[1, size, size], mask).expect("mask shape"),
        )
        .expect("generated sample is valid");
    }
}

/// `n` synthetic samples of 64×64; sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(seed: u64, n: usize) -> Vec<Sample> {
    synth_range(seed, 0, n, SYNTH_SIZE)
}

/// Samples `start..start + n` of the synthetic stream for `seed`.
pub fn synth_range(seed: u64, start: usize, n: usize, size: usize) -> Vec<Sample> {
    (start..start + n).map(|i| synth_one(seed, i as u64, size)).collect()
}

/// Euclidean RGB distance between mean foreground and mean background colour.
pub fn foreground_contrast(sample: &Sample) -> f64 {
    let plane = sample.mask.len();
    let mask = sample.mask.data();
    let fg_n = mask.iter().filter(|&&m| m > 0.0).count().max(1) as f64;
    let bg_n = mask.iter().filter(|&&m| m == 0.0).count().max(1) as f64;
    (0..3)
        .map(|c| {
            let ch = &sample.image.data()[c * plane..][..plane];
            let (mut fg, mut bg) = (0.0, 0.0);
            for (&v, &m) in ch.iter().zip(mask) {
                if m > 0.0 {
                    fg += v as f64
                } else {
                    bg += v as f64
                }
            }
            (fg / fg_n - bg / bg_n).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Where samples come from: a `synthetic:<seed>:<n>` stream or a directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic { seed: u64, n: usize },
    Directory(PathBuf),
}

impl DatasetSource {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            let (seed, n) =
                rest.split_once(':').ok_or_else(|| Error::config(format!("`{spec}` is not of the form synthetic:<seed>:<n>")))?;
            let seed = seed.parse().map_err(|_| Error::config(format!("bad synthetic seed in `{spec}`")))?;
            let n: usize = n.parse().map_err(|_| Error::config(format!("bad synthetic count in `{spec}`")))?;
            if n == 0 {
                return Err(Error::config("a synthetic dataset needs at least one sample"));
            }
            return Ok(DatasetSource::Synthetic { seed, n });
        }
        let path = PathBuf::from(spec);
        if !path.is_dir() {
            return Err(Error::config(format!("dataset directory `{spec}` does not exist")));
        }
        Ok(DatasetSource::Directory(path))
    }

    /// Load every sample, resized to `size`×`size`.
    pub fn load(&self, size: usize) -> Result<Vec<Sample>> {
        match self {
            DatasetSource::Synthetic { seed, n } => Ok(synth_range(*seed, 0, *n, size)),
            DatasetSource::Directory(dir) => load_directory(dir)?.into_iter().map(|s| resize_sample(&s, size)).collect(),
        }
    }
}

pub fn resize_sample(s: &Sample, size: usize) -> Result<Sample> {
    Sample::new(s.name.clone(), resize_bilinear(&s.image, size, size)?, resize_mask(&s.mask, size, size)?)
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

/// 8-bit RGB PNG as a 3×H×W tensor in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// 8-bit grayscale PNG thresholded at 128 into a 1×H×W binary tensor.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// 8-bit grayscale PNG as a 1×H×W tensor in [0, 1] (no thresholding).
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_vec(&[1, h, w], img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
}

/// Encode a 1×H×W map in [0, 1] as 8-bit grayscale PNG bytes, `round(255·p)`.
pub fn encode_gray_png(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = dims3(map)?;
    if c != 1 {
        return Err(Error::data(format!("grayscale export needs one channel, got {c}")));
    }
    let pixels: Vec<u8> = map.data().iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer size");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: PathBuf::from("<memory>"), message: e.to_string() })?;
    Ok(bytes)
}

/// Encode a 3×H×W image in [0, 1] as 8-bit RGB PNG bytes.
pub fn encode_rgb_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = dims3(image)?;
    if c != 3 {
        return Err(Error::data(format!("RGB export needs three channels, got {c}")));
    }
    let plane = h * w;
    let pixels: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (ch, i)))
        .map(|(ch, i)| (255.0 * image.data()[ch * plane + i].clamp(0.0, 1.0)).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels).expect("buffer size");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: PathBuf::from("<memory>"), message: e.to_string() })?;
    Ok(bytes)
}

/// Image stems in `dir`: every `<name>.png` that is not itself a mask.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|f| f.strip_suffix(".png").map(str::to_string))
        .filter(|stem| !stem.ends_with("_mask"))
        .collect();
    names.sort();
    Ok(names)
}

/// Pairs `<name>.png` with `<name>_mask.png`; any unpaired file is an error
/// listing every offender.
pub fn load_directory(dir: &Path) -> Result<Vec<Sample>> {
    let names = list_images(dir)?;
    let missing: Vec<String> = names.iter().filter(|n| !dir.join(format!("{n}_mask.png")).is_file()).cloned().collect();
    let mut orphans: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|f| f.strip_suffix("_mask.png").map(str::to_string))
        .filter(|stem| !dir.join(format!("{stem}.png")).is_file())
        .collect();
    orphans.sort();
    if !missing.is_empty() || !orphans.is_empty() {
        return Err(Error::data(format!(
            "unpaired files in {}: images without masks {missing:?}, masks without images {orphans:?}",
            dir.display()
        )));
    }
    if names.is_empty() {
        return Err(Error::data(format!("no `<name>.png` images in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let image = read_rgb(&dir.join(format!("{n}.png")))?;
            let mask = read_mask(&dir.join(format!("{n}_mask.png")))?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(Error::data(format!("`{n}`: image and mask sizes differ")));
            }
            Sample::new(n, image, mask)
        })
        .collect()
}

/// Stack samples into N×3×S×S images and N×1×S×S masks.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
