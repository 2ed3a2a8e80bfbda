//! Multi-view datasets: a procedural silhouette generator, an image-directory
//! loader and class-stratified splitting.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::supernet::ViewBatch;
use crate::tensor::Tensor;

/// One shape: `n_views` single-channel images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub shape_id: String,
    pub label: usize,
    /// `[N_v, C, H, W]`.
    pub views: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<MultiViewSample>,
    pub n_views: usize,
    pub channels: usize,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_views: self.n_views,
            channels: self.channels,
            resolution: self.resolution,
        }
    }

    /// Stacks the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ViewBatch> {
        let per = self.n_views * self.channels * self.resolution * self.resolution;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Index(format!("sample {i} out of {}", self.len())))?;
            data.extend_from_slice(s.views.data());
            labels.push(s.label);
        }
        let images = Tensor::new(
            vec![
                indices.len(),
                self.n_views,
                self.channels,
                self.resolution,
                self.resolution,
            ],
            data,
        )?;
        ViewBatch::new(images, labels)
    }

    /// Index lists of consecutive batches, shuffled when `rng` is given.
    pub fn batch_indices<R: Rng>(&self, batch_size: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Silhouette families, one per class.
pub const SHAPE_FAMILIES: [&str; 8] = [
    "ellipse",
    "rectangle",
    "cross",
    "ring",
    "triangle",
    "l_shape",
    "bar",
    "dot_grid",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            train_per_class: 30,
            test_per_class: 10,
            n_views: 4,
            resolution: 16,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > SHAPE_FAMILIES.len() {
            return Err(config_err!(
                "num_classes must lie in [2, {}], got {}",
                SHAPE_FAMILIES.len(),
                self.num_classes
            ));
        }
        if self.resolution < 8 {
            return Err(config_err!("resolution must be at least 8, got {}", self.resolution));
        }
        if self.n_views < 2 {
            return Err(config_err!("n_views must be at least 2, got {}", self.n_views));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise must be a non-negative number, got {}", self.noise));
        }
        Ok(())
    }
}

/// Per-shape latent parameters.
#[derive(Clone, Copy, Debug)]
struct Latent {
    size: f64,
    aspect: f64,
    thickness: f64,
    fill: f64,
    angle: f64,
    offset: (f64, f64),
}

impl Latent {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        Latent {
            size: rng.gen_range(0.55..0.85),
            aspect: rng.gen_range(0.55..0.9),
            thickness: rng.gen_range(0.22..0.35),
            fill: rng.gen_range(0.6..1.0),
            angle: rng.gen_range(0.0..2.0 * PI),
            offset: (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        }
    }
}

/// Whether local point `(u, v)` (unit scale) lies inside the silhouette.
fn inside(family: usize, l: &Latent, u: f64, v: f64) -> bool {
    let t = l.thickness;
    match family {
        0 => (u * u) + (v / l.aspect).powi(2) <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85 * l.aspect,
        2 => (u.abs() <= t && v.abs() <= 1.0) || (v.abs() <= t && u.abs() <= 1.0),
        3 => {
            let r = (u * u + v * v).sqrt();
            r <= 1.0 && r >= 1.0 - 1.3 * t
        }
        4 => {
            // Equilateral triangle with circumradius 1, apex up.
            let edge = |a: f64| {
                let (nx, ny) = (a.cos(), a.sin());
                u * nx + v * ny <= 0.5
            };
            edge(-PI / 2.0) && edge(PI / 6.0) && edge(5.0 * PI / 6.0)
        }
        5 => {
            let w = 2.0 * t;
            (u >= -0.9 && u <= -0.9 + w && v.abs() <= 0.9) || (v >= -0.9 && v <= -0.9 + w && u.abs() <= 0.9)
        }
        6 => u.abs() <= 1.0 && v.abs() <= 0.6 * t,
        _ => {
            let cell = |x: f64| {
                let c = (x / 0.66).round().clamp(-1.0, 1.0) * 0.66;
                x - c
            };
            let (du, dv) = (cell(u), cell(v));
            u.abs() <= 1.0 && v.abs() <= 1.0 && du * du + dv * dv <= (0.7 * t).powi(2)
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders one view: the silhouette rotated by `angle` about its centre.
fn render(family: usize, l: &Latent, angle: f64, res: usize, out: &mut [f64]) {
    let half = res as f64 / 2.0;
    let scale = l.size * half;
    let (s, c) = angle.sin_cos();
    let cx = half + l.offset.0;
    let cy = half + l.offset.1;
    let sub = SUPERSAMPLE as f64;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / sub - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / sub - cy;
                    // Rotate the sample point into the shape frame.
                    let u = (c * px + s * py) / scale;
                    let v = (-s * px + c * py) / scale;
                    if inside(family, l, u, v) {
                        hits += 1;
                    }
                }
            }
            out[y * res + x] = l.fill * hits as f64 / (sub * sub);
        }
    }
}

fn synth_split<R: Rng>(cfg: &SynthConfig, per_class: usize, prefix: &str, rng: &mut R) -> Vec<MultiViewSample> {
    let res = cfg.resolution;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut samples = Vec::with_capacity(cfg.num_classes * per_class);
    for label in 0..cfg.num_classes {
        for i in 0..per_class {
            let latent = Latent::sample(rng);
            let mut data = vec![0.0; cfg.n_views * res * res];
            for (v, plane) in data.chunks_mut(res * res).enumerate() {
                let angle = latent.angle + 2.0 * PI * v as f64 / cfg.n_views as f64;
                render(label, &latent, angle, res, plane);
                if cfg.noise > 0.0 {
                    for p in plane.iter_mut() {
                        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
                    }
                }
            }
            samples.push(MultiViewSample {
                shape_id: format!("{prefix}{label}_{i:04}"),
                label,
                views: Tensor::new(vec![cfg.n_views, 1, res, res], data).expect("sized buffer"),
            });
        }
    }
    samples
}

/// Generates `(train, test)` silhouette datasets; deterministic in `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = SHAPE_FAMILIES[..cfg.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let make = |samples| Dataset {
        class_names: names.clone(),
        samples,
        n_views: cfg.n_views,
        channels: 1,
        resolution: cfg.resolution,
    };
    let train = synth_split(cfg, cfg.train_per_class, "train", &mut rng);
    let test = synth_split(cfg, cfg.test_per_class, "test", &mut rng);
    Ok((make(train), make(test)))
}

/// Class-stratified disjoint split: `round(fraction * n_c)` samples of every
/// class go to the second (validation) part.
pub fn split_train_val(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err!("split fraction must lie in [0, 1], got {fraction}"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(config_err!(
                "class '{}' has a single sample and cannot be split",
                data.class_names[class]
            ));
        }
        idx.shuffle(&mut rng);
        let n_val = (fraction * idx.len() as f64).round() as usize;
        let (v, t) = idx.split_at(n_val);
        val.extend_from_slice(v);
        train.extend_from_slice(t);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn read_gray(path: &Path, resolution: Option<usize>) -> Result<(usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
        ),
    })?;
    let mut gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    if w != h {
        let side = w.min(h);
        gray = image::imageops::crop_imm(&gray, (w - side) / 2, (h - side) / 2, side, side).to_image();
    }
    if let Some(r) = resolution {
        if gray.width() as usize != r {
            gray = image::imageops::resize(&gray, r as u32, r as u32, image::imageops::FilterType::Triangle);
        }
    }
    let side = gray.width() as usize;
    Ok((side, gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect()))
}

/// Loads `root/<class>/<shape_id>_<view>.<png|ppm|pgm>`. Images are converted
/// to grayscale, centre-cropped to a square and, when `resolution` is given,
/// resized to it.
pub fn load_directory(root: &Path, resolution: Option<usize>) -> Result<Dataset> {
    let read_dir = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(p, e));
    let mut classes: Vec<_> = read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Validation(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut n_views: Option<usize> = None;
    let mut side: Option<usize> = None;
    for (label, dir) in classes.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut shapes: BTreeMap<String, BTreeMap<usize, std::path::PathBuf>> = BTreeMap::new();
        for entry in read_dir(dir)?.filter_map(|e| e.ok()) {
            let path = entry.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some((id, view)) = stem.rsplit_once('_') else {
                return Err(Error::Validation(format!(
                    "{}: file name is not <shape_id>_<view>",
                    path.display()
                )));
            };
            let view: usize = view
                .parse()
                .map_err(|_| Error::Validation(format!("{}: view index '{view}' is not a number", path.display())))?;
            shapes.entry(id.to_string()).or_default().insert(view, path);
        }
        for (id, views) in shapes {
            let expected = *n_views.get_or_insert_with(|| views.keys().max().map_or(0, |m| m + 1));
            let complete = views.len() == expected && views.keys().copied().eq(0..expected);
            if !complete {
                return Err(Error::Validation(format!(
                    "shape '{id}' has views {:?}, expected 0..{expected}",
                    views.keys().collect::<Vec<_>>()
                )));
            }
            let mut data = Vec::new();
            for path in views.values() {
                let (s, pixels) = read_gray(path, resolution)?;
                if *side.get_or_insert(s) != s {
                    return Err(Error::Validation(format!(
                        "{}: image size {s} differs from {}; pass a resolution to resize",
                        path.display(),
                        side.unwrap_or(s)
                    )));
                }
                data.extend(pixels);
            }
            let s = side.unwrap_or(0);
            samples.push(MultiViewSample {
                shape_id: id,
                label,
                views: Tensor::new(vec![expected, 1, s, s], data)?,
            });
        }
    }
    let n_views = n_views.unwrap_or(0);
    if samples.is_empty() || n_views == 0 {
        return Err(Error::Validation(format!("no images found under {}", root.display())));
    }
    Ok(Dataset {
        class_names,
        samples,
        n_views,
        channels: 1,
        resolution: side.unwrap_or(0),
    })
}

/// Writes the dataset as 8-bit grayscale PNGs in the layout read by
/// [`load_directory`].
pub fn save_directory(data: &Dataset, root: &Path) -> Result<()> {
    let res = data.resolution;
    for s in &data.samples {
        let dir = root.join(&data.class_names[s.label]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (v, plane) in s.views.data().chunks(data.channels * res * res).enumerate() {
            let pixels: Vec<u8> = plane[..res * res]
                .iter()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let img = image::GrayImage::from_raw(res as u32, res as u32, pixels).expect("sized buffer");
            let path = dir.join(format!("{}_{v}.png", s.shape_id));
            img.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::io(&path, std::io::Error::other(other.to_string())),
            })?;
        }
    }
    Ok(())
}
