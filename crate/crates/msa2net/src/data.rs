//! Synthetic datasets and on-disk dataset handling.
//!
//! Generated datasets are ellipse/blob scenes whose per-class area
//! proportions are drawn from configured ranges, so presets can pin the
//! fingerprint a dataset will produce (small-object vs large-object). Layout
//! on disk: `root/images/*.png`, `root/masks/*.png` (same stem, 8-bit
//! grayscale label masks) and `root/manifest.json`.

use crate::rng::Rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("png error at {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("missing mask for image stem '{0}'")]
    MissingMask(String),
    #[error("image {stem} is {iw}x{ih} but mask is {mw}x{mh}")]
    DimensionMismatch {
        stem: String,
        iw: usize,
        ih: usize,
        mw: usize,
        mh: usize,
    },
    #[error("mask {stem} has label {label}, valid range is 0..{num_classes}")]
    LabelOutOfRange {
        stem: String,
        label: u8,
        num_classes: usize,
    },
    #[error("could not place class {class} within its area range after {attempts} attempts")]
    InfeasiblePacking { class: usize, attempts: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── synthetic generation ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Blob,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPolicy {
    /// Shapes must not overlap; samples are retried until they pack.
    Disjoint,
    /// Later classes may paint over earlier ones.
    Layered,
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Target area-proportion range per foreground class (num_classes − 1).
    pub class_areas: Vec<[f64; 2]>,
    pub shapes: ShapeKind,
    pub overlap: OverlapPolicy,
    /// Amplitude of the uniform pixel noise in the rendered images.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec("need at least one foreground class".into()));
        }
        if self.class_areas.len() != self.num_classes - 1 {
            return Err(DataError::InvalidSpec(format!(
                "class_areas has {} entries for {} foreground classes",
                self.class_areas.len(),
                self.num_classes - 1
            )));
        }
        let mut max_sum = 0.0;
        for &[lo, hi] in &self.class_areas {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return Err(DataError::InvalidSpec(format!(
                    "class area range [{}, {}] outside (0, 1)",
                    lo, hi
                )));
            }
            max_sum += hi;
        }
        if max_sum > 1.0 {
            return Err(DataError::InvalidSpec("sum of max areas exceeds 1".into()));
        }
        Ok(())
    }
}

struct ShapeParams {
    cy: f64,
    cx: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    // radial harmonics for blobs; zero for ellipses
    amp: [f64; 2],
    phase: [f64; 2],
}

impl ShapeParams {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let rr = (u * u + v * v).sqrt();
        if rr <= 1e-12 {
            return true;
        }
        let phi = v.atan2(u);
        let bound = 1.0
            + self.amp[0] * (2.0 * phi + self.phase[0]).sin()
            + self.amp[1] * (3.0 * phi + self.phase[1]).sin();
        rr <= bound
    }
}

/// Rasterize one class onto `mask`; honours the overlap policy.
/// Returns the achieved pixel count, or None when disjoint placement failed.
fn paint_shape(
    mask: &mut [u8],
    size: usize,
    shape: &ShapeParams,
    class: u8,
    policy: OverlapPolicy,
) -> Option<usize> {
    let y0 = ((shape.cy - shape.rx.max(shape.ry) * 1.5).floor().max(0.0)) as usize;
    let y1 = ((shape.cy + shape.rx.max(shape.ry) * 1.5).ceil().min(size as f64)) as usize;
    let x0 = ((shape.cx - shape.rx.max(shape.ry) * 1.5).floor().max(0.0)) as usize;
    let x1 = ((shape.cx + shape.rx.max(shape.ry) * 1.5).ceil().min(size as f64)) as usize;
    let mut hits = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                if policy == OverlapPolicy::Disjoint && mask[y * size + x] != 0 {
                    return None;
                }
                hits.push(y * size + x);
            }
        }
    }
    for &i in &hits {
        mask[i] = class;
    }
    Some(hits.len())
}

/// One generated sample, before encoding to disk.
pub struct SyntheticSample {
    pub mask: Vec<u8>,
    /// Interleaved RGB, 8-bit.
    pub image: Vec<u8>,
}

/// Generate a single sample deterministically from the spec and its index.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<SyntheticSample, DataError> {
    let size = spec.image_size;
    let mut rng = Rng::new(spec.seed).derive(0x5A17 + index);
    let max_attempts = 400;

    'sample: for _ in 0..max_attempts {
        let mut mask = vec![0u8; size * size];
        for (ci, &[lo, hi]) in spec.class_areas.iter().enumerate() {
            let class = (ci + 1) as u8;
            let mut placed = false;
            for _ in 0..max_attempts {
                let target = rng.uniform(lo, hi) * (size * size) as f64;
                let aspect = rng.uniform(0.6, 1.6);
                let blob = match spec.shapes {
                    ShapeKind::Ellipse => false,
                    ShapeKind::Blob => true,
                    ShapeKind::Mixed => rng.next_f64() < 0.5,
                };
                let (amp, phase) = if blob {
                    (
                        [rng.uniform(0.05, 0.18), rng.uniform(0.03, 0.12)],
                        [rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(0.0, std::f64::consts::TAU)],
                    )
                } else {
                    ([0.0, 0.0], [0.0, 0.0])
                };
                let r0 = (target / std::f64::consts::PI).sqrt();
                let rx = r0 * aspect.sqrt();
                let ry = r0 / aspect.sqrt();
                let margin = rx.max(ry) * 1.25 + 1.0;
                if 2.0 * margin >= size as f64 {
                    continue; // shape cannot fit; redraw
                }
                let shape = ShapeParams {
                    cy: rng.uniform(margin, size as f64 - margin),
                    cx: rng.uniform(margin, size as f64 - margin),
                    rx,
                    ry,
                    angle: rng.uniform(0.0, std::f64::consts::PI),
                    amp,
                    phase,
                };
                let mut trial = mask.clone();
                if let Some(count) = paint_shape(&mut trial, size, &shape, class, spec.overlap) {
                    let achieved = count as f64 / (size * size) as f64;
                    if achieved >= lo && achieved <= hi {
                        mask = trial;
                        placed = true;
                        break;
                    }
                }
            }
            if !placed {
                continue 'sample;
            }
        }
        // layered painting can shrink earlier classes below range: re-measure
        if spec.overlap == OverlapPolicy::Layered {
            let total = (size * size) as f64;
            for (ci, &[lo, hi]) in spec.class_areas.iter().enumerate() {
                let count = mask.iter().filter(|&&v| v == (ci + 1) as u8).count();
                let p = count as f64 / total;
                if p < lo || p > hi {
                    continue 'sample;
                }
            }
        }
        let image = render_image(&mask, size, spec.num_classes, spec.noise, &mut rng);
        return Ok(SyntheticSample { mask, image });
    }
    Err(DataError::InfeasiblePacking {
        class: 0,
        attempts: max_attempts,
    })
}

/// Shaded rendering with per-pixel noise so the network has texture to learn.
fn render_image(mask: &[u8], size: usize, num_classes: usize, noise: f64, rng: &mut Rng) -> Vec<u8> {
    let mut img = vec![0u8; size * size * 3];
    let levels: Vec<f64> = (0..num_classes)
        .map(|c| {
            if c == 0 {
                0.12
            } else {
                0.30 + 0.60 * (c as f64 - 1.0) / (num_classes as f64 - 1.0).max(1.0)
            }
        })
        .collect();
    let tint = [
        rng.uniform(-0.03, 0.03),
        rng.uniform(-0.03, 0.03),
        rng.uniform(-0.03, 0.03),
    ];
    for (p, &label) in mask.iter().enumerate() {
        let base = levels[label as usize];
        for ch in 0..3 {
            let v = base + tint[ch] + rng.uniform(-noise, noise);
            img[p * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

// ── manifest and IO ──────────────────────────────────────────────────

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn all_stems(&self) -> Vec<String> {
        let mut v = self.splits.train.clone();
        v.extend(self.splits.val.iter().cloned());
        v.extend(self.splits.test.iter().cloned());
        v
    }
}

/// A loaded image/mask pair. Image is [3, H, W] with values in [0, 1].
#[derive(Clone, Debug)]
pub struct Sample {
    pub stem: String,
    pub image: Tensor,
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), DataError> {
    let (file, root) = if path.is_dir() {
        (path.join("manifest.json"), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    if manifest.num_classes < 2 {
        return Err(DataError::InvalidManifest("num_classes must be >= 2".into()));
    }
    Ok((manifest, root))
}

pub fn write_gray_png(path: &Path, data: &[u8], width: usize, height: usize) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer.write_image_data(data).map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_rgb_png(path: &Path, data: &[u8], width: usize, height: usize) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer.write_image_data(data).map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Read a PNG as (channels, width, height); grayscale gives 1 channel.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(DataError::Png {
                path: path.to_path_buf(),
                message: format!("unsupported color type {:?}", other),
            })
        }
    };
    buf.truncate(info.width as usize * info.height as usize * channels);
    Ok((buf, channels, info.width as usize, info.height as usize))
}

/// Generate `n` samples to `root` and write a manifest (all samples in the
/// train split; use [`split_manifest`] to partition). Deterministic: the same
/// (spec, seed, n) produces byte-identical files.
pub fn generate(spec: &SyntheticSpec, n: usize, root: &Path) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;

    let samples: Result<Vec<(String, SyntheticSample)>, DataError> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(spec, i)?;
            Ok((format!("sample_{:05}", i), sample))
        })
        .collect();
    let samples = samples?;
    for (stem, sample) in &samples {
        write_rgb_png(
            &images.join(format!("{}.png", stem)),
            &sample.image,
            spec.image_size,
            spec.image_size,
        )?;
        write_gray_png(
            &masks.join(format!("{}.png", stem)),
            &sample.mask,
            spec.image_size,
            spec.image_size,
        )?;
    }
    let manifest = DatasetManifest {
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    format!("class_{}", c)
                }
            })
            .collect(),
        splits: Splits {
            train: samples.iter().map(|(s, _)| s.clone()).collect(),
            val: vec![],
            test: vec![],
        },
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Load one image/mask pair by stem, validating labels and dimensions.
pub fn load_pair(root: &Path, stem: &str, num_classes: usize) -> Result<Sample, DataError> {
    let img_path = root.join("images").join(format!("{}.png", stem));
    let mask_path = root.join("masks").join(format!("{}.png", stem));
    if !mask_path.exists() {
        return Err(DataError::MissingMask(stem.to_string()));
    }
    let (img, ic, iw, ih) = read_png(&img_path)?;
    let (mask_raw, mc, mw, mh) = read_png(&mask_path)?;
    if iw != mw || ih != mh {
        return Err(DataError::DimensionMismatch {
            stem: stem.to_string(),
            iw,
            ih,
            mw,
            mh,
        });
    }
    let mask: Vec<u8> = if mc == 1 {
        mask_raw
    } else {
        mask_raw.chunks(mc).map(|px| px[0]).collect()
    };
    for &v in &mask {
        if v as usize >= num_classes {
            return Err(DataError::LabelOutOfRange {
                stem: stem.to_string(),
                label: v,
                num_classes,
            });
        }
    }
    // image as [3, H, W] in [0, 1]; grayscale is replicated
    let plane = iw * ih;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let v = match ic {
                1 => img[p],
                _ => img[p * ic + ch.min(ic - 1)],
            };
            data[ch * plane + p] = v as f64 / 255.0;
        }
    }
    Ok(Sample {
        stem: stem.to_string(),
        image: Tensor::from_vec(&[3, ih, iw], data),
        mask,
        height: ih,
        width: iw,
    })
}

/// Load every sample of one split ("train" | "val" | "test").
pub fn load_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: &str,
) -> Result<Vec<Sample>, DataError> {
    let stems = match split {
        "train" => &manifest.splits.train,
        "val" => &manifest.splits.val,
        "test" => &manifest.splits.test,
        other => {
            return Err(DataError::InvalidManifest(format!(
                "unknown split '{}'",
                other
            )))
        }
    };
    stems
        .par_iter()
        .map(|stem| load_pair(root, stem, manifest.num_classes))
        .collect()
}

/// Deterministically partition stems into train/val/test.
/// Partitions are disjoint and exhaustive.
pub fn split_stems(mut stems: Vec<String>, ratios: (f64, f64, f64), seed: u64) -> Splits {
    let n = stems.len();
    let mut rng = Rng::new(seed).derive(0x5117);
    rng.shuffle(&mut stems);
    let n_train = ((n as f64) * ratios.0).round() as usize;
    let n_val = (((n as f64) * ratios.1).round() as usize).min(n.saturating_sub(n_train));
    let n_train = n_train.min(n);
    let mut it = stems.into_iter();
    let train: Vec<String> = it.by_ref().take(n_train).collect();
    let val: Vec<String> = it.by_ref().take(n_val).collect();
    let test: Vec<String> = it.collect();
    Splits { train, val, test }
}
