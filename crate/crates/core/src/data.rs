//! Dataset manifests, training augmentation and batch assembly.
//!
//! Layout on disk: `<root>/<split>.jsonl` with one [`PointAnnotation`] per
//! line, image paths relative to `<root>`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::BinPolicy;
use crate::labels::{encode_targets, rasterize, LabelError, PointAnnotation, TargetMaps};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate image path '{0}'")]
    DuplicateImage(String),
    #[error("image {path} does not exist")]
    MissingImage { path: PathBuf },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image {path} is {actual:?} but its record says {declared:?}")]
    DimensionMismatch {
        path: PathBuf,
        actual: (u32, u32),
        declared: (u32, u32),
    },
    #[error("crop size {size} is not divisible by block size {r}")]
    NotDivisible { size: usize, r: usize },
    #[error("batch samples have different sizes")]
    MixedSizes,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub annotation: PointAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn annotation_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{split}.jsonl"))
}

/// Reads and validates `<root>/<split>.jsonl`.
///
/// Slightly out-of-bounds points are clamped; each clamp produces a warning
/// string (also logged).
pub fn load_manifest(root: &Path, split: Split) -> Result<(DatasetManifest, Vec<String>), DataError> {
    let path = annotation_path(root, split);
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ann: PointAnnotation =
            serde_json::from_str(line).map_err(|e| DataError::Malformed {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(ann.image_id.clone()) {
            return Err(DataError::DuplicateImage(ann.image_id));
        }
        for idx in ann.clamp_points()? {
            let msg = format!(
                "{}: point {idx} clamped into the image bounds",
                ann.image_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let image_path = root.join(&ann.image_id);
        if !image_path.exists() {
            return Err(DataError::MissingImage { path: image_path });
        }
        let actual = image::image_dimensions(&image_path).map_err(|e| DataError::Decode {
            path: image_path.clone(),
            message: e.to_string(),
        })?;
        if actual != (ann.width, ann.height) {
            return Err(DataError::DimensionMismatch {
                path: image_path,
                actual,
                declared: (ann.width, ann.height),
            });
        }
        records.push(ManifestRecord {
            image_path,
            annotation: ann,
        });
    }
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            split,
            records,
        },
        warnings,
    ))
}

// ---------------------------------------------------------------------------
// images

/// RGB image as `3 x h x w` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    }))
}

pub fn save_image(image: &Array3<f64>, path: &Path) -> Result<(), DataError> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Index into `0..n` under mirror reflection without edge repetition.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Extends the image at the bottom and right by reflection so that it is at
/// least `min_h x min_w`. The original pixels keep their coordinates.
pub fn reflect_pad(image: &Array3<f64>, min_h: usize, min_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    if (nh, nw) == (h, w) {
        return image.clone();
    }
    Array3::from_shape_fn((c, nh, nw), |(ch, i, j)| {
        image[[ch, reflect_index(i, h), reflect_index(j, w)]]
    })
}

/// Half-pixel-centered bilinear resize.
pub fn resize_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let fm = crate::head::FeatureMap {
        values: image.clone(),
        stride: 1,
    };
    crate::head::interpolate_features(&fm, out_h, out_w, 1)
        .map(|f| f.values)
        .unwrap_or_else(|_| Array3::zeros((c, out_h, out_w)))
}

fn hflip(image: &Array3<f64>) -> Array3<f64> {
    image.slice(s![.., .., ..;-1]).to_owned()
}

/// Mirrors the pixel index and keeps the sub-pixel offset, so a point stays
/// on the mirrored pixel of the flipped image.
pub fn mirror_x(x: f64, width: usize) -> f64 {
    let px = x.floor();
    (width as f64 - 1.0 - px) + (x - px)
}

fn luminance(image: &Array3<f64>) -> Array2<f64> {
    &image.index_axis(Axis(0), 0) * 0.299
        + &image.index_axis(Axis(0), 1) * 0.587
        + &image.index_axis(Axis(0), 2) * 0.114
}

fn adjust_saturation(image: &mut Array3<f64>, factor: f64) {
    let gray = luminance(image);
    for mut plane in image.outer_iter_mut() {
        plane.zip_mut_with(&gray, |v, &g| *v = g + factor * (*v - g));
    }
}

/// Rotates hue by `shift` turns via an HSV round trip.
fn adjust_hue(image: &mut Array3<f64>, shift: f64) {
    let (_, h, w) = image.dim();
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (image[[0, i, j]], image[[1, i, j]], image[[2, i, j]]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            if delta <= 0.0 {
                continue;
            }
            let mut hue = if max == r {
                ((g - b) / delta).rem_euclid(6.0)
            } else if max == g {
                (b - r) / delta + 2.0
            } else {
                (r - g) / delta + 4.0
            } / 6.0;
            hue = (hue + shift).rem_euclid(1.0);
            let sat = delta / max;
            let hh = hue * 6.0;
            let sector = hh.floor();
            let f = hh - sector;
            let p = max * (1.0 - sat);
            let q = max * (1.0 - sat * f);
            let t = max * (1.0 - sat * (1.0 - f));
            let (nr, ng, nb) = match sector as i32 % 6 {
                0 => (max, t, p),
                1 => (q, max, p),
                2 => (p, max, t),
                3 => (p, q, max),
                4 => (t, p, max),
                _ => (max, p, q),
            };
            image[[0, i, j]] = nr;
            image[[1, i, j]] = ng;
            image[[2, i, j]] = nb;
        }
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Array3<f64>, kernel: usize, sigma: f64) -> Array3<f64> {
    if kernel <= 1 {
        return image.clone();
    }
    let half = (kernel / 2) as isize;
    let weights: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (c, h, w) = image.dim();
    let idx = |v: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            0
        } else if v < 0 {
            (-v).min(n - 1) as usize
        } else if v >= n {
            (2 * (n - 1) - v).max(0) as usize
        } else {
            v as usize
        }
    };
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    s += wt * image[[ch, i, idx(j as isize + k as isize - half, w)]];
                }
                tmp[[ch, i, j]] = s;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    s += wt * tmp[[ch, idx(i as isize + k as isize - half, h), j]];
                }
                out[[ch, i, j]] = s;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Output crop side `s`.
    pub base_size: usize,
    /// Range of the zoom-out factor `u`; the crop window is `s*u` pixels.
    pub scale_range: [f64; 2],
    pub hflip_prob: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_kernel: usize,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            base_size: 224,
            scale_range: [1.0, 2.0],
            hflip_prob: 0.5,
            brightness: 0.1,
            saturation: 0.1,
            hue: 0.0,
            blur_kernel: 5,
            blur_prob: 1.0,
            blur_sigma: [0.1, 2.0],
            normalize_mean: [0.485, 0.456, 0.406],
            normalize_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    /// Problems with the config, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.base_size == 0 {
            out.push("base_size must be positive".to_string());
        }
        let [lo, hi] = self.scale_range;
        if !(lo >= 1.0 && hi >= lo) {
            out.push(format!("scale_range [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            out.push(format!("hue {} outside [0, 0.5]", self.hue));
        }
        if self.blur_kernel > 1 && self.blur_kernel % 2 == 0 {
            out.push(format!("blur_kernel {} must be odd", self.blur_kernel));
        }
        if self.normalize_std.iter().any(|&s| !(s > 0.0)) {
            out.push("normalize_std entries must be positive".to_string());
        }
        out
    }
}

/// Per-channel `(x - mean) / std`.
pub fn normalize_image(image: &Array3<f64>, cfg: &AugmentConfig) -> Array3<f64> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (cfg.normalize_mean[c], cfg.normalize_std[c]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Geometry drawn for one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    /// Normalized `3 x s x s` image.
    pub image: Array3<f64>,
    pub points: Vec<[f64; 2]>,
    pub window: CropWindow,
}

/// Random zoom-out crop, resize to `s x s`, flip, color jitter, blur and
/// normalization. Deterministic in `seed`.
pub fn augment_sample(
    image: &Array3<f64>,
    points: &[[f64; 2]],
    cfg: &AugmentConfig,
    seed: u64,
) -> AugmentedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.base_size;
    let [lo, hi] = cfg.scale_range;
    let u = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let crop = ((s as f64 * u).round() as usize).max(s);

    let (_, h, w) = image.dim();
    let padded = reflect_pad(image, crop, crop);
    let (_, ph, pw) = padded.dim();
    let x0 = rng.gen_range(0..=pw - crop);
    let y0 = rng.gen_range(0..=ph - crop);
    let window = padded.slice(s![.., y0..y0 + crop, x0..x0 + crop]).to_owned();
    let mut out = resize_bilinear(&window, s, s);

    let scale = s as f64 / crop as f64;
    let limit = s as f64 * (1.0 - f64::EPSILON);
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .filter(|&&[x, y]| x < w as f64 && y < h as f64)
        .filter_map(|&[x, y]| {
            let (dx, dy) = (x - x0 as f64, y - y0 as f64);
            let inside = |v: f64| v >= 0.0 && v < crop as f64;
            (inside(dx) && inside(dy)).then(|| [(dx * scale).min(limit), (dy * scale).min(limit)])
        })
        .collect();

    let flipped = rng.gen_bool(cfg.hflip_prob);
    if flipped {
        out = hflip(&out);
        for p in &mut pts {
            p[0] = mirror_x(p[0], s);
        }
    }

    let brightness = rng.gen_range((1.0 - cfg.brightness).max(0.0)..=1.0 + cfg.brightness);
    let saturation = rng.gen_range((1.0 - cfg.saturation).max(0.0)..=1.0 + cfg.saturation);
    let hue = if cfg.hue > 0.0 {
        rng.gen_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    out.mapv_inplace(|v| v * brightness);
    adjust_saturation(&mut out, saturation);
    if hue != 0.0 {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        adjust_hue(&mut out, hue);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let blur = rng.gen_bool(cfg.blur_prob);
    let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
    if blur {
        out = gaussian_blur(&out, cfg.blur_kernel, sigma);
    }

    AugmentedSample {
        image: normalize_image(&out, cfg),
        points: pts,
        window: CropWindow {
            x0,
            y0,
            size: crop,
            flipped,
        },
    }
}

// ---------------------------------------------------------------------------
// batches

/// Turns point lists into training targets.
pub trait TargetEncoder: Send + Sync {
    fn n_bins(&self) -> usize;
    fn representatives(&self) -> Vec<f64>;
    fn encode(&self, points: &[[f64; 2]], width: u32, height: u32, r: u32) -> Result<TargetMaps, LabelError>;
}

/// Integer-bin targets from exact block counts.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerTargets {
    pub policy: BinPolicy,
    pub clamp_density: bool,
}

impl TargetEncoder for IntegerTargets {
    fn n_bins(&self) -> usize {
        self.policy.len()
    }

    fn representatives(&self) -> Vec<f64> {
        self.policy.representatives()
    }

    fn encode(&self, points: &[[f64; 2]], width: u32, height: u32, r: u32) -> Result<TargetMaps, LabelError> {
        let bcm = rasterize(points, width, height, r)?;
        Ok(encode_targets(&bcm, &self.policy, self.clamp_density))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `b x 3 x s x s`
    pub images: Array4<f64>,
    /// `b x h x w`
    pub class_indices: ndarray::Array3<usize>,
    /// `b x n x h x w`
    pub onehot: Array4<f64>,
    /// `b x h x w`
    pub gt_density: Array3<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Array3<f64> {
        self.images.index_axis(Axis(0), i).to_owned()
    }

    pub fn targets(&self, i: usize) -> TargetMaps {
        TargetMaps {
            class_indices: self.class_indices.index_axis(Axis(0), i).to_owned(),
            onehot: self.onehot.index_axis(Axis(0), i).to_owned(),
            gt_density: self.gt_density.index_axis(Axis(0), i).to_owned(),
        }
    }
}

pub fn make_batch(
    samples: &[AugmentedSample],
    r: usize,
    policy: &BinPolicy,
    clamp_density: bool,
) -> Result<Batch, DataError> {
    let enc = IntegerTargets {
        policy: policy.clone(),
        clamp_density,
    };
    make_batch_with(samples, r, &enc)
}

pub fn make_batch_with(
    samples: &[AugmentedSample],
    r: usize,
    encoder: &dyn TargetEncoder,
) -> Result<Batch, DataError> {
    let first = samples.first().ok_or(DataError::EmptyBatch)?;
    let (_, s, sw) = first.image.dim();
    if s != sw || samples.iter().any(|x| x.image.dim() != first.image.dim()) {
        return Err(DataError::MixedSizes);
    }
    if r == 0 || s % r != 0 {
        return Err(DataError::NotDivisible { size: s, r });
    }
    let targets: Vec<TargetMaps> = samples
        .par_iter()
        .map(|x| encoder.encode(&x.points, s as u32, s as u32, r as u32))
        .collect::<Result<_, _>>()?;
    let b = samples.len();
    let (g, n) = (s / r, encoder.n_bins());
    let mut batch = Batch {
        images: Array4::zeros((b, 3, s, s)),
        class_indices: ndarray::Array3::zeros((b, g, g)),
        onehot: Array4::zeros((b, n, g, g)),
        gt_density: Array3::zeros((b, g, g)),
    };
    for (i, (x, t)) in samples.iter().zip(&targets).enumerate() {
        batch.images.index_axis_mut(Axis(0), i).assign(&x.image);
        batch.class_indices.index_axis_mut(Axis(0), i).assign(&t.class_indices);
        batch.onehot.index_axis_mut(Axis(0), i).assign(&t.onehot);
        batch.gt_density.index_axis_mut(Axis(0), i).assign(&t.gt_density);
    }
    Ok(batch)
}

/// Decoded image plus its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: Array3<f64>,
    pub points: Vec<[f64; 2]>,
}

/// Decodes every image of a manifest in parallel, preserving order.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<LoadedSample>, DataError> {
    manifest
        .records
        .par_iter()
        .map(|rec| {
            Ok(LoadedSample {
                id: rec.annotation.image_id.clone(),
                image: load_image(&rec.image_path)?,
                points: rec.annotation.points.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::{build_bins, Granularity};

    fn plain_cfg(s: usize) -> AugmentConfig {
        AugmentConfig {
            base_size: s,
            scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            brightness: 0.0,
            saturation: 0.0,
            blur_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, i, j)| ((c * 7 + i * 3 + j) % 11) as f64 / 10.0)
    }

    #[test]
    fn identity_geometry() {
        let img = ramp(16, 16);
        let pts = vec![[3.5, 4.25], [15.9, 0.0]];
        let out = augment_sample(&img, &pts, &plain_cfg(16), 1);
        assert_eq!(out.points, pts);
        assert_eq!(out.image, normalize_image(&img, &plain_cfg(16)));
    }

    #[test]
    fn flip_mirrors_points_and_pixels() {
        assert_eq!(mirror_x(3.0, 16), 12.0);
        assert_eq!(mirror_x(0.0, 16), 15.0);
        assert_eq!(mirror_x(15.5, 16), 0.5);
        let img = ramp(8, 8);
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..plain_cfg(8)
        };
        let out = augment_sample(&img, &[[2.0, 5.0]], &cfg, 3);
        assert_eq!(out.points, vec![[5.0, 5.0]]);
        let raw = normalize_image(&img, &cfg);
        assert_eq!(out.image[[1, 5, 5]], raw[[1, 5, 2]]);
    }

    #[test]
    fn deterministic_in_seed() {
        let img = ramp(40, 50);
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 2.3, i as f64 * 1.9]).collect();
        let cfg = AugmentConfig {
            base_size: 32,
            ..AugmentConfig::default()
        };
        let a = augment_sample(&img, &pts, &cfg, 42);
        let b = augment_sample(&img, &pts, &cfg, 42);
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| p[0] >= 0.0 && p[0] < 32.0 && p[1] >= 0.0 && p[1] < 32.0));
    }

    #[test]
    fn reflect_padding_keeps_origin() {
        let img = ramp(5, 4);
        let p = reflect_pad(&img, 9, 7);
        assert_eq!(p.dim(), (3, 9, 7));
        assert_eq!(p.slice(s![.., ..5, ..4]), img);
        // row 5 mirrors row 3, column 4 mirrors column 2
        assert_eq!(p[[0, 5, 0]], img[[0, 3, 0]]);
        assert_eq!(p[[2, 0, 4]], img[[2, 0, 2]]);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Array3::from_elem((3, 6, 7), 0.4);
        let out = gaussian_blur(&img, 5, 1.3);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn hue_shift_by_full_turn_is_identity() {
        let mut img = ramp(4, 4);
        let orig = img.clone();
        adjust_hue(&mut img, 1.0);
        assert!((&img - &orig).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn batch_examples() {
        let policy = build_bins(Granularity::Fine, 4, None).unwrap();
        let empty: Vec<AugmentedSample> = (0..8)
            .map(|i| augment_sample(&ramp(16, 16), &[], &plain_cfg(16), i))
            .collect();
        let b = make_batch(&empty, 8, &policy, false).unwrap();
        assert!(b.class_indices.iter().all(|&k| k == 0));
        assert_eq!(b.onehot.dim(), (8, 5, 2, 2));

        let one = vec![augment_sample(&ramp(16, 16), &[[9.0, 2.0]], &plain_cfg(16), 0)];
        let b = make_batch(&one, 8, &policy, false).unwrap();
        assert_eq!(b.gt_density.sum(), 1.0);

        assert!(matches!(
            make_batch(&one, 7, &policy, false),
            Err(DataError::NotDivisible { size: 16, r: 7 })
        ));
        assert!(matches!(make_batch(&[], 8, &policy, false), Err(DataError::EmptyBatch)));
    }
}
