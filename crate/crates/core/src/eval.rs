//! Counting metrics, full-image tiled inference, density-map files and the
//! ablation harness.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::Granularity;
use crate::config::{BinMode, ConfigError, ExperimentConfig};
use crate::data::{normalize_image, reflect_pad, AugmentConfig, LoadedSample, TargetEncoder};
use crate::labels::{LabelError, TargetMaps};
use crate::maps::DensityMap;
use crate::model::{EbcModel, HeadKind};
use crate::prompts::PromptSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one image")]
    Empty,
    #[error("invalid tiling: {0}")]
    Tile(String),
    #[error("model: {0}")]
    Model(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// metrics

/// `(mae, rmse)` over `(gt, pred)` pairs, summed in the given order.
pub fn metrics(pairs: &[(f64, f64)]) -> Result<(f64, f64), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pairs.len() as f64;
    let (abs, sq) = pairs.iter().fold((0.0, 0.0), |(a, s), &(gt, pred)| {
        let e = gt - pred;
        (a + e.abs(), s + e * e)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Sorted by image id.
    pub per_image: Vec<ImageResult>,
    pub mae: f64,
    pub rmse: f64,
}

impl EvalResult {
    pub fn from_images(mut per_image: Vec<ImageResult>) -> Result<Self, EvalError> {
        per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let pairs: Vec<(f64, f64)> = per_image.iter().map(|r| (r.gt_count, r.pred_count)).collect();
        let (mae, rmse) = metrics(&pairs)?;
        Ok(EvalResult { per_image, mae, rmse })
    }

    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }

    /// Per-image CSV: `image_id, gt_count, pred_count`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Csv(e.to_string()))?;
        for row in &self.per_image {
            w.serialize(row).map_err(|e| EvalError::Csv(e.to_string()))?;
        }
        w.flush().map_err(io_err(path))
    }
}

// ---------------------------------------------------------------------------
// tiled inference

/// Anything that maps a normalized image to a block density map.
pub trait DensityModel: Sync {
    fn reduction(&self) -> usize;
    /// Density of shape `(h / r, w / r)` for an `h x w` image.
    fn predict(&self, image: &Array3<f64>) -> Result<Array2<f64>, EvalError>;
}

impl DensityModel for EbcModel {
    fn reduction(&self) -> usize {
        EbcModel::reduction(self)
    }

    fn predict(&self, image: &Array3<f64>) -> Result<Array2<f64>, EvalError> {
        self.forward(image)
            .map(|out| out.density.0)
            .map_err(|e| EvalError::Model(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub window: usize,
    /// Pixels shared by neighbouring tiles; predictions are averaged there.
    pub overlap: usize,
}

impl TileConfig {
    pub fn new(window: usize) -> Self {
        TileConfig { window, overlap: 0 }
    }

    fn check(&self, r: usize) -> Result<(), EvalError> {
        if r == 0 || self.window == 0 || self.window % r != 0 {
            return Err(EvalError::Tile(format!(
                "window {} is not a positive multiple of r = {r}",
                self.window
            )));
        }
        if self.overlap % r != 0 || self.overlap >= self.window {
            return Err(EvalError::Tile(format!(
                "overlap {} must be a multiple of r below the window",
                self.overlap
            )));
        }
        Ok(())
    }

    /// Tile origins along an axis of length `n`, and the padded length.
    fn origins(&self, n: usize) -> (Vec<usize>, usize) {
        let step = self.window - self.overlap;
        let tiles = if n <= self.window {
            1
        } else {
            (n - self.window).div_ceil(step) + 1
        };
        let origins: Vec<usize> = (0..tiles).map(|t| t * step).collect();
        let padded = origins.last().copied().unwrap_or(0) + self.window;
        (origins, padded)
    }
}

/// Reflect-pads the image to whole tiles, predicts every tile and stitches
/// the tile densities, then crops back to `(h / r, w / r)` blocks.
pub fn tiled_inference(
    image: &Array3<f64>,
    model: &dyn DensityModel,
    tile: &TileConfig,
) -> Result<(f64, DensityMap), EvalError> {
    let r = model.reduction();
    tile.check(r)?;
    let (_, h, w) = image.dim();
    if h < r || w < r {
        return Err(EvalError::Tile(format!("image {h}x{w} is smaller than one block")));
    }
    let (rows, ph) = tile.origins(h);
    let (cols, pw) = tile.origins(w);
    let padded = reflect_pad(image, ph, pw);
    let g = tile.window / r;
    let mut sum = Array2::<f64>::zeros((ph / r, pw / r));
    let mut hits = Array2::<f64>::zeros((ph / r, pw / r));
    for &y in &rows {
        for &x in &cols {
            let crop = padded.slice(s![.., y..y + tile.window, x..x + tile.window]).to_owned();
            let d = model.predict(&crop)?;
            if d.dim() != (g, g) {
                return Err(EvalError::Model(format!(
                    "tile density is {:?}, expected {:?}",
                    d.dim(),
                    (g, g)
                )));
            }
            let (by, bx) = (y / r, x / r);
            sum.slice_mut(s![by..by + g, bx..bx + g]).zip_mut_with(&d, |a, &v| *a += v);
            hits.slice_mut(s![by..by + g, bx..bx + g]).mapv_inplace(|c| c + 1.0);
        }
    }
    let stitched = if tile.overlap == 0 { sum } else { sum / hits };
    let cropped = stitched.slice(s![..h / r, ..w / r]).to_owned();
    let count = cropped.sum();
    Ok((count, DensityMap(cropped)))
}

/// Evaluates a model on already decoded samples, in parallel across images.
pub fn evaluate_samples(
    model: &dyn DensityModel,
    samples: &[LoadedSample],
    tile: &TileConfig,
    augment: &AugmentConfig,
) -> Result<EvalResult, EvalError> {
    let per_image = samples
        .par_iter()
        .map(|s| {
            let image = normalize_image(&s.image, augment);
            let (pred, _) = tiled_inference(&image, model, tile)?;
            Ok(ImageResult {
                image_id: s.id.clone(),
                gt_count: s.points.len() as f64,
                pred_count: pred,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalResult::from_images(per_image)
}

// ---------------------------------------------------------------------------
// density files

/// Header `H W r`, then one line per row of space-separated values.
pub fn write_density_file(path: &Path, density: &DensityMap, r: usize) -> Result<(), EvalError> {
    let (h, w) = density.shape();
    let mut out = format!("{h} {w} {r}\n");
    for row in density.values().rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_density_file(path: &Path) -> Result<(DensityMap, usize), EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, message: String| EvalError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(io_err(path))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(1, format!("bad header token '{t}'"))))
        .collect::<Result<_, _>>()?;
    let [h, w, r] = dims[..] else {
        return Err(parse_err(1, "header must be 'H W r'".into()));
    };
    let mut values = Vec::with_capacity(h * w);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(i + 2, format!("bad value '{t}'"))))
            .collect::<Result<_, _>>()?;
        if row.len() != w {
            return Err(parse_err(i + 2, format!("expected {w} values, found {}", row.len())));
        }
        values.extend(row);
    }
    let grid = Array2::from_shape_vec((values.len() / w.max(1), w), values)
        .map_err(|e| parse_err(0, e.to_string()))?;
    if grid.nrows() != h {
        return Err(parse_err(0, format!("expected {h} rows, found {}", grid.nrows())));
    }
    Ok((DensityMap(grid), r))
}

/// Grayscale rendering scaled so the largest block is white.
pub fn render_density_png(path: &Path, density: &DensityMap, scale: u32) -> Result<(), EvalError> {
    let (h, w) = density.shape();
    let max = density.values().iter().cloned().fold(0.0, f64::max);
    let scale = scale.max(1);
    let img = image::GrayImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = density.values()[[(y / scale) as usize, (x / scale) as usize]];
        let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
        image::Luma([level as u8])
    });
    img.save(path).map_err(|e| EvalError::Model(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// continuous-interval baseline

/// Bordering real-valued intervals over Gaussian-smoothed block densities.
/// Bin `k` is `[edges[k], edges[k+1])`; the last bin is open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbcConfig {
    pub edges: Vec<f64>,
    /// Smoothing kernel width in pixels.
    pub sigma: f64,
}

impl Default for SbcConfig {
    fn default() -> Self {
        SbcConfig {
            edges: vec![0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            sigma: 4.0,
        }
    }
}

impl SbcConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.edges.len() < 2 || self.edges[0] != 0.0 {
            return Err("sbc edges need at least two entries starting at 0".into());
        }
        if self.edges.windows(2).any(|p| !(p[1] > p[0]) || !p[1].is_finite()) {
            return Err("sbc edges must be finite and strictly increasing".into());
        }
        if !(self.sigma > 0.0) {
            return Err(format!("sbc sigma {} must be positive", self.sigma));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len()
    }

    pub fn quantize(&self, value: f64) -> usize {
        self.edges.partition_point(|&e| e <= value).max(1) - 1
    }

    /// Zero for the first interval, midpoints inside, lower edge for the tail.
    pub fn representatives(&self) -> Vec<f64> {
        let n = self.edges.len();
        (0..n)
            .map(|k| match k {
                0 => 0.0,
                k if k == n - 1 => self.edges[k],
                k => 0.5 * (self.edges[k] + self.edges[k + 1]),
            })
            .collect()
    }

    pub fn prompts(&self) -> PromptSet {
        let n = self.edges.len();
        PromptSet::from_prompts(
            (0..n)
                .map(|k| {
                    if k == n - 1 {
                        format!("There are more than {} people", self.edges[k])
                    } else {
                        format!("There are between {} and {} people", self.edges[k], self.edges[k + 1])
                    }
                })
                .collect(),
        )
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("sbc config serializes");
        format!("sbc-{}", hex::encode(&Sha256::digest(&json)[..8]))
    }
}

/// Mass of each `r x r` block after smoothing every point with an isotropic
/// Gaussian. The last row and column extend to the image edge.
pub fn smoothed_block_density(points: &[[f64; 2]], width: u32, height: u32, r: u32, sigma: f64) -> Array2<f64> {
    let (bh, bw) = ((height / r) as usize, (width / r) as usize);
    let mut grid = Array2::zeros((bh, bw));
    let bounds = |k: usize, len: usize, extent: u32| -> (f64, f64) {
        let lo = (k as u32 * r) as f64;
        let hi = if k + 1 == len { extent as f64 } else { ((k as u32 + 1) * r) as f64 };
        (lo, hi)
    };
    let mass = |lo: f64, hi: f64, p: f64| {
        let z = sigma * std::f64::consts::SQRT_2;
        0.5 * (libm::erf((hi - p) / z) - libm::erf((lo - p) / z))
    };
    let reach = 6.0 * sigma;
    for &[x, y] in points {
        let row_mass: Vec<(usize, f64)> = (0..bh)
            .filter_map(|i| {
                let (lo, hi) = bounds(i, bh, height);
                (hi >= y - reach && lo <= y + reach).then(|| (i, mass(lo, hi, y)))
            })
            .collect();
        let col_mass: Vec<(usize, f64)> = (0..bw)
            .filter_map(|j| {
                let (lo, hi) = bounds(j, bw, width);
                (hi >= x - reach && lo <= x + reach).then(|| (j, mass(lo, hi, x)))
            })
            .collect();
        for &(i, my) in &row_mass {
            for &(j, mx) in &col_mass {
                grid[[i, j]] += my * mx;
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbcTargets {
    pub cfg: SbcConfig,
}

impl TargetEncoder for SbcTargets {
    fn n_bins(&self) -> usize {
        self.cfg.n_bins()
    }

    fn representatives(&self) -> Vec<f64> {
        self.cfg.representatives()
    }

    fn encode(&self, points: &[[f64; 2]], width: u32, height: u32, r: u32) -> Result<TargetMaps, LabelError> {
        if r == 0 {
            return Err(LabelError::ZeroReduction);
        }
        if width < r || height < r {
            return Err(LabelError::ImageTooSmall { width, height, r });
        }
        let density = smoothed_block_density(points, width, height, r, self.cfg.sigma);
        let classes = density.mapv(|v| self.cfg.quantize(v));
        Ok(TargetMaps::from_parts(classes, self.cfg.n_bins(), density))
    }
}

// ---------------------------------------------------------------------------
// ablation harness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    pub granularity: Granularity,
    pub m: u64,
    pub lambda: f64,
    pub r: usize,
    pub head: HeadKind,
    pub bin_mode: BinMode,
    pub mae: f64,
    pub rmse: f64,
    pub n_images: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cartesian axes; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub granularity: Vec<Granularity>,
    pub m: Vec<u64>,
    pub lambda: Vec<f64>,
    pub r: Vec<usize>,
    pub head: Vec<HeadKind>,
    pub bin_mode: Vec<BinMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    /// `key.path=value` overrides applied to the base config.
    #[serde(default)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    /// Path of a base experiment config, relative to the grid file.
    pub base_config: Option<PathBuf>,
    /// Inline base config, used when `base_config` is absent.
    pub base: ExperimentConfig,
    /// Global overrides applied to the base before expansion.
    pub set: Vec<String>,
    /// Named cell list; `table1` is the enhancement-strategy ladder.
    pub preset: Option<String>,
    pub axes: Option<GridAxes>,
    pub cells: Vec<CellSpec>,
}

/// Bin threshold standing in for "no noise threshold" in the ladder.
pub const TABLE1_OPEN_M: u64 = 16;
pub const TABLE1_LAMBDAS: [f64; 4] = [0.01, 0.1, 1.0, 2.0];

/// Baseline, integer bins, noise threshold, then the count-loss weights.
pub fn table1_cells() -> Vec<CellSpec> {
    let cell = |label: &str, set: &[String]| CellSpec {
        label: label.to_string(),
        set: set.to_vec(),
    };
    let mut cells = vec![
        cell("sbc", &["bins.mode=continuous".into(), "loss.lambda=0".into()]),
        cell(
            "e1",
            &["bins.mode=integer".into(), format!("bins.m={TABLE1_OPEN_M}"), "loss.lambda=0".into()],
        ),
        cell("e1+e2", &["bins.mode=integer".into(), "bins.m=4".into(), "loss.lambda=0".into()]),
    ];
    for l in TABLE1_LAMBDAS {
        cells.push(cell(
            &format!("e1+e2+e3 lambda={l}"),
            &["bins.mode=integer".into(), "bins.m=4".into(), format!("loss.lambda={l}")],
        ));
    }
    cells
}

impl AblationGrid {
    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut grid: AblationGrid =
            serde_json::from_str(&text).map_err(|e| EvalError::Config(ConfigError::Parse(e.to_string())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        match &grid.base_config {
            Some(rel) => grid.base = ExperimentConfig::from_file(&dir.join(rel))?,
            None if grid.base.data.root.is_relative() => grid.base.data.root = dir.join(&grid.base.data.root),
            None => {}
        }
        Ok(grid)
    }

    /// Expands preset, axes and explicit cells; cells with identical configs
    /// are kept once.
    pub fn expand(&self) -> Result<Vec<AblationCell>, EvalError> {
        let mut base = self.base.clone();
        base.apply_overrides(&self.set)?;
        let mut specs: Vec<CellSpec> = match self.preset.as_deref() {
            None => Vec::new(),
            Some("table1") => table1_cells(),
            Some(other) => {
                return Err(EvalError::Config(ConfigError::Parse(format!("unknown preset '{other}'"))));
            }
        };
        if let Some(axes) = &self.axes {
            specs.extend(axes_cells(axes));
        }
        specs.extend(self.cells.iter().cloned());
        if specs.is_empty() {
            specs.push(CellSpec {
                label: "base".into(),
                set: Vec::new(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for spec in specs {
            let mut config = base.clone();
            config.apply_overrides(&spec.set)?;
            if seen.insert(config.hash()) {
                out.push(AblationCell {
                    label: spec.label,
                    config,
                });
            } else {
                log::warn!("cell '{}' duplicates an earlier cell and is skipped", spec.label);
            }
        }
        Ok(out)
    }
}

fn axes_cells(axes: &GridAxes) -> Vec<CellSpec> {
    fn axis<T: Serialize>(key: &str, values: &[T]) -> Vec<Option<String>> {
        if values.is_empty() {
            return vec![None];
        }
        values
            .iter()
            .map(|v| Some(format!("{key}={}", serde_json::to_string(v).expect("axis value"))))
            .collect()
    }
    let lists = [
        axis("bins.granularity", &axes.granularity),
        axis("bins.m", &axes.m),
        axis("loss.lambda", &axes.lambda),
        axis("model.r", &axes.r),
        axis("model.head", &axes.head),
        axis("bins.mode", &axes.bin_mode),
    ];
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for list in &lists {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                list.iter().map(move |v| {
                    let mut c = c.clone();
                    c.extend(v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|set| CellSpec {
            label: if set.is_empty() { "base".into() } else { set.join(" ") },
            set,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub label: String,
    pub config_hash: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    /// All rows in the CSV, ascending by config hash.
    pub rows: Vec<AblationRow>,
    /// Labels of cells run in this invocation.
    pub ran: Vec<String>,
    /// Labels of cells found in an existing CSV.
    pub skipped: Vec<String>,
    pub failures: Vec<CellFailure>,
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Csv(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| EvalError::Csv(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), EvalError> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| EvalError::Csv(e.to_string()))?;
        for row in rows {
            w.serialize(row).map_err(|e| EvalError::Csv(e.to_string()))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs every cell not already present in `csv_path` and rewrites the CSV
/// after each one. Rows are kept sorted by config hash, so resumed runs
/// never duplicate a hash. A failing cell is reported and the grid goes on.
pub fn run_ablation(
    cells: &[AblationCell],
    csv_path: &Path,
    runner: &mut dyn FnMut(&AblationCell) -> Result<EvalResult, String>,
) -> Result<AblationReport, EvalError> {
    let mut rows: BTreeMap<String, AblationRow> = if csv_path.exists() {
        read_ablation_csv(csv_path)?
            .into_iter()
            .map(|r| (r.config_hash.clone(), r))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut report = AblationReport::default();
    for cell in cells {
        let hash = cell.config.hash();
        if rows.contains_key(&hash) {
            report.skipped.push(cell.label.clone());
            continue;
        }
        log::info!("ablation cell '{}' ({})", cell.label, &hash[..12]);
        let start = Instant::now();
        match runner(cell) {
            Ok(res) => {
                let c = &cell.config;
                rows.insert(
                    hash.clone(),
                    AblationRow {
                        config_hash: hash,
                        granularity: c.bins.granularity,
                        m: c.bins.m,
                        lambda: c.loss.lambda,
                        r: c.model.r,
                        head: c.model.head,
                        bin_mode: c.bins.mode,
                        mae: res.mae,
                        rmse: res.rmse,
                        n_images: res.n_images(),
                        wall_seconds: start.elapsed().as_secs_f64(),
                    },
                );
                let sorted: Vec<AblationRow> = rows.values().cloned().collect();
                write_ablation_csv(csv_path, &sorted)?;
                report.ran.push(cell.label.clone());
            }
            Err(error) => {
                log::error!("ablation cell '{}' failed: {error}", cell.label);
                report.failures.push(CellFailure {
                    label: cell.label.clone(),
                    config_hash: hash,
                    error,
                });
            }
        }
    }
    if !csv_path.exists() {
        write_ablation_csv(csv_path, &[])?;
    }
    report.rows = rows.into_values().collect();
    Ok(report)
}

/// Appends a line of text to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<(), EvalError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}
