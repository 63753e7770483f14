//! Point annotations to blockwise count maps and classification targets.
//!
//! No smoothing is applied: each head center lands in exactly one block.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::BinPolicy;

/// Points farther than this outside the image are rejected instead of
/// clamped.
pub const CLAMP_TOLERANCE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("image {width}x{height} is smaller than one {r}x{r} block")]
    ImageTooSmall { width: u32, height: u32, r: u32 },
    #[error("reduction factor must be positive")]
    ZeroReduction,
    #[error("point {index} ({x}, {y}) of '{image}' is outside the image beyond clamp tolerance")]
    PointOutOfBounds {
        image: String,
        index: usize,
        x: f64,
        y: f64,
    },
    #[error("image '{0}' has zero width or height")]
    EmptyImage(String),
    #[error("no annotations given")]
    NoAnnotations,
}

/// One record of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    #[serde(rename = "image")]
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub points: Vec<[f64; 2]>,
}

impl PointAnnotation {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Moves slightly out-of-bounds points to the nearest in-bounds pixel.
    /// Returns the indices of clamped points.
    pub fn clamp_points(&mut self) -> Result<Vec<usize>, LabelError> {
        if self.width == 0 || self.height == 0 {
            return Err(LabelError::EmptyImage(self.image_id.clone()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let mut clamped = Vec::new();
        for (index, p) in self.points.iter_mut().enumerate() {
            let [x, y] = *p;
            let far = |v: f64, hi: f64| {
                !v.is_finite() || v < -CLAMP_TOLERANCE || v >= hi + CLAMP_TOLERANCE
            };
            if far(x, w) || far(y, h) {
                return Err(LabelError::PointOutOfBounds {
                    image: self.image_id.clone(),
                    index,
                    x,
                    y,
                });
            }
            let inside = |v: f64, hi: f64| v >= 0.0 && v < hi;
            if !inside(x, w) || !inside(y, h) {
                *p = [x.clamp(0.0, w - 1.0), y.clamp(0.0, h - 1.0)];
                clamped.push(index);
            }
        }
        Ok(clamped)
    }
}

/// Integer head counts per `r x r` block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCountMap {
    pub grid: Array2<u32>,
    pub r: u32,
}

impl BlockCountMap {
    pub fn total(&self) -> u64 {
        self.grid.iter().map(|&c| c as u64).sum()
    }
}

/// Assigns each point to block `(floor(y / r), floor(x / r))`.
///
/// Points in the remainder strip past the last full block are folded into the
/// last row or column so that the grid total equals the number of points.
pub fn rasterize_points(ann: &PointAnnotation, r: u32) -> Result<BlockCountMap, LabelError> {
    rasterize(&ann.points, ann.width, ann.height, r)
}

pub fn rasterize(
    points: &[[f64; 2]],
    width: u32,
    height: u32,
    r: u32,
) -> Result<BlockCountMap, LabelError> {
    if r == 0 {
        return Err(LabelError::ZeroReduction);
    }
    if width < r || height < r {
        return Err(LabelError::ImageTooSmall { width, height, r });
    }
    let (bh, bw) = ((height / r) as usize, (width / r) as usize);
    let mut grid = Array2::<u32>::zeros((bh, bw));
    for &[x, y] in points {
        let col = block_index(x, r, bw);
        let row = block_index(y, r, bh);
        grid[[row, col]] += 1;
    }
    Ok(BlockCountMap { grid, r })
}

fn block_index(coord: f64, r: u32, len: usize) -> usize {
    let b = (coord / r as f64).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(len - 1)
    }
}

/// Classification and count-loss targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub class_indices: Array2<usize>,
    /// `n x h x w` indicator encoding of `class_indices`.
    pub onehot: Array3<f64>,
    pub gt_density: Array2<f64>,
}

impl TargetMaps {
    /// Builds the one-hot tensor from class indices.
    pub fn from_parts(class_indices: Array2<usize>, n: usize, gt_density: Array2<f64>) -> Self {
        let (h, w) = class_indices.dim();
        let mut onehot = Array3::zeros((n, h, w));
        for ((i, j), &k) in class_indices.indexed_iter() {
            onehot[[k, i, j]] = 1.0;
        }
        TargetMaps {
            class_indices,
            onehot,
            gt_density,
        }
    }

    pub fn n(&self) -> usize {
        self.onehot.dim().0
    }
}

/// Quantizes each block count. With `clamp_density` the density target is
/// `min(count, b_terminal)`; otherwise it is the raw count.
pub fn encode_targets(bcm: &BlockCountMap, policy: &BinPolicy, clamp_density: bool) -> TargetMaps {
    let class_indices = bcm.grid.mapv(|c| policy.quantize(c as u64));
    let cap = policy.terminal_representative();
    let gt_density = bcm.grid.mapv(|c| {
        let c = c as f64;
        if clamp_density {
            c.min(cap)
        } else {
            c
        }
    });
    TargetMaps::from_parts(class_indices, policy.len(), gt_density)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStatistics {
    /// Number of blocks falling into each bin.
    pub bin_histogram: Vec<u64>,
    pub total_blocks: u64,
    pub max_block_count: u32,
    /// Fraction of blocks with count `>= m`.
    pub clamped_fraction: f64,
    /// Mean of block counts `>= m`, if any.
    pub terminal_mean: Option<f64>,
}

pub fn dataset_statistics(
    annotations: &[PointAnnotation],
    r: u32,
    policy: &BinPolicy,
) -> Result<DatasetStatistics, LabelError> {
    if annotations.is_empty() {
        return Err(LabelError::NoAnnotations);
    }
    let mut hist = vec![0u64; policy.len()];
    let (mut total, mut max, mut tail_n, mut tail_sum) = (0u64, 0u32, 0u64, 0u64);
    for ann in annotations {
        let bcm = rasterize_points(ann, r)?;
        for &c in bcm.grid.iter() {
            hist[policy.quantize(c as u64)] += 1;
            total += 1;
            max = max.max(c);
            if c as u64 >= policy.m() {
                tail_n += 1;
                tail_sum += c as u64;
            }
        }
    }
    Ok(DatasetStatistics {
        bin_histogram: hist,
        total_blocks: total,
        max_block_count: max,
        clamped_fraction: tail_n as f64 / total as f64,
        terminal_mean: (tail_n > 0).then(|| tail_sum as f64 / tail_n as f64),
    })
}

impl DatasetStatistics {
    /// Applies the terminal mean to a policy (falls back to `m`).
    pub fn calibrate(&self, policy: &BinPolicy) -> BinPolicy {
        match self.terminal_mean {
            Some(mean) => {
                let mut reps = policy.representatives();
                *reps.last_mut().expect("policy has bins") = mean;
                policy
                    .with_representatives(&reps)
                    .expect("mean of counts >= m lies in the open bin")
            }
            None => policy.calibrate_terminal(std::iter::empty()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::{build_bins, Granularity};
    use ndarray::array;

    fn ann(points: Vec<[f64; 2]>, w: u32, h: u32) -> PointAnnotation {
        PointAnnotation {
            image_id: "img".into(),
            width: w,
            height: h,
            points,
        }
    }

    fn fine4() -> BinPolicy {
        build_bins(Granularity::Fine, 4, None).unwrap()
    }

    #[test]
    fn rasterize_basic() {
        let bcm = rasterize_points(&ann(vec![[3.0, 5.0], [10.0, 2.0]], 16, 16), 8).unwrap();
        assert_eq!(bcm.grid, array![[1, 1], [0, 0]]);
        let empty = rasterize_points(&ann(vec![], 40, 24), 8).unwrap();
        assert_eq!(empty.grid, Array2::<u32>::zeros((3, 5)));
    }

    #[test]
    fn edge_and_remainder_points() {
        // x == 8 goes to the higher block; the 4-pixel remainder strip folds
        // into the last column / row
        let bcm = rasterize_points(&ann(vec![[8.0, 0.0], [19.5, 19.5]], 20, 20), 8).unwrap();
        assert_eq!(bcm.grid, array![[0, 1], [0, 1]]);
        assert_eq!(bcm.total(), 2);
    }

    #[test]
    fn too_small() {
        assert_eq!(
            rasterize_points(&ann(vec![], 7, 16), 8).unwrap_err(),
            LabelError::ImageTooSmall {
                width: 7,
                height: 16,
                r: 8
            }
        );
    }

    #[test]
    fn encode_examples() {
        let bcm = BlockCountMap {
            grid: array![[0, 2], [5, 1]],
            r: 8,
        };
        let t = encode_targets(&bcm, &fine4(), false);
        assert_eq!(t.class_indices, array![[0, 2], [4, 1]]);
        assert_eq!(t.gt_density, array![[0.0, 2.0], [5.0, 1.0]]);

        let zero = BlockCountMap {
            grid: array![[0]],
            r: 8,
        };
        let t = encode_targets(&zero, &fine4(), false);
        assert_eq!(t.onehot.slice(ndarray::s![.., 0, 0]).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);

        let dense = BlockCountMap {
            grid: array![[7]],
            r: 8,
        };
        let t = encode_targets(&dense, &fine4(), true);
        assert_eq!(t.gt_density, array![[4.0]]);
    }

    #[test]
    fn statistics_examples() {
        let one = ann(vec![[12.0, 12.0], [13.0, 9.0], [15.0, 15.0]], 16, 16);
        let s = dataset_statistics(&[one], 8, &fine4()).unwrap();
        assert_eq!(s.bin_histogram, vec![3, 0, 0, 1, 0]);
        assert_eq!(s.clamped_fraction, 0.0);
        assert_eq!(s.max_block_count, 3);

        let dense = ann(vec![[1.0, 1.0]; 9], 16, 16);
        let s = dataset_statistics(&[dense], 8, &fine4()).unwrap();
        assert_eq!(s.clamped_fraction, 0.25);
        assert_eq!(s.terminal_mean, Some(9.0));
        assert_eq!(s.calibrate(&fine4()).terminal_representative(), 9.0);

        assert_eq!(
            dataset_statistics(&[], 8, &fine4()).unwrap_err(),
            LabelError::NoAnnotations
        );
    }

    #[test]
    fn clamping() {
        let mut a = ann(vec![[-0.4, 5.0], [3.0, 16.2], [2.0, 2.0]], 16, 16);
        let clamped = a.clamp_points().unwrap();
        assert_eq!(clamped, vec![0, 1]);
        assert_eq!(a.points[0], [0.0, 5.0]);
        assert_eq!(a.points[1], [3.0, 15.0]);
        let mut far = ann(vec![[-3.0, 5.0]], 16, 16);
        assert!(matches!(
            far.clamp_points(),
            Err(LabelError::PointOutOfBounds { index: 0, .. })
        ));
    }
}
