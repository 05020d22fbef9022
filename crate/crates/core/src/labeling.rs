//! Self-supervised traversability-cost labels from pose and IMU streams.
//!
//! The driven path is binned into coarse ground cells; each visited cell
//! receives a cost combining RMS acceleration magnitude, distance-weighted
//! angular rate and RMS spatial jerk. The sparse cell costs are spread onto
//! a fine grid by a compactly supported kernel and finally min-max
//! normalized across a whole dataset.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::grid::{DenseCostmap, GridSpec};
use crate::sim::{ImuSample, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Lower bound on the distance between consecutive samples, meters.
    pub epsilon: f64,
    /// Interpolation kernel support radius, meters.
    pub kernel_radius: f64,
    pub coarse_res: f64,
    pub fine_res: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            epsilon: 1e-3,
            kernel_radius: 1.0,
            coarse_res: 0.2,
            fine_res: 0.05,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w1,
            self.w2,
            self.w3,
            self.epsilon,
            self.kernel_radius,
            self.coarse_res,
            self.fine_res,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            arg("labeling parameters must all be positive and finite")
        }
    }
}

/// One time-aligned pose/IMU pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSample {
    pub position: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Samples that fell into one grid cell, in trajectory order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    pub row: usize,
    pub col: usize,
    pub samples: Vec<CellSample>,
}

/// Index of the IMU sample nearest in time to `t`; `imu` must be sorted.
fn nearest_imu(imu: &[ImuSample], t: f64) -> usize {
    let after = imu.partition_point(|s| s.t < t);
    match after {
        0 => 0,
        n if n == imu.len() => n - 1,
        n => {
            if (imu[n].t - t).abs() < (t - imu[n - 1].t).abs() {
                n
            } else {
                n - 1
            }
        }
    }
}

/// Pairs every pose with its nearest IMU sample and groups the pairs by the
/// grid cell containing the pose.
///
/// Cells appear in order of first visit. An IMU sample may be at most half
/// the local pose interval away from its pose.
pub fn bin_trajectory(
    poses: &[Pose],
    imu: &[ImuSample],
    grid: &GridSpec,
) -> Result<Vec<CellSamples>> {
    grid.validate()?;
    if poses.is_empty() {
        return arg("no poses to bin");
    }
    if imu.is_empty() {
        return arg("no IMU samples to associate");
    }
    if imu.windows(2).any(|w| w[1].t < w[0].t) {
        return arg("IMU samples must be sorted by time");
    }
    let mut order: Vec<CellSamples> = Vec::new();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, pose) in poses.iter().enumerate() {
        let (row, col) = grid
            .locate(pose.position.x, pose.position.y)
            .ok_or_else(|| {
                Error::Range(format!(
                    "pose {i} at ({}, {}) lies outside the label grid",
                    pose.position.x, pose.position.y
                ))
            })?;
        let dt = [
            i.checked_sub(1).map(|j| pose.t - poses[j].t),
            poses.get(i + 1).map(|p| p.t - pose.t),
        ]
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
        let k = nearest_imu(imu, pose.t);
        if (imu[k].t - pose.t).abs() > dt / 2.0 + 1e-12 {
            return arg(format!(
                "pose {i} has no IMU sample within half a pose interval"
            ));
        }
        let sample = CellSample {
            position: pose.position,
            accel: imu[k].accel,
            gyro: imu[k].gyro,
        };
        let idx = *slot.entry((row, col)).or_insert_with(|| {
            order.push(CellSamples {
                row,
                col,
                samples: Vec::new(),
            });
            order.len() - 1
        });
        order[idx].samples.push(sample);
    }
    Ok(order)
}

/// Traversability cost of one cell.
///
/// `TC = w1 * RMS|a| + w2 * theta_cum + w3 * RMS|j|` where the spatial jerk
/// `j = (a[i+1] - a[i]) / max(|p[i+1] - p[i]|, eps)` and
/// `theta_cum = sum |w[i]| ds[i] / sum ds[i]`, both over consecutive pairs
/// inside the cell. With a single sample, or when the pairs span no
/// distance, the pair terms are zero.
pub fn cell_cost(samples: &[CellSample], cfg: &LabelingConfig) -> Result<f64> {
    if samples.is_empty() {
        return arg("cannot cost an empty cell");
    }
    let t = samples.len() as f64;
    let accel_rms = (samples.iter().map(|s| s.accel.norm_squared()).sum::<f64>() / t).sqrt();

    let mut weighted_rate = 0.0;
    let mut path = 0.0;
    let mut jerk_sq = 0.0;
    for w in samples.windows(2) {
        let ds = (w[1].position - w[0].position).norm();
        weighted_rate += w[0].gyro.norm() * ds;
        path += ds;
        jerk_sq += ((w[1].accel - w[0].accel) / ds.max(cfg.epsilon)).norm_squared();
    }
    let pairs = samples.len() - 1;
    let theta_cum = if path > 0.0 {
        weighted_rate / path
    } else {
        0.0
    };
    let jerk_rms = if pairs > 0 {
        (jerk_sq / pairs as f64).sqrt()
    } else {
        0.0
    };
    Ok(cfg.w1 * accel_rms + cfg.w2 * theta_cum + cfg.w3 * jerk_rms)
}

/// Compactly supported interpolation kernel.
///
/// `K(d; r) = (2 + cos(2 pi d / r)) / 3 * (1 - d / r) + sin(2 pi d / r) / (2 pi)`
/// for `d <= r`, zero beyond. The outer half is evaluated in terms of the
/// distance to the rim, with a series where the closed form cancels, so that
/// `K(r) = 0` exactly and no rounding pushes the kernel below zero.
pub fn sparse_kernel(d: f64, r: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return arg(format!("kernel distance must be non-negative, got {d}"));
    }
    if !(r > 0.0) {
        return arg(format!("kernel radius must be positive, got {r}"));
    }
    if d > r {
        return Ok(0.0);
    }
    let q = d / r;
    if q <= 0.5 {
        let a = 2.0 * PI * q;
        return Ok((2.0 + a.cos()) / 3.0 * (1.0 - q) + a.sin() / (2.0 * PI));
    }
    // with x = 2 pi (1 - q): K = (x (2 + cos x) / 3 - sin x) / (2 pi)
    let x = 2.0 * PI * (1.0 - q);
    let f = if x < 1.0 {
        // sum_{k>=2} (-1)^k (2k - 2) x^(2k+1) / (3 (2k+1)!)
        let x2 = x * x;
        let mut term_pow = x.powi(5);
        let mut fact = 120.0;
        let mut sum = 0.0;
        for k in 2..12 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * (2 * k - 2) as f64 * term_pow / (3.0 * fact);
            term_pow *= x2;
            fact *= ((2 * k + 2) * (2 * k + 3)) as f64;
        }
        sum
    } else {
        x * (2.0 + x.cos()) / 3.0 - x.sin()
    };
    Ok(f / (2.0 * PI))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub x: f64,
    pub y: f64,
    pub tc: f64,
}

/// Known cost samples at scattered ground locations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCostmap {
    pub entries: Vec<SparseEntry>,
}

impl SparseCostmap {
    pub fn new(entries: Vec<SparseEntry>) -> Result<Self> {
        for e in &entries {
            if !(e.x.is_finite() && e.y.is_finite() && e.tc.is_finite() && e.tc >= 0.0) {
                return arg(format!("invalid sparse entry {e:?}"));
            }
        }
        Ok(Self { entries })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_m,y_m,tc\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.x, e.y, e.tc));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 columns", n + 1)));
            }
            entries.push(SparseEntry {
                x: vals[0],
                y: vals[1],
                tc: vals[2],
            });
        }
        Self::new(entries)
    }
}

/// Kernel-weighted mean of the sparse costs at every cell center of `grid`.
///
/// Entries are bucketed on a hash grid with bucket size `r`, so each query
/// only visits the 3x3 neighboring buckets. Candidates are summed in input
/// order. Cells whose total weight is at most 1e-12 are invalid.
pub fn interpolate_costmap(
    sparse: &SparseCostmap,
    grid: &GridSpec,
    cfg: &LabelingConfig,
) -> Result<DenseCostmap> {
    grid.validate()?;
    cfg.validate()?;
    if sparse.entries.is_empty() {
        return arg("cannot interpolate an empty sparse costmap");
    }
    let r = cfg.kernel_radius;
    let bucket = |x: f64, y: f64| ((x / r).floor() as i64, (y / r).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, e) in sparse.entries.iter().enumerate() {
        buckets.entry(bucket(e.x, e.y)).or_default().push(i);
    }

    let cells: Vec<(f64, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [x, y] = grid.cell_center(idx / grid.cols, idx % grid.cols);
            let (bx, by) = bucket(x, y);
            let mut near: Vec<usize> = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = buckets.get(&(bx + dx, by + dy)) {
                        near.extend_from_slice(list);
                    }
                }
            }
            near.sort_unstable();
            let (mut num, mut den) = (0.0, 0.0);
            for i in near {
                let e = &sparse.entries[i];
                let w = sparse_kernel((x - e.x).hypot(y - e.y), r).unwrap_or(0.0);
                num += w * e.tc;
                den += w;
            }
            if den > 1e-12 {
                (num / den, true)
            } else {
                (0.0, false)
            }
        })
        .collect();
    let (values, valid) = cells.into_iter().unzip();
    DenseCostmap::with_mask(*grid, values, valid)
}

/// Costmaps rescaled jointly to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabels {
    pub maps: Vec<DenseCostmap>,
    /// Dataset minimum and maximum before rescaling.
    pub min: f64,
    pub max: f64,
    /// Set when every valid cell held the same value.
    pub degenerate: bool,
}

/// Joint min-max normalization over the valid cells of every map.
pub fn normalize_labels(maps: &[DenseCostmap]) -> Result<NormalizedLabels> {
    let (min, max) = maps
        .iter()
        .filter_map(DenseCostmap::valid_range)
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
        .ok_or_else(|| Error::Argument("no valid cells to normalize".into()))?;
    let degenerate = max == min;
    let maps = maps
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for (v, ok) in out.values.iter_mut().zip(&m.valid) {
                if *ok {
                    *v = if degenerate {
                        0.0
                    } else {
                        (*v - min) / (max - min)
                    };
                }
            }
            out
        })
        .collect();
    Ok(NormalizedLabels {
        maps,
        min,
        max,
        degenerate,
    })
}

/// Applies a previously computed normalization to another map.
pub fn apply_normalization(map: &DenseCostmap, min: f64, max: f64) -> DenseCostmap {
    let mut out = map.clone();
    for (v, ok) in out.values.iter_mut().zip(&map.valid) {
        if *ok {
            *v = if max > min {
                ((*v - min) / (max - min)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Number of cells of size `res` needed to cover `extent`, tolerant of
/// rounding in the division.
pub fn cells_to_cover(extent: f64, res: f64) -> usize {
    let n = extent / res;
    let r = n.round();
    if (n - r).abs() < 1e-9 {
        r as usize
    } else {
        n.ceil() as usize
    }
}

/// Output of the full labeling pipeline for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabels {
    pub coarse_grid: GridSpec,
    pub sparse: SparseCostmap,
    pub dense: DenseCostmap,
}

/// Bins, costs and interpolates one run.
///
/// The coarse grid covers the driven path padded by the kernel radius,
/// aligned to multiples of `coarse_res`; the fine grid spans the same
/// extent. Sparse entries sit at coarse cell centers.
pub fn build_labels(poses: &[Pose], imu: &[ImuSample], cfg: &LabelingConfig) -> Result<RunLabels> {
    cfg.validate()?;
    if poses.is_empty() {
        return arg("no poses to label");
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in poses {
        for k in 0..2 {
            lo[k] = lo[k].min(p.position[k]);
            hi[k] = hi[k].max(p.position[k]);
        }
    }
    let pad = cfg.kernel_radius;
    let origin = lo.map(|v| ((v - pad) / cfg.coarse_res).floor() * cfg.coarse_res);
    let cols = cells_to_cover(hi[0] + pad - origin[0], cfg.coarse_res).max(1);
    let rows = cells_to_cover(hi[1] + pad - origin[1], cfg.coarse_res).max(1);
    let coarse_grid = GridSpec::new(origin, cfg.coarse_res, rows, cols)?;

    let cells = bin_trajectory(poses, imu, &coarse_grid)?;
    let entries = cells
        .iter()
        .map(|c| {
            let [x, y] = coarse_grid.cell_center(c.row, c.col);
            Ok(SparseEntry {
                x,
                y,
                tc: cell_cost(&c.samples, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sparse = SparseCostmap::new(entries)?;

    let fine_grid = GridSpec::new(
        origin,
        cfg.fine_res,
        cells_to_cover(coarse_grid.height_m(), cfg.fine_res),
        cells_to_cover(coarse_grid.width_m(), cfg.fine_res),
    )?;
    let dense = interpolate_costmap(&sparse, &fine_grid, cfg)?;
    Ok(RunLabels {
        coarse_grid,
        sparse,
        dense,
    })
}
