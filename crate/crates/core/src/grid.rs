//! Regular 2D grids in the ground plane and the costmaps defined on them.
//!
//! Cells are addressed as `(row, col)`; rows advance along +y and columns
//! along +x, starting from the grid origin at the lower-left corner of cell
//! `(0, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Placement and resolution of a 2D ground grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World `(x, y)` of the lower-left corner of cell `(0, 0)`, meters.
    pub origin: [f64; 2],
    /// Edge length of a cell, meters.
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(origin: [f64; 2], resolution: f64, rows: usize, cols: usize) -> Result<Self> {
        let grid = Self {
            origin,
            resolution,
            rows,
            cols,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid of `rows x cols` cells centered on the coordinate origin.
    pub fn centered(resolution: f64, rows: usize, cols: usize) -> Result<Self> {
        Self::new(
            [
                -(cols as f64) * resolution / 2.0,
                -(rows as f64) * resolution / 2.0,
            ],
            resolution,
            rows,
            cols,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return arg(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            ));
        }
        if self.rows == 0 || self.cols == 0 {
            return arg(format!(
                "grid must have at least one cell, got {}x{}",
                self.rows, self.cols
            ));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return arg("grid origin must be finite");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.resolution
    }

    /// World coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Signed cell index containing `(x, y)`, possibly outside the grid.
    ///
    /// Coordinates within 1e-9 cells of a cell boundary snap onto it, so that
    /// points generated as exact multiples of the resolution do not fall into
    /// the previous cell through rounding.
    pub fn locate_unbounded(&self, x: f64, y: f64) -> (i64, i64) {
        (
            snap_floor((y - self.origin[1]) / self.resolution),
            snap_floor((x - self.origin[0]) / self.resolution),
        )
    }

    /// Cell containing `(x, y)`, or `None` outside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (r, c) = self.locate_unbounded(x, y);
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

fn snap_floor(v: f64) -> i64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as i64
    } else {
        v.floor() as i64
    }
}

/// Per-cell values with a validity mask.
///
/// Serves both as a label map and as a network prediction. Invalid cells
/// always hold value `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCostmap {
    pub grid: GridSpec,
    /// Row-major `rows x cols` values.
    pub values: Vec<f64>,
    /// Row-major validity mask.
    pub valid: Vec<bool>,
}

impl DenseCostmap {
    /// All cells invalid.
    pub fn empty(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            valid: vec![false; grid.len()],
        }
    }

    /// All cells valid with the given values.
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return arg(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            ));
        }
        let valid = vec![true; values.len()];
        Ok(Self {
            grid,
            values,
            valid,
        })
    }

    pub fn with_mask(grid: GridSpec, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != grid.len() || valid.len() != grid.len() {
            return arg("costmap values and mask must match the grid size");
        }
        Ok(Self {
            grid,
            values,
            valid,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.grid.index(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Minimum and maximum over valid cells.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}
