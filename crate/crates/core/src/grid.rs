//! Region geometry: the bounded planar region, its partition into H x W
//! cells, cell indexing, centroids, and quantization of continuous positions.
//!
//! Conventions: the region is the half-open rectangle [0, width) x [0, height)
//! in meters; `u` indexes rows along the y axis, `v` indexes columns along the
//! x axis, both 1-indexed. Points on an interior cell boundary belong to the
//! higher-indexed cell (floor rule), which makes the cells an exact partition.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A bounded planar region partitioned into a `grid_h` x `grid_w` cell grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub width_m: f64,
    pub height_m: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Region {
    pub fn new(width_m: f64, height_m: f64, grid_h: usize, grid_w: usize) -> Result<Self> {
        if !(width_m > 0.0) || !(height_m > 0.0) {
            return Err(Error::Config(format!(
                "region dimensions must be positive, got {width_m} x {height_m}"
            )));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Config(format!(
                "grid must have at least one cell, got {grid_h} x {grid_w}"
            )));
        }
        Ok(Self {
            width_m,
            height_m,
            grid_h,
            grid_w,
        })
    }

    /// Square region helper: `side_m` x `side_m` split into `grid` x `grid` cells.
    pub fn square(side_m: f64, grid: usize) -> Result<Self> {
        Self::new(side_m, side_m, grid, grid)
    }

    pub fn cell_width(&self) -> f64 {
        self.width_m / self.grid_w as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.height_m / self.grid_h as f64
    }

    /// Half the cell diagonal; the worst-case distance from a point to the
    /// centroid of its own cell.
    pub fn half_cell_diagonal(&self) -> f64 {
        0.5 * (self.cell_width().powi(2) + self.cell_height().powi(2)).sqrt()
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn contains(&self, p: Point2D) -> bool {
        p.x >= 0.0 && p.x < self.width_m && p.y >= 0.0 && p.y < self.height_m
    }

    /// Maps a point in the region to the cell containing it.
    pub fn cell_of(&self, p: Point2D) -> Result<CellIndex> {
        if !self.contains(p) {
            return Err(Error::OutOfRegion {
                x: p.x,
                y: p.y,
                width_m: self.width_m,
                height_m: self.height_m,
            });
        }
        // The floor rule plus the half-open region keeps both indices in range,
        // but clamp against last-ulp rounding when p sits right below an edge.
        let u = ((p.y / self.cell_height()) as usize).min(self.grid_h - 1) + 1;
        let v = ((p.x / self.cell_width()) as usize).min(self.grid_w - 1) + 1;
        Ok(CellIndex { u, v })
    }

    /// Geometric center of cell `c`.
    pub fn centroid_of(&self, c: CellIndex) -> Result<Point2D> {
        self.check_cell(c)?;
        Ok(Point2D {
            x: (c.v as f64 - 0.5) * self.cell_width(),
            y: (c.u as f64 - 0.5) * self.cell_height(),
        })
    }

    pub fn check_cell(&self, c: CellIndex) -> Result<()> {
        if c.u < 1 || c.u > self.grid_h || c.v < 1 || c.v > self.grid_w {
            return Err(Error::CellOutOfRange {
                u: c.u as i64,
                v: c.v as i64,
                h: self.grid_h,
                w: self.grid_w,
            });
        }
        Ok(())
    }

    /// Element-wise `cell_of` over emitter positions, rejecting any pair that
    /// shares a cell (at most one emitter per cell).
    pub fn quantize_emitters(&self, emitters: &[Point2D]) -> Result<Vec<CellIndex>> {
        let mut cells = Vec::with_capacity(emitters.len());
        for (j, &p) in emitters.iter().enumerate() {
            let c = self.cell_of(p)?;
            if let Some(prev) = cells.iter().position(|&q| q == c) {
                return Err(Error::DuplicateCell {
                    first: prev,
                    second: j,
                    u: c.u,
                    v: c.v,
                });
            }
            cells.push(c);
        }
        Ok(cells)
    }
}

/// 1-indexed cell coordinates: `u` in [1, H] (row / y), `v` in [1, W] (column / x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub u: usize,
    pub v: usize,
}

impl CellIndex {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }

    /// Flat row-major offset into an H x W raster.
    pub fn flat(&self, grid_w: usize) -> usize {
        (self.u - 1) * grid_w + (self.v - 1)
    }
}

/// A position in meters within the region: `x` easting, `y` northing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(&self, other: Point2D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}
