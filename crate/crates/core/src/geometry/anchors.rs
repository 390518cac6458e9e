use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxBev, RegDelta};
use crate::scalar::{normalize_angle, Real};

/// Box shape replicated at every grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate<T> {
    pub length: T,
    pub width: T,
    pub yaw: T,
}

/// H x W x A anchor lattice.
///
/// Cell `(row, col)` spans `origin + [col, col+1) * cell_size` in x and
/// `origin + [row, row+1) * cell_size` in y. Anchors are numbered
/// `(row * W + col) * A + slot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid<T> {
    pub height_cells: usize,
    pub width_cells: usize,
    pub cell_size: T,
    pub origin: (T, T),
    pub templates: Vec<AnchorTemplate<T>>,
}

/// Grid cell holding the anchor with `flat_index`.
#[inline]
pub fn anchor_index_to_grid(flat_index: usize, anchors_per_cell: usize) -> usize {
    flat_index / anchors_per_cell
}

impl<T: Real> AnchorGrid<T> {
    pub fn new(
        height_cells: usize,
        width_cells: usize,
        cell_size: T,
        origin: (T, T),
        templates: Vec<AnchorTemplate<T>>,
    ) -> Result<Self> {
        if height_cells == 0 || width_cells == 0 {
            return Err(Error::param("grid", "grid must have at least one cell"));
        }
        if !(cell_size > T::zero()) {
            return Err(Error::param("cell_size", "must be positive"));
        }
        if templates.is_empty() {
            return Err(Error::param("templates", "need at least one anchor template"));
        }
        if templates.iter().any(|t| !(t.length > T::zero() && t.width > T::zero())) {
            return Err(Error::param("templates", "template sizes must be positive"));
        }
        Ok(AnchorGrid {
            height_cells,
            width_cells,
            cell_size,
            origin,
            templates,
        })
    }

    /// Grid whose extent is centered on the frame origin.
    pub fn centered(
        height_cells: usize,
        width_cells: usize,
        cell_size: T,
        templates: Vec<AnchorTemplate<T>>,
    ) -> Result<Self> {
        let half = T::lit(0.5);
        let origin = (
            -T::lit(width_cells as f64) * cell_size * half,
            -T::lit(height_cells as f64) * cell_size * half,
        );
        Self::new(height_cells, width_cells, cell_size, origin, templates)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.templates.len()
    }

    pub fn num_cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    pub fn num_anchors(&self) -> usize {
        self.num_cells() * self.anchors_per_cell()
    }

    /// Cell of an anchor. Panics on an out-of-range index.
    pub fn cell_of_anchor(&self, flat_index: usize) -> usize {
        assert!(
            flat_index < self.num_anchors(),
            "anchor index {flat_index} out of range ({} anchors)",
            self.num_anchors()
        );
        anchor_index_to_grid(flat_index, self.anchors_per_cell())
    }

    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        (cell / self.width_cells, cell % self.width_cells)
    }

    pub fn cell_center(&self, cell: usize) -> (T, T) {
        let (r, c) = self.cell_rc(cell);
        let half = T::lit(0.5);
        (
            self.origin.0 + (T::lit(c as f64) + half) * self.cell_size,
            self.origin.1 + (T::lit(r as f64) + half) * self.cell_size,
        )
    }

    /// Extent as `(x_min, y_min, x_max, y_max)`.
    pub fn extent(&self) -> (T, T, T, T) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + T::lit(self.width_cells as f64) * self.cell_size,
            self.origin.1 + T::lit(self.height_cells as f64) * self.cell_size,
        )
    }

    /// `(row, col)` containing a point, if any. Row/col may be negative or
    /// past the end, so it is returned as signed before bounds checking.
    pub fn cell_coords(&self, x: T, y: T) -> (i64, i64) {
        let c = ((x - self.origin.0) / self.cell_size).floor();
        let r = ((y - self.origin.1) / self.cell_size).floor();
        (r.to_i64().unwrap_or(i64::MIN), c.to_i64().unwrap_or(i64::MIN))
    }

    pub fn cell_at(&self, x: T, y: T) -> Option<usize> {
        let (r, c) = self.cell_coords(x, y);
        if r < 0 || c < 0 || r >= self.height_cells as i64 || c >= self.width_cells as i64 {
            None
        } else {
            Some(r as usize * self.width_cells + c as usize)
        }
    }

    /// Footprint of an anchor: its template placed at the cell center.
    pub fn anchor_box(&self, flat_index: usize) -> BoxBev<T> {
        let cell = self.cell_of_anchor(flat_index);
        let t = &self.templates[flat_index % self.anchors_per_cell()];
        let (cx, cy) = self.cell_center(cell);
        BoxBev {
            cx,
            cy,
            length: t.length,
            width: t.width,
            yaw: normalize_angle(t.yaw),
        }
    }

    /// Cells whose centers fall in the axis-aligned square of half-size
    /// `radius` around `(x, y)`, clipped to the grid, in row-major order.
    pub fn cells_within(&self, x: T, y: T, radius: T) -> Vec<usize> {
        let (r0, c0) = self.cell_coords(x - radius, y - radius);
        let (r1, c1) = self.cell_coords(x + radius, y + radius);
        let r0 = r0.max(0);
        let c0 = c0.max(0);
        let r1 = r1.min(self.height_cells as i64 - 1);
        let c1 = c1.min(self.width_cells as i64 - 1);
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.push(r as usize * self.width_cells + c as usize);
            }
        }
        out
    }
}

/// Applies a regression delta to an anchor box.
pub fn decode_box<T: Real>(anchor: &BoxBev<T>, delta: &RegDelta<T>) -> BoxBev<T> {
    let diag = anchor.diagonal();
    BoxBev {
        cx: anchor.cx + delta.dx * diag,
        cy: anchor.cy + delta.dy * diag,
        length: anchor.length * delta.dl.exp(),
        width: anchor.width * delta.dw.exp(),
        yaw: normalize_angle(anchor.yaw + delta.dyaw),
    }
}

/// Inverse of [`decode_box`]; the yaw residual is wrapped into `[-pi, pi)`.
pub fn encode_box<T: Real>(anchor: &BoxBev<T>, target: &BoxBev<T>) -> RegDelta<T> {
    let diag = anchor.diagonal();
    RegDelta {
        dx: (target.cx - anchor.cx) / diag,
        dy: (target.cy - anchor.cy) / diag,
        dl: (target.length / anchor.length).ln(),
        dw: (target.width / anchor.width).ln(),
        dyaw: normalize_angle(target.yaw - anchor.yaw),
    }
}
