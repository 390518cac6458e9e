use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_box, rotated_iou, AnchorGrid, BoxBev};
use crate::mining::{LabelEntry, LabelSet, LabelSource, Neighbor, PositiveSet};
use crate::scalar::Real;

/// Human annotation assigned to one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLabel<T> {
    pub anchor: usize,
    pub bbox: BoxBev<T>,
}

/// Direction bin of a heading: 1 for yaw in `[0, pi)`, 0 for `[-pi, 0)`.
pub fn direction_bin<T: Real>(yaw: T) -> u8 {
    u8::from(crate::scalar::normalize_angle(yaw) >= T::zero())
}

/// Anchor whose footprint overlaps `bbox` most; ties go to the lower index.
pub fn assign_sparse_anchor<T: Real>(bbox: &BoxBev<T>, grid: &AnchorGrid<T>) -> Result<usize> {
    let Some(center_cell) = grid.cell_at(bbox.cx, bbox.cy) else {
        return Err(Error::OutsideGrid {
            cx: bbox.cx.as_f64(),
            cy: bbox.cy.as_f64(),
        });
    };
    let a_per = grid.anchors_per_cell();
    let max_template = grid
        .templates
        .iter()
        .map(|t| t.length.hypot(t.width))
        .fold(T::zero(), |m, d| m.max(d));
    let radius = (bbox.diagonal() + max_template) * T::lit(0.5);
    let mut best: Option<(T, usize)> = None;
    for cell in grid.cells_within(bbox.cx, bbox.cy, radius) {
        for slot in 0..a_per {
            let anchor = cell * a_per + slot;
            let iou = rotated_iou(&grid.anchor_box(anchor), bbox);
            match best {
                Some((b, i)) if iou < b || (iou == b && anchor > i) => {}
                _ => best = Some((iou, anchor)),
            }
        }
    }
    Ok(match best {
        Some((iou, anchor)) if iou > T::zero() => anchor,
        _ => center_cell * a_per,
    })
}

/// Combines sparse labels, mined positives and sampled neighbors into one
/// label set, one entry per anchor.
///
/// Collisions resolve by source priority Sparse > PseudoMain > PseudoSupp >
/// Neighbor; among equal sources the first listed wins. Pseudo and neighbor
/// targets are encoded from the teacher's decoded box (the parent's, for a
/// neighbor) and only supervise regression when `pseudo_regression` is set.
pub fn merge_labels<T: Real>(
    sparse: &[SparseLabel<T>],
    positives: &PositiveSet<T>,
    neighbors: &[Neighbor<T>],
    grid: &AnchorGrid<T>,
    pseudo_regression: bool,
) -> LabelSet<T> {
    let make = |anchor: usize, bbox: &BoxBev<T>, source, score, supervise_box| LabelEntry {
        anchor,
        target: encode_box(&grid.anchor_box(anchor), bbox),
        dir_bin: direction_bin(bbox.yaw),
        source,
        supervise_box,
        bbox: *bbox,
        score,
    };
    let mut all: Vec<LabelEntry<T>> = Vec::with_capacity(sparse.len() + positives.len() + neighbors.len());
    all.extend(
        sparse
            .iter()
            .map(|s| make(s.anchor, &s.bbox, LabelSource::Sparse, None, true)),
    );
    all.extend(
        positives
            .entries
            .iter()
            .map(|p| make(p.anchor, &p.bbox, p.source, Some(p.score), pseudo_regression)),
    );
    all.extend(neighbors.iter().map(|n| {
        let parent = &positives.entries[n.parent];
        make(
            n.anchor,
            &parent.bbox,
            LabelSource::Neighbor,
            Some(parent.score),
            pseudo_regression,
        )
    }));
    // Stable: equal (anchor, source) keep their listing order.
    all.sort_by_key(|e| (e.anchor, e.source));
    all.dedup_by_key(|e| e.anchor);
    LabelSet { positives: all }
}
