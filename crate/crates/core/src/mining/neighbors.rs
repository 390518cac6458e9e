use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou, AnchorGrid};
use crate::mining::PositiveSet;
use crate::scalar::Real;

/// Anchor promoted by neighbor sampling and the positive it overlaps most.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor<T> {
    pub anchor: usize,
    /// Index into the positive set's entries.
    pub parent: usize,
    pub iou: T,
}

/// Anchors (template footprint at the cell center) whose best IoU with a
/// positive's decoded box exceeds `tau_nei`, excluding anchors that are
/// positives already. Ascending anchor order; IoU ties go to the earlier
/// parent.
pub fn nas<T: Real>(positives: &PositiveSet<T>, grid: &AnchorGrid<T>, tau_nei: T) -> Vec<Neighbor<T>> {
    let taken: HashSet<usize> = positives.anchors().collect();
    let a_per = grid.anchors_per_cell();
    let half = T::lit(0.5);
    let max_template = grid
        .templates
        .iter()
        .map(|t| t.length.hypot(t.width))
        .fold(T::zero(), |m, d| m.max(d));
    let mut best: BTreeMap<usize, (T, usize)> = BTreeMap::new();
    for (j, p) in positives.entries.iter().enumerate() {
        let radius = (p.bbox.diagonal() + max_template) * half;
        for cell in grid.cells_within(p.bbox.cx, p.bbox.cy, radius) {
            for slot in 0..a_per {
                let anchor = cell * a_per + slot;
                if taken.contains(&anchor) {
                    continue;
                }
                let iou = rotated_iou(&grid.anchor_box(anchor), &p.bbox);
                if !(iou > tau_nei) {
                    continue;
                }
                let e = best.entry(anchor).or_insert((iou, j));
                if iou > e.0 {
                    *e = (iou, j);
                }
            }
        }
    }
    best.into_iter()
        .map(|(anchor, (iou, parent))| Neighbor { anchor, parent, iou })
        .collect()
}
