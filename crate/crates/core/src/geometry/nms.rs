use std::cmp::Ordering;

use crate::geometry::{rotated_iou, BoxBev};
use crate::scalar::Real;

/// Greedy rotated-box non-maximum suppression.
///
/// Candidates are visited by descending score, equal scores by ascending
/// position in `candidates`. A candidate survives when its IoU with every
/// previously kept box is at most `overlap_threshold`. Returns the kept
/// positions in visiting order.
pub fn nms<T: Real>(candidates: &[(BoxBev<T>, T)], overlap_threshold: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        candidates[j]
            .1
            .partial_cmp(&candidates[i].1)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &candidates[i].0;
        if kept
            .iter()
            .all(|&k| rotated_iou(&candidates[k].0, b) <= overlap_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
