use std::collections::HashSet;

use crate::detector::Prediction;
use crate::geometry::{nms, AnchorGrid};
use crate::mining::{LabelSource, Positive, PositiveSet};
use crate::scalar::Real;

/// Anchors whose sigmoid score exceeds `sigma`, ascending.
pub fn candidates<T: Real>(pred: &Prediction<T>, sigma: T) -> Vec<usize> {
    (0..pred.num_anchors()).filter(|&i| pred.score(i) > sigma).collect()
}

/// Threshold filter, box decoding and NMS; survivors in NMS order.
fn filter_and_suppress<T: Real>(
    pred: &Prediction<T>,
    grid: &AnchorGrid<T>,
    sigma: T,
    tau: T,
    source: LabelSource,
) -> PositiveSet<T> {
    let anchors = candidates(pred, sigma);
    let boxed: Vec<_> = anchors
        .iter()
        .map(|&a| (pred.decoded_box(grid, a), pred.score(a)))
        .collect();
    let entries = nms(&boxed, tau)
        .into_iter()
        .map(|k| Positive {
            anchor: anchors[k],
            score: boxed[k].1,
            bbox: boxed[k].0,
            source,
        })
        .collect();
    PositiveSet { entries }
}

/// Main foreground mining on the static teacher's prediction.
pub fn mfm<T: Real>(pred: &Prediction<T>, grid: &AnchorGrid<T>, sigma_st: T, tau: T) -> PositiveSet<T> {
    filter_and_suppress(pred, grid, sigma_st, tau, LabelSource::PseudoMain)
}

/// Supplement foreground mining on the dynamic teacher's prediction: the
/// same filter and NMS, then every survivor whose grid cell already holds a
/// main-mining positive is dropped.
pub fn sfm<T: Real>(
    pred_dt: &Prediction<T>,
    grid: &AnchorGrid<T>,
    sigma_dt: T,
    tau: T,
    r_st: &PositiveSet<T>,
) -> PositiveSet<T> {
    let taken: HashSet<usize> = r_st.anchors().map(|a| grid.cell_of_anchor(a)).collect();
    let mut set = filter_and_suppress(pred_dt, grid, sigma_dt, tau, LabelSource::PseudoSupp);
    set.entries.retain(|p| !taken.contains(&grid.cell_of_anchor(p.anchor)));
    set
}
