//! Detection metrics (AP over a global score ranking) and pseudo-label
//! quality ratios.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{nms, rotated_iou, AnchorGrid, BoxBev};
use crate::mining::{LabelSource, SceneDump};
use crate::scalar::Real;

/// Inference-side filtering and metric thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_tau: f64,
    pub iou_thresholds: Vec<f64>,
    /// IoU used to decide whether a pseudo label is false or a gt missed.
    pub quality_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_threshold: 0.2,
            nms_tau: 0.15,
            iou_thresholds: vec![0.3, 0.5, 0.7],
            quality_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.score_threshold) {
            return Err(Error::param("score_threshold", "must lie in [0, 1)"));
        }
        if !(self.nms_tau > 0.0 && self.nms_tau < 1.0) {
            return Err(Error::param("nms_tau", "must lie in (0, 1)"));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::param("iou_thresholds", "every threshold must lie in (0, 1]"));
        }
        if !(self.quality_iou > 0.0 && self.quality_iou <= 1.0) {
            return Err(Error::param("quality_iou", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BoxBev<T>,
    pub score: T,
}

/// Final detections of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult<T> {
    pub scene_id: String,
    pub detections: Vec<Detection<T>>,
}

/// Score filter then NMS; output in descending score.
pub fn postprocess<T: Real>(pred: &Prediction<T>, grid: &AnchorGrid<T>, config: &EvalConfig) -> Vec<Detection<T>> {
    let thr = T::lit(config.score_threshold);
    let cands: Vec<(BoxBev<T>, T)> = (0..pred.num_anchors())
        .filter(|&i| pred.score(i) > thr)
        .map(|i| (pred.decoded_box(grid, i), pred.score(i)))
        .collect();
    nms(&cands, T::lit(config.nms_tau))
        .into_iter()
        .map(|k| Detection {
            bbox: cands[k].0,
            score: cands[k].1,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per prediction, in input order.
    pub tp: Vec<bool>,
    /// Per ground truth.
    pub gt_matched: Vec<bool>,
}

/// Indices sorted by descending score; ties keep input order.
fn score_order<T: Real>(scores: impl Iterator<Item = T>) -> Vec<usize> {
    let s: Vec<T> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Greedy matching: predictions in descending score each take the
/// unmatched gt of highest IoU when that IoU reaches `iou_threshold`.
pub fn match_predictions<T: Real>(preds: &[Detection<T>], gts: &[BoxBev<T>], iou_threshold: T) -> MatchResult {
    let mut tp = vec![false; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in score_order(preds.iter().map(|d| d.score)) {
        let mut best: Option<(T, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let iou = rotated_iou(&preds[i].bbox, gt);
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((iou, g)) = best {
            if iou >= iou_threshold {
                tp[i] = true;
                gt_matched[g] = true;
            }
        }
    }
    MatchResult { tp, gt_matched }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApOutcome {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    pub gt: usize,
    /// Set when the corpus has no ground truth (AP reported as 0).
    pub no_ground_truth: bool,
}

/// All-point interpolated AP from `(score, is_tp)` pairs and a gt count.
///
/// Pairs are ranked by descending score, ties in listing order.
pub fn ap_from_ranked(flags: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let order = score_order(flags.iter().map(|f| f.0));
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Suffix maximum turns precision into its interpolated envelope.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP over a corpus at one IoU threshold, detections ranked globally.
pub fn average_precision<T: Real>(
    results: &[Vec<Detection<T>>],
    gts: &[Vec<BoxBev<T>>],
    iou_threshold: T,
) -> ApOutcome {
    assert_eq!(results.len(), gts.len(), "one detection list per scene");
    let mut flags = Vec::new();
    let mut missed = 0;
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    for (dets, g) in results.iter().zip(gts) {
        let m = match_predictions(dets, g, iou_threshold);
        missed += m.gt_matched.iter().filter(|&&x| !x).count();
        flags.extend(dets.iter().zip(&m.tp).map(|(d, &t)| (d.score.as_f64(), t)));
    }
    if num_gt == 0 {
        log::warn!("average precision requested on a corpus without ground truth; reporting 0");
    }
    let tp = flags.iter().filter(|f| f.1).count();
    ApOutcome {
        ap: ap_from_ranked(&flags, num_gt),
        tp,
        fp: flags.len() - tp,
        missed,
        gt: num_gt,
        no_ground_truth: num_gt == 0,
    }
}

/// Pseudo-label quality of a label dump against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// False pseudo labels / pseudo labels.
    pub fpr: f64,
    /// Missed ground truths / ground truths.
    pub mpr: f64,
    /// Pseudo labels per frame.
    pub an: f64,
    /// Pseudo plus neighbor labels per frame.
    pub an_with_neighbors: f64,
    pub pseudo: usize,
    pub false_pseudo: usize,
    pub neighbors: usize,
    pub gt: usize,
    pub missed: usize,
    pub frames: usize,
    /// Set when there were no pseudo labels (FPR reported as 0).
    pub no_pseudo_labels: bool,
}

/// FPR, MPR and AN of mined labels. Only PseudoMain and PseudoSupp entries
/// count as pseudo labels; sparse entries are given, and neighbors are
/// tallied on their own.
pub fn pseudo_label_quality(dumps: &[SceneDump], gts: &[Vec<BoxBev<f64>>], iou_threshold: f64) -> QualityReport {
    assert_eq!(dumps.len(), gts.len(), "one ground-truth list per dump");
    let mut r = QualityReport {
        frames: dumps.len(),
        ..Default::default()
    };
    for (d, g) in dumps.iter().zip(gts) {
        let preds: Vec<Detection<f64>> = d
            .entries
            .iter()
            .filter(|e| matches!(e.source, LabelSource::PseudoMain | LabelSource::PseudoSupp))
            .map(|e| Detection {
                bbox: BoxBev {
                    cx: e.cx,
                    cy: e.cy,
                    length: e.length,
                    width: e.width,
                    yaw: e.yaw,
                },
                score: e.score.unwrap_or(1.0),
            })
            .collect();
        r.neighbors += d.entries.iter().filter(|e| e.source == LabelSource::Neighbor).count();
        let m = match_predictions(&preds, g, iou_threshold);
        r.pseudo += preds.len();
        r.false_pseudo += m.tp.iter().filter(|&&t| !t).count();
        r.gt += g.len();
        r.missed += m.gt_matched.iter().filter(|&&x| !x).count();
    }
    r.no_pseudo_labels = r.pseudo == 0;
    r.fpr = if r.pseudo == 0 {
        0.0
    } else {
        r.false_pseudo as f64 / r.pseudo as f64
    };
    r.mpr = if r.gt == 0 { 0.0 } else { r.missed as f64 / r.gt as f64 };
    if r.frames > 0 {
        r.an = r.pseudo as f64 / r.frames as f64;
        r.an_with_neighbors = (r.pseudo + r.neighbors) as f64 / r.frames as f64;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::DumpEntry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64) -> BoxBev<f64> {
        BoxBev::new(cx, cy, 4.0, 2.0, 0.0).unwrap()
    }

    fn det(cx: f64, cy: f64, score: f64) -> Detection<f64> {
        Detection {
            bbox: bx(cx, cy),
            score,
        }
    }

    #[test]
    fn matching_examples() {
        let m = match_predictions(&[det(0.0, 0.0, 0.9)], &[bx(0.0, 0.0)], 0.5);
        assert_eq!(m.tp, vec![true]);
        let m = match_predictions(&[det(20.0, 0.0, 0.9)], &[bx(0.0, 0.0)], 0.5);
        assert_eq!(m.tp, vec![false]);
        assert_eq!(m.gt_matched, vec![false]);
        let m = match_predictions(&[det(0.1, 0.0, 0.6), det(0.0, 0.0, 0.8)], &[bx(0.0, 0.0)], 0.5);
        assert_eq!(m.tp, vec![false, true]);
    }

    #[test]
    fn ap_examples() {
        let gts = vec![vec![bx(0.0, 0.0)]];
        let one = average_precision(&[vec![det(0.0, 0.0, 0.9)]], &gts, 0.5);
        assert_eq!(one.ap, 1.0);
        let with_fp = average_precision(&[vec![det(0.0, 0.0, 0.9), det(30.0, 0.0, 0.8)]], &gts, 0.5);
        assert_eq!(with_fp.ap, 1.0);
        assert_eq!((with_fp.tp, with_fp.fp), (1, 1));
        let fp_first = average_precision(&[vec![det(0.0, 0.0, 0.7), det(30.0, 0.0, 0.8)]], &gts, 0.5);
        assert!((fp_first.ap - 0.5).abs() < 1e-15);
        let none = average_precision::<f64>(&[vec![]], &[vec![]], 0.5);
        assert!(none.no_ground_truth);
        assert_eq!(none.ap, 0.0);
    }

    /// Walks the ranked list point by point; at every recall increase the
    /// interpolated precision is the best precision at that recall or later.
    fn ap_oracle(flags: &[(f64, bool)], num_gt: usize) -> f64 {
        let mut idx: Vec<usize> = (0..flags.len()).collect();
        idx.sort_by(|&a, &b| flags[b].0.partial_cmp(&flags[a].0).unwrap());
        let points: Vec<(f64, f64)> = (1..=idx.len())
            .map(|k| {
                let tp = idx[..k].iter().filter(|&&i| flags[i].1).count();
                (tp as f64 / num_gt as f64, tp as f64 / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (k, &(r, _)) in points.iter().enumerate() {
            if r > prev {
                let p = points[k..].iter().map(|x| x.1).fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
        }
        ap
    }

    #[test]
    fn ap_matches_point_by_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(0..30);
            let flags: Vec<(f64, bool)> = (0..n).map(|_| (rng.random::<f64>(), rng.random_bool(0.5))).collect();
            let tps = flags.iter().filter(|f| f.1).count();
            let num_gt = tps + rng.random_range(if tps == 0 { 1 } else { 0 }..5);
            let got = ap_from_ranked(&flags, num_gt);
            assert!((got - ap_oracle(&flags, num_gt)).abs() < 1e-12);
        }
    }

    type Corpus = (Vec<Vec<Detection<f64>>>, Vec<Vec<BoxBev<f64>>>);

    fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
        let scenes = rng.random_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..scenes {
            let g: Vec<BoxBev<f64>> = (0..rng.random_range(1..4)).map(|k| bx(k as f64 * 10.0, 0.0)).collect();
            let d: Vec<Detection<f64>> = (0..rng.random_range(0..6))
                .map(|_| {
                    let k = rng.random_range(0..4) as f64;
                    det(
                        k * 10.0 + rng.random_range(-2.0..2.0),
                        rng.random_range(-1.0..1.0),
                        rng.random(),
                    )
                })
                .collect();
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    #[test]
    fn ap_monotone_in_iou_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (d, g) = random_corpus(&mut rng);
            let aps: Vec<f64> = [0.3, 0.5, 0.7]
                .iter()
                .map(|&t| average_precision(&d, &g, t).ap)
                .collect();
            assert!(aps[0] >= aps[1] - 1e-12 && aps[1] >= aps[2] - 1e-12, "{aps:?}");
        }
    }

    proptest! {
        #[test]
        fn zero_score_fp_never_helps(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut d, g) = random_corpus(&mut rng);
            let before = average_precision(&d, &g, 0.5).ap;
            d[0].push(det(500.0, 500.0, 0.0));
            prop_assert!(average_precision(&d, &g, 0.5).ap <= before + 1e-12);
        }

        #[test]
        fn top_score_tp_never_hurts(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut d, mut g) = random_corpus(&mut rng);
            let before = average_precision(&d, &g, 0.5).ap;
            g[0].push(bx(300.0, 0.0));
            d[0].push(det(300.0, 0.0, 2.0));
            prop_assert!(average_precision(&d, &g, 0.5).ap >= before - 1e-12);
        }
    }

    fn entry(source: LabelSource, cx: f64) -> DumpEntry {
        DumpEntry {
            anchor: 0,
            source,
            score: Some(0.5),
            cx,
            cy: 0.0,
            length: 4.0,
            width: 2.0,
            yaw: 0.0,
        }
    }

    #[test]
    fn quality_ratios() {
        // 10 pseudo labels, 8 on distinct gts and 2 far away; 20 gts.
        let gts: Vec<BoxBev<f64>> = (0..20).map(|k| bx(k as f64 * 10.0, 0.0)).collect();
        let mut entries: Vec<DumpEntry> = (0..8)
            .map(|k| entry(LabelSource::PseudoMain, k as f64 * 10.0))
            .collect();
        entries.push(entry(LabelSource::PseudoSupp, 1000.0));
        entries.push(entry(LabelSource::PseudoSupp, 2000.0));
        entries.push(entry(LabelSource::Sparse, 150.0));
        entries.push(entry(LabelSource::Neighbor, 3000.0));
        let dump = SceneDump {
            scene_id: "s".into(),
            sigma_dt: None,
            entries,
        };
        let q = pseudo_label_quality(&[dump], &[gts], 0.5);
        assert_eq!(q.pseudo, 10);
        assert!((q.fpr - 0.2).abs() < 1e-15);
        assert!((q.mpr - 0.6).abs() < 1e-15);
        assert_eq!(q.neighbors, 1);
        assert_eq!(q.an, 10.0);
        assert_eq!(q.an_with_neighbors, 11.0);
    }

    #[test]
    fn quality_exact_set_and_empty() {
        let gts: Vec<BoxBev<f64>> = (0..3).map(|k| bx(k as f64 * 10.0, 0.0)).collect();
        let dump = SceneDump {
            scene_id: "s".into(),
            sigma_dt: None,
            entries: (0..3)
                .map(|k| entry(LabelSource::PseudoMain, k as f64 * 10.0))
                .collect(),
        };
        let q = pseudo_label_quality(&[dump], std::slice::from_ref(&gts), 0.5);
        assert_eq!((q.fpr, q.mpr), (0.0, 0.0));
        let empty = SceneDump {
            scene_id: "s".into(),
            sigma_dt: None,
            entries: vec![],
        };
        let q = pseudo_label_quality(&[empty], &[gts], 0.5);
        assert!(q.no_pseudo_labels);
        assert_eq!((q.fpr, q.mpr), (0.0, 1.0));
    }
}
