use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::geometry::{AnchorGrid, RegDelta};
use crate::mining::LabelSet;
use crate::scalar::{sigmoid, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 2.0,
            dir: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

/// Weighted loss terms, each already divided by the positive count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub positives: usize,
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Returns `(value, d value / d x)`.
#[inline]
fn smooth_l1<T: Real>(x: T, beta: T) -> (T, T) {
    if x.abs() < beta {
        (T::lit(0.5) * x * x / beta, x / beta)
    } else {
        (x.abs() - T::lit(0.5) * beta, x.signum())
    }
}

/// Focal classification over every anchor, smooth-L1 regression and 2-bin
/// direction cross-entropy over box-supervised positives.
///
/// The yaw residual is compared through `sin(pred - target)`, which makes the
/// regression blind to a half-turn; the direction bins resolve it. Returns the
/// loss and its gradient w.r.t. every prediction output.
pub fn supervised_loss<T: Real>(
    pred: &Prediction<T>,
    labels: &LabelSet<T>,
    grid: &AnchorGrid<T>,
    weights: &LossWeights,
) -> (LossBreakdown, Prediction<T>) {
    let n = pred.num_anchors();
    assert_eq!(n, grid.num_anchors(), "prediction does not match grid");
    let alpha = T::lit(weights.focal_alpha);
    let gamma = T::lit(weights.focal_gamma);
    let beta = T::lit(weights.smooth_l1_beta);

    let mut positive = vec![false; n];
    for e in &labels.positives {
        assert!(e.anchor < n, "label anchor {} out of range", e.anchor);
        assert!(
            e.target.is_finite(),
            "positive anchor {} lacks a finite regression target",
            e.anchor
        );
        positive[e.anchor] = true;
    }
    let norm = T::lit(labels.positives.len().max(1) as f64);
    let mut grad = Prediction::zeros(n);

    let mut cls = T::zero();
    let w_cls = T::lit(weights.cls) / norm;
    for (i, &is_positive) in positive.iter().enumerate() {
        let z = pred.cls_logits[i];
        let p = sigmoid(z);
        let (l, g) = if is_positive {
            let log_p = -softplus(-z);
            let q = (T::one() - p).powf(gamma);
            (-alpha * q * log_p, alpha * q * (gamma * p * log_p - (T::one() - p)))
        } else {
            let log_1mp = -softplus(z);
            let q = p.powf(gamma);
            (
                -(T::one() - alpha) * q * log_1mp,
                (T::one() - alpha) * q * (p - gamma * (T::one() - p) * log_1mp),
            )
        };
        cls += l;
        grad.cls_logits[i] = g * w_cls;
    }

    let mut reg = T::zero();
    let mut dir = T::zero();
    let w_reg = T::lit(weights.reg) / norm;
    let w_dir = T::lit(weights.dir) / norm;
    for e in labels.positives.iter().filter(|e| e.supervise_box) {
        let i = e.anchor;
        let pd = pred.reg_deltas[i].to_array();
        let td = e.target.to_array();
        let mut gd = [T::zero(); 5];
        for k in 0..4 {
            let (l, g) = smooth_l1(pd[k] - td[k], beta);
            reg += l;
            gd[k] = g * w_reg;
        }
        let diff = pd[4] - td[4];
        let (l, g) = smooth_l1(diff.sin(), beta);
        reg += l;
        gd[4] = g * diff.cos() * w_reg;
        grad.reg_deltas[i] = RegDelta::from_slice(&gd);

        let [z0, z1] = pred.dir_logits[i];
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let target = if e.dir_bin == 0 { z0 } else { z1 };
        dir += lse - target;
        let p0 = (z0 - lse).exp();
        let p1 = (z1 - lse).exp();
        let (t0, t1) = if e.dir_bin == 0 {
            (T::one(), T::zero())
        } else {
            (T::zero(), T::one())
        };
        grad.dir_logits[i] = [(p0 - t0) * w_dir, (p1 - t1) * w_dir];
    }

    let cls = (cls * T::lit(weights.cls) / norm).as_f64();
    let reg = (reg * T::lit(weights.reg) / norm).as_f64();
    let dir = (dir * T::lit(weights.dir) / norm).as_f64();
    (
        LossBreakdown {
            total: cls + reg + dir,
            cls,
            reg,
            dir,
            positives: labels.positives.len(),
        },
        grad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::tests::small_grid;
    use crate::geometry::{encode_box, BoxBev};
    use crate::mining::{LabelEntry, LabelSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(anchor: usize, target: RegDelta<f64>, dir_bin: u8) -> LabelEntry<f64> {
        LabelEntry {
            anchor,
            target,
            dir_bin,
            source: LabelSource::Sparse,
            supervise_box: true,
            bbox: BoxBev::new(0.0, 0.0, 4.0, 2.0, 0.0).unwrap(),
            score: None,
        }
    }

    #[test]
    fn perfect_background_is_zero() {
        let grid = small_grid();
        let mut pred = Prediction::zeros(grid.num_anchors());
        pred.cls_logits.iter_mut().for_each(|z| *z = -60.0);
        let (l, _) = supervised_loss(&pred, &LabelSet::default(), &grid, &LossWeights::default());
        assert!(l.total < 1e-40, "{l:?}");
    }

    #[test]
    fn perfect_positive_contributes_nothing() {
        let grid = small_grid();
        let anchor = 37;
        let target = encode_box(
            &grid.anchor_box(anchor),
            &BoxBev::new(0.3, -0.2, 4.4, 1.9, 0.05).unwrap(),
        );
        let mut pred = Prediction::zeros(grid.num_anchors());
        pred.cls_logits.iter_mut().for_each(|z| *z = -60.0);
        pred.cls_logits[anchor] = 60.0;
        pred.reg_deltas[anchor] = target;
        pred.dir_logits[anchor] = [-40.0, 40.0];
        let labels = LabelSet {
            positives: vec![entry(anchor, target, 1)],
        };
        let (l, _) = supervised_loss(&pred, &labels, &grid, &LossWeights::default());
        assert!(l.total < 1e-12, "{l:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = small_grid();
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let n = grid.num_anchors();
            let mut pred = Prediction::zeros(n);
            for i in 0..n {
                pred.cls_logits[i] = rng.random_range(-4.0..2.0);
                let d: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                pred.reg_deltas[i] = RegDelta::from_slice(&d);
                pred.dir_logits[i] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            }
            let mut positives = Vec::new();
            for a in [3usize, 40, 77, 100] {
                let t: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                positives.push(entry(a, RegDelta::from_slice(&t), rng.random_range(0..2)));
            }
            let labels = LabelSet { positives };
            let (_, g) = supervised_loss(&pred, &labels, &grid, &w);
            let h = 1e-6;
            let f = |p: &Prediction<f64>| supervised_loss(p, &labels, &grid, &w).0.total;
            let check = |analytic: f64, plus: Prediction<f64>, minus: Prediction<f64>| {
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic.abs()).max(1e-7);
                assert!((fd - analytic).abs() / denom < 1e-4, "fd {fd} vs {analytic}");
            };
            for &i in &[3usize, 40, 41, 77, 100, 5] {
                let (mut p, mut m) = (pred.clone(), pred.clone());
                p.cls_logits[i] += h;
                m.cls_logits[i] -= h;
                check(g.cls_logits[i], p, m);
                for k in 0..5 {
                    let (mut p, mut m) = (pred.clone(), pred.clone());
                    let mut dp = p.reg_deltas[i].to_array();
                    dp[k] += h;
                    p.reg_deltas[i] = RegDelta::from_slice(&dp);
                    let mut dm = m.reg_deltas[i].to_array();
                    dm[k] -= h;
                    m.reg_deltas[i] = RegDelta::from_slice(&dm);
                    check(g.reg_deltas[i].to_array()[k], p, m);
                }
                for k in 0..2 {
                    let (mut p, mut m) = (pred.clone(), pred.clone());
                    p.dir_logits[i][k] += h;
                    m.dir_logits[i][k] -= h;
                    check(g.dir_logits[i][k], p, m);
                }
            }
        }
    }

    #[test]
    fn regression_skipped_without_box_supervision() {
        let grid = small_grid();
        let mut pred = Prediction::zeros(grid.num_anchors());
        pred.reg_deltas[10] = RegDelta::from_slice(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        let mut e = entry(10, RegDelta::zero(), 0);
        e.supervise_box = false;
        let (l, g) = supervised_loss(&pred, &LabelSet { positives: vec![e] }, &grid, &LossWeights::default());
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.dir, 0.0);
        assert_eq!(g.reg_deltas[10], RegDelta::zero());
    }

    #[test]
    #[should_panic]
    fn non_finite_target_is_a_contract_violation() {
        let grid = small_grid();
        let pred = Prediction::zeros(grid.num_anchors());
        let e = entry(10, RegDelta::from_slice(&[f64::NAN, 0.0, 0.0, 0.0, 0.0]), 0);
        supervised_loss(&pred, &LabelSet { positives: vec![e] }, &grid, &LossWeights::default());
    }
}
