use std::cmp::Ordering;

use crate::detector::Prediction;
use crate::scalar::Real;

/// Result of the adaptive threshold for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdOutcome<T> {
    pub sigma: T,
    /// Number of sparse-label scores gathered.
    pub samples: usize,
    /// True when fewer than two scores were available.
    pub fallback: bool,
}

/// Higher centroid of the optimal two-cluster split of `scores`.
///
/// In one dimension an optimal 2-means partition is a cut of the sorted
/// values, so every cut is scored by within-cluster sum of squares from
/// prefix sums and the first minimal cut wins. Needs at least two values.
pub fn two_means_high<T: Real>(scores: &[T]) -> T {
    assert!(scores.len() >= 2, "two-means needs at least two values");
    let mut xs = scores.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = xs.len();
    if xs[0] == xs[n - 1] {
        return xs[0];
    }
    let mut s1 = vec![T::zero(); n + 1];
    let mut s2 = vec![T::zero(); n + 1];
    for (i, &x) in xs.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    let sse = |lo: usize, hi: usize| {
        let k = T::lit((hi - lo) as f64);
        let s = s1[hi] - s1[lo];
        (s2[hi] - s2[lo]) - s * s / k
    };
    let mut best_cut = 1;
    let mut best = T::infinity();
    for cut in 1..n {
        let cost = sse(0, cut) + sse(cut, n);
        if cost < best {
            best = cost;
            best_cut = cut;
        }
    }
    let high = &xs[best_cut..];
    high.iter().copied().sum::<T>() / T::lit(high.len() as f64)
}

/// Batch threshold for supplement mining: sigmoid scores of the dynamic
/// teacher at every sparse-label anchor, clustered into two groups; the
/// higher centroid is returned.
///
/// With a single score that score is used; with none, `fallback_high`.
pub fn dynamic_threshold<T: Real>(
    preds: &[&Prediction<T>],
    sparse_anchors: &[Vec<usize>],
    fallback_high: T,
) -> ThresholdOutcome<T> {
    let scores: Vec<T> = preds
        .iter()
        .zip(sparse_anchors)
        .flat_map(|(p, anchors)| anchors.iter().map(move |&a| p.score(a)))
        .collect();
    match scores.len() {
        0 => {
            log::warn!("dynamic threshold: no sparse-label scores in batch, using {fallback_high}");
            ThresholdOutcome {
                sigma: fallback_high,
                samples: 0,
                fallback: true,
            }
        }
        1 => {
            log::warn!("dynamic threshold: single sparse-label score, using it directly");
            ThresholdOutcome {
                sigma: scores[0],
                samples: 1,
                fallback: true,
            }
        }
        n => ThresholdOutcome {
            sigma: two_means_high(&scores),
            samples: n,
            fallback: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_scores() {
        let s = two_means_high(&[0.9f64, 0.2, 0.85]);
        assert!((s - 0.875).abs() < 1e-15);
    }

    #[test]
    fn equal_scores() {
        assert_eq!(two_means_high(&[0.3f64; 7]), 0.3);
        assert_eq!(two_means_high(&[0.1f64, 0.1]), 0.1);
    }

    #[test]
    fn fallbacks() {
        let mut p = Prediction::<f64>::zeros(4);
        p.cls_logits[2] = 2.0;
        let out = dynamic_threshold(&[&p], &[vec![]], 0.2);
        assert_eq!((out.sigma, out.fallback), (0.2, true));
        let out = dynamic_threshold(&[&p], &[vec![2]], 0.2);
        assert!(out.fallback);
        assert!((out.sigma - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        let out = dynamic_threshold(&[&p, &p], &[vec![2], vec![0]], 0.2);
        assert!(!out.fallback);
        assert_eq!(out.samples, 2);
        assert!((out.sigma - p.score(2)).abs() < 1e-15);
    }
}
