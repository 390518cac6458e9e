//! Pseudo-label mining: main foreground mining on the static teacher,
//! supplement mining on the dynamic teacher with an adaptive threshold,
//! neighbor anchor sampling and the final merge with sparse labels.

mod dump;
mod foreground;
mod merge;
mod neighbors;
mod threshold;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxBev, RegDelta};
use crate::scalar::Real;

pub use dump::{load_dump, save_dump, DumpEntry, SceneDump};
pub use foreground::{candidates, mfm, sfm};
pub use merge::{assign_sparse_anchor, direction_bin, merge_labels, SparseLabel};
pub use neighbors::{nas, Neighbor};
pub use threshold::{dynamic_threshold, two_means_high, ThresholdOutcome};

/// Where a positive anchor's supervision comes from. Declaration order is
/// merge priority: earlier variants win anchor collisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    Sparse,
    PseudoMain,
    PseudoSupp,
    Neighbor,
}

impl LabelSource {
    pub const ALL: [LabelSource; 4] = [
        LabelSource::Sparse,
        LabelSource::PseudoMain,
        LabelSource::PseudoSupp,
        LabelSource::Neighbor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Sparse => "Sparse",
            LabelSource::PseudoMain => "PseudoMain",
            LabelSource::PseudoSupp => "PseudoSupp",
            LabelSource::Neighbor => "Neighbor",
        }
    }
}

/// A mined positive anchor with the teacher's score and decoded box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positive<T> {
    pub anchor: usize,
    pub score: T,
    pub bbox: BoxBev<T>,
    pub source: LabelSource,
}

/// Positives with unique anchor indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositiveSet<T> {
    pub entries: Vec<Positive<T>>,
}

impl<T: Real> PositiveSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|p| p.anchor)
    }

    /// Concatenation; anchors of `other` already present in `self` are dropped.
    pub fn union(&self, other: &PositiveSet<T>) -> PositiveSet<T> {
        let mut entries = self.entries.clone();
        for p in &other.entries {
            if !entries.iter().any(|e| e.anchor == p.anchor) {
                entries.push(p.clone());
            }
        }
        PositiveSet { entries }
    }
}

/// One supervised positive anchor. Every anchor not listed is a negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry<T> {
    pub anchor: usize,
    pub target: RegDelta<T>,
    pub dir_bin: u8,
    pub source: LabelSource,
    /// Whether regression and direction losses apply to this anchor.
    pub supervise_box: bool,
    /// Box the target was encoded from.
    pub bbox: BoxBev<T>,
    /// Teacher score; `None` for sparse labels.
    pub score: Option<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet<T> {
    pub positives: Vec<LabelEntry<T>>,
}

impl<T: Real> LabelSet<T> {
    pub fn count(&self, source: LabelSource) -> usize {
        self.positives.iter().filter(|e| e.source == source).count()
    }

    /// Checks anchor uniqueness, finite targets and binary direction bins.
    pub fn validate(&self, num_anchors: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.positives {
            if e.anchor >= num_anchors {
                return Err(Error::param("label anchor", format!("{} out of range", e.anchor)));
            }
            if !seen.insert(e.anchor) {
                return Err(Error::param("label anchor", format!("duplicate anchor {}", e.anchor)));
            }
            if !e.target.is_finite() {
                return Err(Error::param("label target", format!("non-finite at {}", e.anchor)));
            }
            if e.dir_bin > 1 {
                return Err(Error::param("dir_bin", "must be 0 or 1"));
            }
        }
        Ok(())
    }
}

/// Score thresholds and overlap thresholds used by the miners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub sigma_st_low: f64,
    pub sigma_st_high: f64,
    pub tau: f64,
    pub tau_nei: f64,
    /// Supervise regression on pseudo and neighbor anchors.
    pub pseudo_regression: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            sigma_st_low: 0.15,
            sigma_st_high: 0.2,
            tau: 0.15,
            tau_nei: 0.6,
            pseudo_regression: true,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_st_low && self.sigma_st_low < self.sigma_st_high && self.sigma_st_high < 1.0) {
            return Err(Error::param(
                "sigma_st_low/sigma_st_high",
                format!(
                    "need 0 < low < high < 1, got {} / {}",
                    self.sigma_st_low, self.sigma_st_high
                ),
            ));
        }
        for (name, v) in [("tau", self.tau), ("tau_nei", self.tau_nei)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::param(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}
