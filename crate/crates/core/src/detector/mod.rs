//! Toy collaborative detector: a fixed point rasterizer per agent, nearest-cell
//! projection into the ego frame, elementwise-max fusion, and a learned
//! shared-weight 3x3 affine head emitting classification, regression and
//! direction outputs for every anchor.

mod adam;
mod checkpoint;
mod features;
mod head;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{decode_box, AnchorGrid, BoxBev, RegDelta};
use crate::scalar::{sigmoid, Real};
use crate::scenes::Scene;

pub use adam::{optimizer_step, Adam, AdamConfig};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use features::{encode, fuse_max, project_feature, FeatureMap, CHANNELS};
pub use head::{detect_head, head_backward, Patches};
pub use loss::{supervised_loss, LossBreakdown, LossWeights};

/// cls + 5 regression + 2 direction logits.
pub const OUTPUTS_PER_ANCHOR: usize = 8;

/// Shape of the learned head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub channels: usize,
    pub anchors_per_cell: usize,
    pub kernel: usize,
}

impl HeadLayout {
    pub fn for_grid<T: Real>(grid: &AnchorGrid<T>) -> Self {
        HeadLayout {
            channels: CHANNELS,
            anchors_per_cell: grid.anchors_per_cell(),
            kernel: 3,
        }
    }

    pub fn inputs(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn outputs(&self) -> usize {
        self.anchors_per_cell * OUTPUTS_PER_ANCHOR
    }

    /// Weights `[outputs][inputs]` row-major, then `outputs` biases.
    pub fn num_params(&self) -> usize {
        self.outputs() * (self.inputs() + 1)
    }

    pub fn bias_offset(&self) -> usize {
        self.outputs() * self.inputs()
    }
}

/// Flat parameter vector of one detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorState<T> {
    pub layout: HeadLayout,
    pub params: Vec<T>,
    /// Number of optimizer updates applied to this state.
    #[serde(skip)]
    pub optimizer_writes: u64,
    /// Number of EMA updates applied to this state.
    #[serde(skip)]
    pub ema_writes: u64,
}

/// Prior probability encoded in the initial classification bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;

impl<T: Real> DetectorState<T> {
    pub fn zeros(layout: HeadLayout) -> Self {
        DetectorState {
            layout,
            params: vec![T::zero(); layout.num_params()],
            optimizer_writes: 0,
            ema_writes: 0,
        }
    }

    /// Small Gaussian weights; classification biases start at the
    /// low-foreground prior so untrained scores sit near 0.01.
    pub fn init(layout: HeadLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std-dev");
        let mut s = Self::zeros(layout);
        let nw = layout.bias_offset();
        for p in &mut s.params[..nw] {
            *p = T::lit(normal.sample(&mut rng));
        }
        let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        for a in 0..layout.anchors_per_cell {
            s.params[nw + a * OUTPUTS_PER_ANCHOR] = T::lit(prior);
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Per-anchor head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub cls_logits: Vec<T>,
    pub reg_deltas: Vec<RegDelta<T>>,
    pub dir_logits: Vec<[T; 2]>,
}

impl<T: Real> Prediction<T> {
    pub fn zeros(num_anchors: usize) -> Self {
        Prediction {
            cls_logits: vec![T::zero(); num_anchors],
            reg_deltas: vec![RegDelta::zero(); num_anchors],
            dir_logits: vec![[T::zero(); 2]; num_anchors],
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.cls_logits.len()
    }

    pub fn score(&self, anchor: usize) -> T {
        sigmoid(self.cls_logits[anchor])
    }

    pub fn decoded_box(&self, grid: &AnchorGrid<T>, anchor: usize) -> BoxBev<T> {
        decode_box(&grid.anchor_box(anchor), &self.reg_deltas[anchor])
    }

    pub fn is_finite(&self) -> bool {
        self.cls_logits.iter().all(|v| v.is_finite())
            && self.reg_deltas.iter().all(|d| d.is_finite())
            && self.dir_logits.iter().all(|d| d[0].is_finite() && d[1].is_finite())
    }
}

/// Ego-frame fused features of a scene: every agent is rasterized in its own
/// frame, non-ego maps are projected into the ego frame, then max-fused.
pub fn fused_features<T: Real>(scene: &Scene<T>, grid: &AnchorGrid<T>) -> FeatureMap<T> {
    let ego = scene.ego();
    let ego_map = encode(ego, grid);
    let projected: Vec<FeatureMap<T>> = scene.agents[1..]
        .iter()
        .map(|a| project_feature(&encode(a, grid), grid, &a.pose, &ego.pose))
        .collect();
    fuse_max(&ego_map, &projected)
}

/// Full forward pass for one scene.
pub fn predict<T: Real>(scene: &Scene<T>, grid: &AnchorGrid<T>, state: &DetectorState<T>) -> Prediction<T> {
    let patches = Patches::from_features(&fused_features(scene, grid), state.layout.kernel);
    detect_head(&patches, state)
}
