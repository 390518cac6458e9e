//! Synthetic multi-agent BEV scenes, sparse-label sampling and the JSONL
//! corpus format.
//!
//! Agent 0 of every scene is the ego agent: detection, labels and metrics are
//! all expressed in its frame.

mod generate;
mod io;

use serde::{Deserialize, Serialize};

use crate::geometry::{BoxBev, Pose2D, Rigid};
use crate::scalar::Real;

pub use generate::{generate_corpus, generate_scene, mix_seed, sample_sparse_labels, SceneGenParams};
pub use io::{load_scenes, save_scenes};

/// Ground-truth object in the global frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox<T> {
    #[serde(flatten)]
    pub bbox: BoxBev<T>,
    pub object_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent<T> {
    pub agent_id: u32,
    pub pose: Pose2D<T>,
    /// Observed points in the agent frame.
    pub points: Vec<[T; 2]>,
    pub sparse_label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene<T> {
    pub scene_id: String,
    pub agents: Vec<Agent<T>>,
    pub gt_boxes: Vec<GtBox<T>>,
}

impl<T: Real> Scene<T> {
    pub fn ego(&self) -> &Agent<T> {
        &self.agents[0]
    }

    pub fn object(&self, object_id: u32) -> Option<&GtBox<T>> {
        self.gt_boxes.iter().find(|g| g.object_id == object_id)
    }

    /// Ground truth in the ego frame, as `(object_id, box)`.
    pub fn gt_in_ego(&self) -> Vec<(u32, BoxBev<T>)> {
        let world = Pose2D::identity();
        let ego = self.ego().pose;
        self.gt_boxes
            .iter()
            .map(|g| (g.object_id, g.bbox.transformed(&world, &ego)))
            .collect()
    }

    /// Union of every agent's sparse label in the ego frame, one entry per
    /// object, ordered by first labeling agent.
    pub fn sparse_in_ego(&self) -> Vec<(u32, BoxBev<T>)> {
        let world = Pose2D::identity();
        let ego = self.ego().pose;
        let mut out: Vec<(u32, BoxBev<T>)> = Vec::new();
        for agent in &self.agents {
            let Some(id) = agent.sparse_label else {
                continue;
            };
            if out.iter().any(|(o, _)| *o == id) {
                continue;
            }
            if let Some(g) = self.object(id) {
                out.push((id, g.bbox.transformed(&world, &ego)));
            }
        }
        out
    }

    /// Per-agent sparse boxes in the ego frame, one per labeled agent
    /// (duplicates kept: every agent contributes its own score).
    pub fn agent_sparse_in_ego(&self) -> Vec<BoxBev<T>> {
        let world = Pose2D::identity();
        let ego = self.ego().pose;
        self.agents
            .iter()
            .filter_map(|a| a.sparse_label.and_then(|id| self.object(id)))
            .map(|g| g.bbox.transformed(&world, &ego))
            .collect()
    }
}

/// Counts used in corpus manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scenes: usize,
    pub agents: usize,
    pub objects: usize,
    pub sparse_labels: usize,
    /// Sparse labels divided by ground-truth objects; zero for an empty corpus.
    pub sparse_ratio: f64,
}

pub fn corpus_stats<T: Real>(scenes: &[Scene<T>]) -> CorpusStats {
    let agents: usize = scenes.iter().map(|s| s.agents.len()).sum();
    let objects: usize = scenes.iter().map(|s| s.gt_boxes.len()).sum();
    let sparse_labels: usize = scenes
        .iter()
        .flat_map(|s| &s.agents)
        .filter(|a| a.sparse_label.is_some())
        .count();
    CorpusStats {
        scenes: scenes.len(),
        agents,
        objects,
        sparse_labels,
        sparse_ratio: if objects == 0 {
            0.0
        } else {
            sparse_labels as f64 / objects as f64
        },
    }
}
