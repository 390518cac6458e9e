use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, transform_point, BoxBev, Pose2D};
use crate::scalar::Real;
use crate::scenes::{Agent, GtBox, Scene};

/// Knobs of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenParams {
    /// Objects are centered in `[-e, e]^2` of the global frame.
    pub area_half_extent: f64,
    /// Inclusive range of objects per scene.
    pub object_count: [usize; 2],
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    /// Std-dev (radians) of the heading jitter around the four axis directions.
    pub yaw_jitter: f64,
    pub agent_count: usize,
    /// Ego position is drawn from `[-j, j]^2`.
    pub ego_jitter: f64,
    /// Non-ego agents are drawn from `[-s, s]^2`.
    pub agent_spread: f64,
    /// Expected points on an object at zero range.
    pub points_per_object: f64,
    /// e-folding distance of the per-object point count (meters).
    pub range_decay: f64,
    /// Uniform clutter points per square meter of sensing window.
    pub clutter_rate: f64,
    /// Each agent senses the square `[-h, h]^2` of its own frame.
    pub sensing_half_extent: f64,
    /// Probability that an object is fully hidden from a given agent.
    pub occlusion_prob: f64,
    /// Maximum IoU allowed between two placed objects.
    pub max_object_iou: f64,
    pub seed: u64,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            area_half_extent: 13.0,
            object_count: [10, 16],
            length_range: [4.2, 4.8],
            width_range: [1.8, 2.1],
            yaw_jitter: 0.05,
            agent_count: 2,
            ego_jitter: 1.0,
            agent_spread: 10.0,
            points_per_object: 250.0,
            range_decay: 20.0,
            clutter_rate: 0.06,
            sensing_half_extent: 16.0,
            occlusion_prob: 0.2,
            max_object_iou: 0.1,
            seed: 7,
        }
    }
}

fn ordered(name: &'static str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::param(name, format!("empty range {r:?}")))
    }
}

impl SceneGenParams {
    pub fn validate(&self) -> Result<()> {
        ordered("length_range", self.length_range)?;
        ordered("width_range", self.width_range)?;
        if self.length_range[0] <= 0.0 || self.width_range[0] <= 0.0 {
            return Err(Error::param("length_range/width_range", "sizes must be positive"));
        }
        if self.object_count[0] > self.object_count[1] {
            return Err(Error::param("object_count", "min exceeds max"));
        }
        if self.agent_count == 0 {
            return Err(Error::param("agent_count", "need at least one agent"));
        }
        let non_negative = [
            ("area_half_extent", self.area_half_extent),
            ("yaw_jitter", self.yaw_jitter),
            ("ego_jitter", self.ego_jitter),
            ("agent_spread", self.agent_spread),
            ("points_per_object", self.points_per_object),
            ("clutter_rate", self.clutter_rate),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.range_decay > 0.0) || !(self.sensing_half_extent > 0.0) {
            return Err(Error::param("range_decay/sensing_half_extent", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::param("occlusion_prob", "must be a probability"));
        }
        if !(0.0..1.0).contains(&self.max_object_iou) {
            return Err(Error::param("max_object_iou", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// splitmix64 finalizer over a stream of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn axis_heading(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..4) as f64 * FRAC_PI_2
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn place_objects(params: &SceneGenParams, rng: &mut ChaCha8Rng) -> Vec<BoxBev<f64>> {
    let n = rng.random_range(params.object_count[0]..=params.object_count[1]);
    let jitter = Normal::new(0.0, params.yaw_jitter.max(1e-12)).expect("finite std-dev");
    let e = params.area_half_extent;
    let mut boxes: Vec<BoxBev<f64>> = Vec::with_capacity(n);
    let mut tries = 0;
    while boxes.len() < n && tries < 200 * n.max(1) {
        tries += 1;
        let cx = if e > 0.0 { rng.random_range(-e..=e) } else { 0.0 };
        let cy = if e > 0.0 { rng.random_range(-e..=e) } else { 0.0 };
        let length = rng.random_range(params.length_range[0]..=params.length_range[1]);
        let width = rng.random_range(params.width_range[0]..=params.width_range[1]);
        let yaw = axis_heading(rng) + jitter.sample(rng);
        let Ok(b) = BoxBev::new(cx, cy, length, width, yaw) else {
            continue;
        };
        if boxes.iter().all(|o| rotated_iou(o, &b) <= params.max_object_iou) {
            boxes.push(b);
        }
    }
    boxes
}

fn place_agents(params: &SceneGenParams, rng: &mut ChaCha8Rng) -> Vec<Pose2D<f64>> {
    (0..params.agent_count)
        .map(|i| {
            let s = if i == 0 { params.ego_jitter } else { params.agent_spread };
            let x = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            let y = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            Pose2D::new(x, y, axis_heading(rng))
        })
        .collect()
}

/// Observed points of one agent, in its frame.
fn observe(
    params: &SceneGenParams,
    pose: &Pose2D<f64>,
    objects: &[BoxBev<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 2]> {
    let world = Pose2D::identity();
    let h = params.sensing_half_extent;
    let mut pts = Vec::new();
    for b in objects {
        if rng.random::<f64>() < params.occlusion_prob {
            continue;
        }
        let range = (b.cx - pose.x).hypot(b.cy - pose.y);
        let n = poisson(rng, params.points_per_object * (-range / params.range_decay).exp());
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..n {
            let u = (rng.random::<f64>() - 0.5) * b.length;
            let v = (rng.random::<f64>() - 0.5) * b.width;
            let p = [b.cx + c * u - s * v, b.cy + s * u + c * v];
            let local = transform_point(p, &world, pose);
            if local[0].abs() < h && local[1].abs() < h {
                pts.push(local);
            }
        }
    }
    let clutter = poisson(rng, params.clutter_rate * 4.0 * h * h);
    for _ in 0..clutter {
        pts.push([rng.random_range(-h..h), rng.random_range(-h..h)]);
    }
    pts
}

fn observes_any(pose: &Pose2D<f64>, points: &[[f64; 2]], objects: &[BoxBev<f64>]) -> bool {
    let world = Pose2D::identity();
    points.iter().any(|&p| {
        let w = transform_point(p, pose, &world);
        objects.iter().any(|b| b.contains(w[0], w[1]))
    })
}

fn generate_attempt<T: Real>(params: &SceneGenParams, index: usize, attempt: u64) -> Scene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, index as u64, attempt]));
    let objects = place_objects(params, &mut rng);
    let poses = place_agents(params, &mut rng);
    let mut agents = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut points = observe(params, pose, &objects, &mut rng);
        // Redraw observations until the agent sees something it could label.
        let mut redraws = 0;
        while !objects.is_empty() && !observes_any(pose, &points, &objects) && redraws < 32 {
            points = observe(params, pose, &objects, &mut rng);
            redraws += 1;
        }
        agents.push(Agent {
            agent_id: i as u32,
            pose: Pose2D {
                x: T::lit(pose.x),
                y: T::lit(pose.y),
                heading: T::lit(pose.heading),
            },
            points: points.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect(),
            sparse_label: None,
        });
    }
    Scene {
        scene_id: if attempt == 0 {
            format!("scene-{index:06}")
        } else {
            format!("scene-{index:06}-r{attempt}")
        },
        agents,
        gt_boxes: objects
            .iter()
            .enumerate()
            .map(|(k, b)| GtBox {
                bbox: b.cast(),
                object_id: k as u32,
            })
            .collect(),
    }
}

/// Deterministic scene for `(params.seed, index)`, without sparse labels.
pub fn generate_scene<T: Real>(params: &SceneGenParams, index: usize) -> Scene<T> {
    generate_attempt(params, index, 0)
}

/// Sets every agent's sparse label to an object it observes, chosen uniformly.
pub fn sample_sparse_labels<T: Real>(scene: &Scene<T>, seed: u64) -> Result<Scene<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5_9A25E]));
    let world = Pose2D::identity();
    let mut out = scene.clone();
    for agent in &mut out.agents {
        let observed: Vec<u32> = scene
            .gt_boxes
            .iter()
            .filter(|g| {
                agent.points.iter().any(|&p| {
                    let w = transform_point(p, &agent.pose, &world);
                    g.bbox.contains(w[0], w[1])
                })
            })
            .map(|g| g.object_id)
            .collect();
        if observed.is_empty() {
            return Err(Error::NoObservedObject {
                scene_id: scene.scene_id.clone(),
                agent_id: agent.agent_id,
            });
        }
        agent.sparse_label = Some(observed[rng.random_range(0..observed.len())]);
    }
    Ok(out)
}

/// `n` sparse-labeled scenes with indices `first_index..first_index + n`.
///
/// A scene in which some agent observes no object is regenerated with the
/// next attempt number, so indices stay stable.
pub fn generate_corpus<T: Real>(params: &SceneGenParams, first_index: usize, n: usize) -> Result<Vec<Scene<T>>> {
    params.validate()?;
    let mut out = Vec::with_capacity(n);
    for index in first_index..first_index + n {
        let mut attempt = 0u64;
        loop {
            let scene = generate_attempt::<T>(params, index, attempt);
            let label_seed = mix_seed(&[params.seed, index as u64, attempt, 1]);
            match sample_sparse_labels(&scene, label_seed) {
                Ok(s) => {
                    out.push(s);
                    break;
                }
                Err(e) if attempt < 64 => {
                    log::debug!("resampling: {e}");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}
