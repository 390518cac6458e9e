//! Staged teacher-student training: static-teacher pretraining on sparse
//! labels, a warm-up stage mining the static teacher at a low threshold, and
//! a refinement stage that adds supplement mining from the EMA teacher.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    detect_head, fused_features, head_backward, optimizer_step, supervised_loss, Adam, AdamConfig, DetectorState,
    HeadLayout, LossWeights, Patches, Prediction,
};
use crate::error::{Error, Result};
use crate::geometry::AnchorGrid;
use crate::mining::{
    assign_sparse_anchor, dynamic_threshold, merge_labels, mfm, nas, sfm, LabelSet, LabelSource, MiningConfig,
    PositiveSet, SceneDump, SparseLabel,
};
use crate::scalar::Real;
use crate::scenes::Scene;

/// Switches for ablation runs. All off is the full method.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    /// No static-teacher mining: sparse labels only.
    pub disable_mfm: bool,
    pub disable_sfm: bool,
    pub disable_nas: bool,
    /// Mine the static teacher at the high threshold in both stages.
    pub fixed_high_sigma: bool,
    /// Two separately trained phases instead of one staged run.
    pub disable_stt: bool,
}

/// Named rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    SparseOnly,
    MfmOnly,
    MfmNas,
    MfmSfm,
    NoStt,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::SparseOnly,
        Ablation::MfmOnly,
        Ablation::MfmNas,
        Ablation::MfmSfm,
        Ablation::Full,
        Ablation::NoStt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SparseOnly => "sparse-only",
            Ablation::MfmOnly => "mfm-only",
            Ablation::MfmNas => "mfm-nas",
            Ablation::MfmSfm => "mfm-sfm",
            Ablation::NoStt => "no-stt",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn overrides(self) -> StageOverrides {
        let off = StageOverrides::default();
        match self {
            Ablation::Full => off,
            Ablation::SparseOnly => StageOverrides {
                disable_mfm: true,
                disable_sfm: true,
                disable_nas: true,
                ..off
            },
            Ablation::MfmOnly => StageOverrides {
                disable_sfm: true,
                disable_nas: true,
                fixed_high_sigma: true,
                ..off
            },
            Ablation::MfmNas => StageOverrides {
                disable_sfm: true,
                fixed_high_sigma: true,
                ..off
            },
            Ablation::MfmSfm => StageOverrides {
                disable_nas: true,
                ..off
            },
            Ablation::NoStt => StageOverrides {
                disable_stt: true,
                ..off
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceModel {
    #[default]
    DynamicTeacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mining: MiningConfig,
    pub alpha: f64,
    pub i_max: usize,
    /// Defaults to half of `i_max`.
    pub i_refine: Option<usize>,
    pub batch_size: usize,
    pub pretrain_iterations: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub seed: u64,
    pub overrides: StageOverrides,
    pub inference: InferenceModel,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mining: MiningConfig::default(),
            alpha: 0.999,
            i_max: 3000,
            i_refine: None,
            batch_size: 8,
            pretrain_iterations: 1500,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            seed: 11,
            overrides: StageOverrides::default(),
            inference: InferenceModel::default(),
        }
    }
}

impl TrainerConfig {
    pub fn i_refine(&self) -> usize {
        self.i_refine.unwrap_or(self.i_max / 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.i_max == 0 {
            return Err(Error::param("i_max", "must be positive"));
        }
        let r = self.i_refine();
        if r == 0 || r > self.i_max {
            return Err(Error::param(
                "i_refine",
                format!("need 0 < i_refine <= i_max, got {r} with i_max {}", self.i_max),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::param("adam.lr", "must be positive"));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.overrides = ablation.overrides();
        self
    }
}

/// Scene inputs that stay fixed during training.
#[derive(Clone, Debug)]
pub struct PreparedScene<T> {
    pub scene_id: String,
    pub patches: Patches<T>,
    /// Ego-frame sparse labels, one per labeled object.
    pub sparse: Vec<SparseLabel<T>>,
    /// One anchor per labeling agent, for the adaptive threshold.
    pub agent_sparse_anchors: Vec<usize>,
}

/// A corpus ready for training: grid, layout and per-scene fused inputs.
#[derive(Clone, Debug)]
pub struct TrainingData<T> {
    pub grid: AnchorGrid<T>,
    pub layout: HeadLayout,
    pub scenes: Vec<PreparedScene<T>>,
}

impl<T: Real> TrainingData<T> {
    pub fn new(corpus: &[Scene<T>], grid: &AnchorGrid<T>) -> Self {
        let layout = HeadLayout::for_grid(grid);
        let assign = |b| match assign_sparse_anchor(&b, grid) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("sparse label dropped: {e}");
                None
            }
        };
        let scenes = corpus
            .iter()
            .map(|s| PreparedScene {
                scene_id: s.scene_id.clone(),
                patches: Patches::from_features(&fused_features(s, grid), layout.kernel),
                sparse: s
                    .sparse_in_ego()
                    .into_iter()
                    .filter_map(|(_, bbox)| assign(bbox).map(|anchor| SparseLabel { anchor, bbox }))
                    .collect(),
                agent_sparse_anchors: s.agent_sparse_in_ego().into_iter().filter_map(assign).collect(),
            })
            .collect();
        TrainingData {
            grid: grid.clone(),
            layout,
            scenes,
        }
    }

    pub fn predict(&self, scene: usize, state: &DetectorState<T>) -> Prediction<T> {
        detect_head(&self.scenes[scene].patches, state)
    }
}

/// Moves the dynamic teacher toward the student. `iter` is 1-based; the
/// running-mean ramp `1 - 1/iter` is used until it reaches `alpha`.
pub fn ema_update<T: Real>(theta_dt: &mut DetectorState<T>, theta_s: &DetectorState<T>, iter: u64, alpha: f64) {
    assert!(iter >= 1, "EMA iteration is 1-based");
    assert_eq!(theta_dt.layout, theta_s.layout, "EMA layouts differ");
    let ramp = 1.0 - 1.0 / iter as f64;
    let keep = if ramp < alpha { ramp } else { alpha };
    let (k, m) = (T::lit(keep), T::lit(1.0 - keep));
    for (d, &s) in theta_dt.params.iter_mut().zip(&theta_s.params) {
        *d = k * *d + m * s;
    }
    theta_dt.ema_writes += 1;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    WarmUp,
    Refinement,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub sparse: usize,
    pub pseudo_main: usize,
    pub pseudo_supp: usize,
    pub neighbor: usize,
}

impl SourceCounts {
    fn add(&mut self, labels: &LabelSet<impl Real>) {
        self.sparse += labels.count(LabelSource::Sparse);
        self.pseudo_main += labels.count(LabelSource::PseudoMain);
        self.pseudo_supp += labels.count(LabelSource::PseudoSupp);
        self.neighbor += labels.count(LabelSource::Neighbor);
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0-based within the run.
    pub iter: usize,
    pub stage: Stage,
    /// 1 for a staged run and phase one of a two-phase run, 2 for phase two.
    pub phase: u8,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_dir: f64,
    pub sigma_dt: Option<f64>,
    pub sigma_dt_fallback: bool,
    pub counts: SourceCounts,
    /// Grid cells claimed by both main and supplement mining; must stay 0.
    pub cell_violations: usize,
    pub dt_optimizer_writes: u64,
    pub dt_ema_writes: u64,
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub student: DetectorState<T>,
    pub dynamic_teacher: DetectorState<T>,
    pub static_teacher: DetectorState<T>,
    pub log: Vec<IterationRecord>,
    pub inference: InferenceModel,
}

/// The model used for evaluation: the dynamic teacher unless configured
/// otherwise.
pub fn select_inference_model<T: Real>(run: &TrainRun<T>) -> &DetectorState<T> {
    match run.inference {
        InferenceModel::DynamicTeacher => &run.dynamic_teacher,
        InferenceModel::Student => &run.student,
    }
}

/// Batch of scene indices for iteration `iter` of a run seeded with `seed`.
fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    let mut v = sample(rng, n, batch.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Accumulates the batch gradient and loss; each scene contributes its own
/// normalized loss, and the batch is averaged.
fn batch_step<T: Real>(
    data: &TrainingData<T>,
    batch: &[usize],
    labels: &[LabelSet<T>],
    student: &mut DetectorState<T>,
    adam: &mut Adam<T>,
    weights: &LossWeights,
    iter: usize,
) -> Result<[f64; 4]> {
    let mut grad = vec![T::zero(); student.params.len()];
    let mut sums = [0.0f64; 4];
    for (&s, l) in batch.iter().zip(labels) {
        let pred = data.predict(s, student);
        let (loss, g) = supervised_loss(&pred, l, &data.grid, weights);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        for (a, b) in grad
            .iter_mut()
            .zip(head_backward(&data.scenes[s].patches, &g, data.layout))
        {
            *a += b;
        }
        sums[0] += loss.total;
        sums[1] += loss.cls;
        sums[2] += loss.reg;
        sums[3] += loss.dir;
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    for g in &mut grad {
        *g *= inv;
    }
    optimizer_step(student, &grad, adam).map_err(|e| match e {
        Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { iteration: iter },
        other => other,
    })?;
    Ok(sums.map(|v| v / batch.len() as f64))
}

/// Sparse-label-only training of the static teacher.
pub fn pretrain_static_teacher<T: Real>(data: &TrainingData<T>, config: &TrainerConfig) -> Result<DetectorState<T>> {
    config.validate()?;
    let mut state = DetectorState::init(data.layout, crate::scenes::mix_seed(&[config.seed, 0x57]));
    if config.pretrain_iterations == 0 {
        return Ok(state);
    }
    if data.scenes.is_empty() {
        return Err(Error::EmptyCorpus("pretraining corpus".into()));
    }
    let mut adam = Adam::new(config.adam.clone(), state.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::scenes::mix_seed(&[config.seed, 0x58]));
    let mut averaged = state.clone();
    for iter in 0..config.pretrain_iterations {
        let batch = batch_indices(&mut rng, data.scenes.len(), config.batch_size);
        let labels: Vec<LabelSet<T>> = batch
            .iter()
            .map(|&s| merge_labels(&data.scenes[s].sparse, &PositiveSet::default(), &[], &data.grid, true))
            .collect();
        batch_step(data, &batch, &labels, &mut state, &mut adam, &config.loss, iter)?;
        ema_update(&mut averaged, &state, iter as u64 + 1, config.alpha);
    }
    Ok(DetectorState {
        optimizer_writes: 0,
        ema_writes: 0,
        ..averaged
    })
}

/// What one phase of training mines.
struct PhasePlan<'a, T> {
    iterations: usize,
    /// Iterations before this index are warm-up.
    i_refine: usize,
    /// Teacher for supplement mining; `None` means the run's own EMA teacher.
    frozen_supplement: Option<&'a DetectorState<T>>,
    phase: u8,
    first_iter: usize,
}

struct PhaseOutput<T> {
    student: DetectorState<T>,
    dynamic_teacher: DetectorState<T>,
    log: Vec<IterationRecord>,
}

fn run_phase<T: Real>(
    data: &TrainingData<T>,
    static_preds: &[Prediction<T>],
    config: &TrainerConfig,
    plan: PhasePlan<'_, T>,
    log_sink: &mut TrainSink<'_, T>,
) -> Result<PhaseOutput<T>> {
    let ov = &config.overrides;
    let m = &config.mining;
    let grid = &data.grid;
    let (tau, tau_nei) = (T::lit(m.tau), T::lit(m.tau_nei));
    let sigma_low = if ov.fixed_high_sigma {
        m.sigma_st_high
    } else {
        m.sigma_st_low
    };
    let sigma_high = m.sigma_st_high;
    // Static-teacher mining never changes, so it is computed once per scene.
    let mfm_cache = |sigma: f64| -> Vec<PositiveSet<T>> {
        static_preds
            .iter()
            .map(|p| {
                if ov.disable_mfm {
                    PositiveSet::default()
                } else {
                    mfm(p, grid, T::lit(sigma), tau)
                }
            })
            .collect()
    };
    let r_st_low = mfm_cache(sigma_low);
    let r_st_high = mfm_cache(sigma_high);

    let seed = crate::scenes::mix_seed(&[config.seed, 0x71, u64::from(plan.phase)]);
    let mut student = DetectorState::init(data.layout, seed);
    let mut dynamic_teacher = student.clone();
    let mut adam = Adam::new(config.adam.clone(), student.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::scenes::mix_seed(&[seed, 1]));
    let mut log = Vec::with_capacity(plan.iterations);

    for local in 0..plan.iterations {
        let iter = plan.first_iter + local;
        let batch = batch_indices(&mut rng, data.scenes.len(), config.batch_size);
        let refining = local >= plan.i_refine;
        let supplement = refining && !ov.disable_sfm;
        let r_st_all = if refining { &r_st_high } else { &r_st_low };

        let mut sigma_dt = None;
        let mut fallback = false;
        let mut r_dt: Vec<PositiveSet<T>> = vec![PositiveSet::default(); batch.len()];
        let mut cell_violations = 0;
        if supplement {
            let teacher = plan.frozen_supplement.unwrap_or(&dynamic_teacher);
            let preds: Vec<Prediction<T>> = batch.iter().map(|&s| data.predict(s, teacher)).collect();
            let refs: Vec<&Prediction<T>> = preds.iter().collect();
            let anchors: Vec<Vec<usize>> = batch
                .iter()
                .map(|&s| data.scenes[s].agent_sparse_anchors.clone())
                .collect();
            let outcome = dynamic_threshold(&refs, &anchors, T::lit(m.sigma_st_high));
            sigma_dt = Some(outcome.sigma.as_f64());
            fallback = outcome.fallback;
            for (k, &s) in batch.iter().enumerate() {
                r_dt[k] = sfm(&preds[k], grid, outcome.sigma, tau, &r_st_all[s]);
                let main: HashSet<usize> = r_st_all[s].anchors().map(|a| grid.cell_of_anchor(a)).collect();
                cell_violations += r_dt[k]
                    .anchors()
                    .filter(|&a| main.contains(&grid.cell_of_anchor(a)))
                    .count();
            }
        }

        let mut counts = SourceCounts::default();
        let labels: Vec<LabelSet<T>> = batch
            .iter()
            .zip(&r_dt)
            .map(|(&s, dt)| {
                let positives = r_st_all[s].union(dt);
                let neighbors = if ov.disable_nas {
                    Vec::new()
                } else {
                    nas(&positives, grid, tau_nei)
                };
                let l = merge_labels(
                    &data.scenes[s].sparse,
                    &positives,
                    &neighbors,
                    grid,
                    m.pseudo_regression,
                );
                counts.add(&l);
                l
            })
            .collect();

        let [loss, cls, reg, dir] = batch_step(data, &batch, &labels, &mut student, &mut adam, &config.loss, iter)?;
        ema_update(&mut dynamic_teacher, &student, local as u64 + 1, config.alpha);

        let record = IterationRecord {
            iter,
            stage: if refining { Stage::Refinement } else { Stage::WarmUp },
            phase: plan.phase,
            loss,
            loss_cls: cls,
            loss_reg: reg,
            loss_dir: dir,
            sigma_dt,
            sigma_dt_fallback: fallback,
            counts,
            cell_violations,
            dt_optimizer_writes: dynamic_teacher.optimizer_writes,
            dt_ema_writes: dynamic_teacher.ema_writes,
        };
        log_sink(&record, &student, &dynamic_teacher)?;
        log.push(record);
    }
    Ok(PhaseOutput {
        student,
        dynamic_teacher,
        log,
    })
}

/// Runs the configured training schedule with a frozen static teacher.
pub fn train<T: Real>(
    data: &TrainingData<T>,
    static_teacher: &DetectorState<T>,
    config: &TrainerConfig,
) -> Result<TrainRun<T>> {
    train_with_log(data, static_teacher, config, &mut |_, _, _| Ok(()))
}

/// Per-iteration callback: the record, then the student and dynamic teacher
/// after that iteration's updates.
pub type TrainSink<'a, T> = dyn FnMut(&IterationRecord, &DetectorState<T>, &DetectorState<T>) -> Result<()> + 'a;

/// [`train`], handing every iteration record to `log_sink` as it completes.
pub fn train_with_log<T: Real>(
    data: &TrainingData<T>,
    static_teacher: &DetectorState<T>,
    config: &TrainerConfig,
    log_sink: &mut TrainSink<'_, T>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    if data.scenes.is_empty() {
        return Err(Error::EmptyCorpus("training corpus".into()));
    }
    if static_teacher.layout != data.layout {
        return Err(Error::LayoutMismatch {
            expected: data.layout.num_params(),
            found: static_teacher.params.len(),
        });
    }
    let static_preds: Vec<Prediction<T>> = (0..data.scenes.len())
        .map(|s| data.predict(s, static_teacher))
        .collect();
    let i_refine = config.i_refine();

    let out = if config.overrides.disable_stt {
        // Phase one: low-threshold main mining with neighbors only.
        let mut first = config.clone();
        first.overrides.disable_sfm = true;
        let p1 = run_phase(
            data,
            &static_preds,
            &first,
            PhasePlan {
                iterations: i_refine,
                i_refine,
                frozen_supplement: None,
                phase: 1,
                first_iter: 0,
            },
            log_sink,
        )?;
        // Phase two: a fresh student, high-threshold main mining, and
        // supplement mining from the frozen phase-one teacher.
        let mut p2 = run_phase(
            data,
            &static_preds,
            config,
            PhasePlan {
                iterations: config.i_max - i_refine,
                i_refine: 0,
                frozen_supplement: Some(&p1.dynamic_teacher),
                phase: 2,
                first_iter: i_refine,
            },
            log_sink,
        )?;
        let mut log = p1.log;
        log.append(&mut p2.log);
        PhaseOutput { log, ..p2 }
    } else {
        run_phase(
            data,
            &static_preds,
            config,
            PhasePlan {
                iterations: config.i_max,
                i_refine,
                frozen_supplement: None,
                phase: 1,
                first_iter: 0,
            },
            log_sink,
        )?
    };
    Ok(TrainRun {
        student: out.student,
        dynamic_teacher: out.dynamic_teacher,
        static_teacher: static_teacher.clone(),
        log: out.log,
        inference: config.inference,
    })
}

/// One-shot mining over a corpus in fixed batches of `batch_size` scenes:
/// main mining at `sigma_st`, supplement mining from `dynamic_teacher` with a
/// per-batch adaptive threshold when one is given, optional neighbor
/// sampling, then the merge with sparse labels.
pub fn mine_corpus<T: Real>(
    data: &TrainingData<T>,
    static_teacher: &DetectorState<T>,
    dynamic_teacher: Option<&DetectorState<T>>,
    mining: &MiningConfig,
    sigma_st: f64,
    batch_size: usize,
    neighbors: bool,
) -> Vec<SceneDump> {
    let grid = &data.grid;
    let tau = T::lit(mining.tau);
    let mut out = Vec::with_capacity(data.scenes.len());
    let all: Vec<usize> = (0..data.scenes.len()).collect();
    for batch in all.chunks(batch_size.max(1)) {
        let r_st: Vec<PositiveSet<T>> = batch
            .iter()
            .map(|&s| mfm(&data.predict(s, static_teacher), grid, T::lit(sigma_st), tau))
            .collect();
        let mut r_dt = vec![PositiveSet::default(); batch.len()];
        let mut sigma_dt = None;
        if let Some(dt) = dynamic_teacher {
            let preds: Vec<Prediction<T>> = batch.iter().map(|&s| data.predict(s, dt)).collect();
            let refs: Vec<&Prediction<T>> = preds.iter().collect();
            let anchors: Vec<Vec<usize>> = batch
                .iter()
                .map(|&s| data.scenes[s].agent_sparse_anchors.clone())
                .collect();
            let sigma = dynamic_threshold(&refs, &anchors, T::lit(mining.sigma_st_high)).sigma;
            sigma_dt = Some(sigma);
            for k in 0..batch.len() {
                r_dt[k] = sfm(&preds[k], grid, sigma, tau, &r_st[k]);
            }
        }
        for (k, &s) in batch.iter().enumerate() {
            let positives = r_st[k].union(&r_dt[k]);
            let nb = if neighbors {
                nas(&positives, grid, T::lit(mining.tau_nei))
            } else {
                Vec::new()
            };
            let labels = merge_labels(&data.scenes[s].sparse, &positives, &nb, grid, mining.pseudo_regression);
            out.push(SceneDump::from_labels(&data.scenes[s].scene_id, sigma_dt, &labels));
        }
    }
    out
}

pub fn write_run_log(path: impl AsRef<Path>, log: &[IterationRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
