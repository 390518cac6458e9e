//! File-level commands: corpus generation, training, mining and evaluation.
//! Every artifact is a pure function of the config and its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::detector::{load_checkpoint, save_checkpoint, DetectorState};
use crate::error::{Error, Result};
use crate::eval::{average_precision, postprocess, pseudo_label_quality, ApOutcome, EvalConfig, QualityReport};
use crate::geometry::{AnchorGrid, BoxBev};
use crate::mining::{load_dump, save_dump};
use crate::scenes::{corpus_stats, generate_corpus, load_scenes, save_scenes, CorpusStats, Scene};
use crate::trainer::{
    mine_corpus, pretrain_static_teacher, train_with_log, Ablation, InferenceModel, IterationRecord, TrainingData,
};

const MANIFEST_FORMAT: &str = "dualteach-corpus-v1";
const METRICS_FORMAT: &str = "dualteach-metrics-v1";
const INTERPOLATION: &str = "all-point (precision envelope over a global score ranking)";

/// A config with its relative paths resolved against `base`.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn new(config: RunConfig, base: &Path) -> Result<Self> {
        config.validate()?;
        let data_dir = base.join(&config.paths.data_dir);
        let out_dir = base.join(&config.paths.out_dir);
        Ok(Workspace {
            config,
            data_dir,
            out_dir,
        })
    }

    pub fn load(config_path: impl AsRef<Path>) -> Result<Self> {
        let (config, base) = RunConfig::load(config_path)?;
        Self::new(config, &base)
    }

    pub fn grid(&self) -> AnchorGrid<f64> {
        self.config.grid.build().expect("validated grid")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir.join("train.jsonl")
    }

    pub fn val_path(&self) -> PathBuf {
        self.data_dir.join("val.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.json")
    }

    pub fn static_path(&self) -> PathBuf {
        self.out_dir.join("static_teacher.json")
    }

    pub fn run_dir(&self, ablation: Ablation) -> PathBuf {
        self.out_dir.join(ablation.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub sha256: String,
    pub first_index: usize,
    pub stats: CorpusStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub scenes: crate::scenes::SceneGenParams,
    pub train: SplitInfo,
    pub val: SplitInfo,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.inner().line(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Writes the effective config next to the run outputs.
fn echo_config(ws: &Workspace, dir: &Path) -> Result<()> {
    let text = ws.config.to_toml_string();
    log::info!("effective config (run id {}):\n{text}", ws.config.run_id());
    let path = dir.join("effective_config.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Generates the train and validation corpora and their manifest.
pub fn cmd_gen_data(ws: &Workspace) -> Result<CorpusManifest> {
    let cfg = &ws.config;
    create_dir(&ws.data_dir)?;
    echo_config(ws, &ws.data_dir)?;
    let mut infos = Vec::new();
    for (path, first, n) in [
        (ws.train_path(), 0, cfg.data.train_scenes),
        (ws.val_path(), cfg.data.val_first_index, cfg.data.val_scenes),
    ] {
        let scenes: Vec<Scene<f64>> = generate_corpus(&cfg.scenes, first, n)?;
        save_scenes(&path, &scenes)?;
        let stats = corpus_stats(&scenes);
        log::info!(
            "{}: {} scenes, {} objects, sparse ratio {:.3}",
            path.display(),
            stats.scenes,
            stats.objects,
            stats.sparse_ratio
        );
        infos.push(SplitInfo {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_file(&path)?,
            first_index: first,
            stats,
        });
    }
    let val = infos.pop().unwrap();
    let train = infos.pop().unwrap();
    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.into(),
        scenes: cfg.scenes.clone(),
        train,
        val,
    };
    write_json(&ws.manifest_path(), &manifest)?;
    Ok(manifest)
}

/// Loads one split, checking it against the manifest.
pub fn load_split(ws: &Workspace, split: Split) -> Result<Vec<Scene<f64>>> {
    let manifest: CorpusManifest = read_json(&ws.manifest_path())?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Config(format!("unknown corpus format `{}`", manifest.format)));
    }
    let (path, info) = match split {
        Split::Train => (ws.train_path(), &manifest.train),
        Split::Val => (ws.val_path(), &manifest.val),
    };
    let found = sha256_file(&path)?;
    if found != info.sha256 {
        return Err(Error::ConfigHashMismatch {
            expected: info.sha256.clone(),
            found,
        });
    }
    let scenes = load_scenes(&path)?;
    if scenes.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(scenes)
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub ablation: Ablation,
    /// Pretrain and save the static teacher instead of loading it.
    pub pretrain_static: bool,
    /// Periodic student and dynamic-teacher snapshots; 0 keeps only the final ones.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub ablation: String,
    pub iterations: usize,
    pub i_refine: usize,
    pub final_loss: Option<f64>,
    pub max_cell_violations: usize,
    pub dt_optimizer_writes: u64,
}

/// Trains one ablation, writing checkpoints and the run log under
/// `out_dir/<ablation>/`.
pub fn cmd_train(ws: &Workspace, opts: TrainOptions) -> Result<TrainSummary> {
    let grid = ws.grid();
    let corpus = load_split(ws, Split::Train)?;
    let data = TrainingData::new(&corpus, &grid);
    create_dir(&ws.out_dir)?;
    let static_teacher = if opts.pretrain_static {
        log::info!(
            "pretraining static teacher for {} iterations",
            ws.config.trainer.pretrain_iterations
        );
        let st = pretrain_static_teacher(&data, &ws.config.trainer)?;
        save_checkpoint(ws.static_path(), &st, &grid)?;
        st
    } else {
        load_checkpoint(ws.static_path(), &grid)?
    };
    let config = ws.config.trainer.clone().with_ablation(opts.ablation);
    let dir = ws.run_dir(opts.ablation);
    let snapshots = dir.join("checkpoints");
    create_dir(&dir)?;
    echo_config(ws, &dir)?;
    if opts.checkpoint_every > 0 {
        create_dir(&snapshots)?;
    }
    let log_path = dir.join("run_log.jsonl");
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut sink = |r: &IterationRecord, s: &DetectorState<f64>, dt: &DetectorState<f64>| -> Result<()> {
        serde_json::to_writer(&mut log_file, r)?;
        log_file.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        let done = r.iter + 1;
        if opts.checkpoint_every > 0 && done.is_multiple_of(opts.checkpoint_every) {
            save_checkpoint(snapshots.join(format!("student_{done:06}.json")), s, &grid)?;
            save_checkpoint(snapshots.join(format!("dynamic_teacher_{done:06}.json")), dt, &grid)?;
        }
        if done.is_multiple_of(500) {
            log::info!("{} iter {done}: loss {:.4}", opts.ablation.name(), r.loss);
        }
        Ok(())
    };
    let run = train_with_log(&data, &static_teacher, &config, &mut sink)?;
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(dir.join("student.json"), &run.student, &grid)?;
    save_checkpoint(dir.join("dynamic_teacher.json"), &run.dynamic_teacher, &grid)?;
    let summary = TrainSummary {
        run_id: ws.config.run_id(),
        ablation: opts.ablation.name().into(),
        iterations: run.log.len(),
        i_refine: config.i_refine(),
        final_loss: run.log.last().map(|r| r.loss),
        max_cell_violations: run.log.iter().map(|r| r.cell_violations).max().unwrap_or(0),
        dt_optimizer_writes: run.dynamic_teacher.optimizer_writes,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Ground truth of each scene in the ego frame.
pub fn ego_ground_truth(scenes: &[Scene<f64>]) -> Vec<Vec<BoxBev<f64>>> {
    scenes
        .iter()
        .map(|s| s.gt_in_ego().into_iter().map(|(_, b)| b).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineRow {
    pub sigma_st: f64,
    /// Main mining only.
    pub main: QualityReport,
    /// Main plus supplement mining from the dynamic teacher.
    pub with_supplement: QualityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub run_id: String,
    pub ablation: String,
    pub split: Split,
    pub quality_iou: f64,
    pub sweep: Vec<MineRow>,
}

/// Mines a split with the trained teachers of one run. The dump holds the
/// refinement-stage labels (high threshold, supplement, neighbors); the
/// summary sweeps the static threshold.
pub fn cmd_mine(ws: &Workspace, ablation: Ablation, split: Split) -> Result<MineSummary> {
    let grid = ws.grid();
    let corpus = load_split(ws, split)?;
    let data = TrainingData::new(&corpus, &grid);
    let gts = ego_ground_truth(&corpus);
    let st = load_checkpoint(ws.static_path(), &grid)?;
    let dir = ws.run_dir(ablation);
    let dt = load_checkpoint(dir.join("dynamic_teacher.json"), &grid)?;
    let tcfg = &ws.config.trainer;
    let q_iou = ws.config.eval.quality_iou;
    let bs = tcfg.batch_size;
    let mut rows = Vec::new();
    for &sigma in &ws.config.mine.sweep {
        let main = mine_corpus(&data, &st, None, &tcfg.mining, sigma, bs, false);
        let both = mine_corpus(&data, &st, Some(&dt), &tcfg.mining, sigma, bs, false);
        rows.push(MineRow {
            sigma_st: sigma,
            main: pseudo_label_quality(&main, &gts, q_iou),
            with_supplement: pseudo_label_quality(&both, &gts, q_iou),
        });
    }
    let mine_dir = dir.join("mine");
    create_dir(&mine_dir)?;
    let dump = mine_corpus(&data, &st, Some(&dt), &tcfg.mining, tcfg.mining.sigma_st_high, bs, true);
    save_dump(mine_dir.join("dump.jsonl"), &dump)?;
    let summary = MineSummary {
        run_id: ws.config.run_id(),
        ablation: ablation.name().into(),
        split,
        quality_iou: q_iou,
        sweep: rows,
    };
    write_json(&mine_dir.join("mine_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub iou_threshold: f64,
    #[serde(flatten)]
    pub outcome: ApOutcome,
}

/// AP of `state` over `scenes` at every configured IoU threshold.
pub fn evaluate_model(
    scenes: &[Scene<f64>],
    grid: &AnchorGrid<f64>,
    state: &DetectorState<f64>,
    config: &EvalConfig,
) -> Vec<ApRow> {
    let data = TrainingData::new(scenes, grid);
    let gts = ego_ground_truth(scenes);
    let results: Vec<_> = (0..data.scenes.len())
        .map(|s| postprocess(&data.predict(s, state), grid, config))
        .collect();
    config
        .iou_thresholds
        .iter()
        .map(|&t| ApRow {
            iou_threshold: t,
            outcome: average_precision(&results, &gts, t),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub run_id: String,
    pub ablation: String,
    pub model: InferenceModel,
    pub interpolation: String,
    pub scenes: usize,
    pub ap: Vec<ApRow>,
    /// Pseudo-label quality of a mining dump, when one was scored.
    pub dump_quality: Option<QualityReport>,
    pub config: RunConfig,
}

/// Scores a dump against the ground truth of the split it was mined from.
pub fn score_dump(ws: &Workspace, dump_path: &Path, split: Split) -> Result<QualityReport> {
    let dumps = load_dump(dump_path)?;
    let corpus = load_split(ws, split)?;
    let by_id: BTreeMap<&str, &Scene<f64>> = corpus.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let gts = dumps
        .iter()
        .map(|d| {
            by_id
                .get(d.scene_id.as_str())
                .map(|s| s.gt_in_ego().into_iter().map(|(_, b)| b).collect())
                .ok_or_else(|| Error::Config(format!("dump scene `{}` is not in the {split:?} split", d.scene_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pseudo_label_quality(&dumps, &gts, ws.config.eval.quality_iou))
}

/// Evaluates one run on the validation split and refreshes the ablation table.
pub fn cmd_eval(ws: &Workspace, ablation: Ablation, dump: Option<(&Path, Split)>) -> Result<MetricsReport> {
    let grid = ws.grid();
    let val = load_split(ws, Split::Val)?;
    let dir = ws.run_dir(ablation);
    let model = ws.config.trainer.inference;
    let file = match model {
        InferenceModel::DynamicTeacher => "dynamic_teacher.json",
        InferenceModel::Student => "student.json",
    };
    let state = load_checkpoint(dir.join(file), &grid)?;
    let dump_quality = dump.map(|(p, split)| score_dump(ws, p, split)).transpose()?;
    let report = MetricsReport {
        format: METRICS_FORMAT.into(),
        run_id: ws.config.run_id(),
        ablation: ablation.name().into(),
        model,
        interpolation: INTERPOLATION.into(),
        scenes: val.len(),
        ap: evaluate_model(&val, &grid, &state, &ws.config.eval),
        dump_quality,
        config: ws.config.clone(),
    };
    write_json(&dir.join("metrics.json"), &report)?;
    write_ablation_table(ws)?;
    Ok(report)
}

/// `out_dir/ablation.csv` from every run with a metrics report, in canonical
/// ablation order.
pub fn write_ablation_table(ws: &Workspace) -> Result<PathBuf> {
    let mut reports = Vec::new();
    for ab in Ablation::ALL {
        let path = ws.run_dir(ab).join("metrics.json");
        if path.exists() {
            reports.push(read_json::<MetricsReport>(&path)?);
        }
    }
    let path = ws.out_dir.join("ablation.csv");
    fs::write(&path, ablation_csv(&reports)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn ablation_csv(reports: &[MetricsReport]) -> String {
    let thresholds: Vec<f64> = reports
        .first()
        .map(|r| r.ap.iter().map(|a| a.iou_threshold).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("ablation".to_string())
        .chain(thresholds.iter().map(|t| format!("ap@{t}")))
        .collect();
    w.write_record(&header).expect("in-memory write");
    for r in reports {
        let row: Vec<String> = std::iter::once(r.ablation.clone())
            .chain(thresholds.iter().map(|t| {
                r.ap.iter()
                    .find(|a| a.iou_threshold == *t)
                    .map(|a| format!("{:.4}", a.outcome.ap))
                    .unwrap_or_default()
            }))
            .collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
