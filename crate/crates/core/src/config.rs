//! Declarative run configuration, read from TOML with every omitted field
//! filled from the defaults below.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::{AnchorGrid, AnchorTemplate};
use crate::scenes::SceneGenParams;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub height_cells: usize,
    pub width_cells: usize,
    pub cell_size: f64,
    pub templates: Vec<AnchorTemplate<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            height_cells: 32,
            width_cells: 32,
            cell_size: 1.0,
            templates: vec![
                AnchorTemplate {
                    length: 4.5,
                    width: 2.0,
                    yaw: 0.0,
                },
                AnchorTemplate {
                    length: 4.5,
                    width: 2.0,
                    yaw: std::f64::consts::FRAC_PI_2,
                },
            ],
        }
    }
}

impl GridConfig {
    /// Ego-centered grid.
    pub fn build(&self) -> Result<AnchorGrid<f64>> {
        AnchorGrid::centered(
            self.height_cells,
            self.width_cells,
            self.cell_size,
            self.templates.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Scene index of the first validation scene; keeps the splits disjoint.
    pub val_first_index: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 300,
            val_scenes: 100,
            val_first_index: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus directory (train/val JSONL and manifest).
    pub data_dir: PathBuf,
    /// Checkpoints, logs and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    /// Static-teacher thresholds tabulated by `mine`.
    pub sweep: Vec<f64>,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            sweep: vec![0.15, 0.2, 0.25, 0.3],
        }
    }
}

/// Everything one command needs. The default is the seeded benchmark.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenes: SceneGenParams,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub mine: MineConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.grid.build()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        if self.mine.sweep.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
            return Err(Error::param("mine.sweep", "thresholds must lie in (0, 1)"));
        }
        Ok(())
    }

    /// The effective config, defaults filled in.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable identifier of the effective config.
    pub fn run_id(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = RunConfig::default();
        let m = &c.trainer.mining;
        assert_eq!(
            (m.sigma_st_low, m.sigma_st_high, m.tau, m.tau_nei),
            (0.15, 0.2, 0.15, 0.6)
        );
        assert_eq!(c.trainer.alpha, 0.999);
        assert_eq!(c.trainer.i_refine(), c.trainer.i_max / 2);
        assert_eq!(c.trainer.adam.lr, 0.002);
        assert_eq!((c.eval.score_threshold, c.eval.nms_tau), (0.2, 0.15));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::from_toml_str("[trainer]\ni_max = 100\ni_refine = 50\n[scenes]\nseed = 3\n").unwrap();
        assert_eq!(c.trainer.i_max, 100);
        assert_eq!(c.scenes.seed, 3);
        assert_eq!(c.scenes.points_per_object, 250.0);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.run_id(), c.run_id());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("[trainer]\nalpha = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[trainer.mining]\nsigma_st_low = 0.5\n").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
