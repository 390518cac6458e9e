use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectorState, HeadLayout};
use crate::error::{Error, Result};
use crate::geometry::AnchorGrid;
use crate::scalar::Real;

const FORMAT: &str = "dualteach-checkpoint-v1";

/// On-disk detector parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub config_hash: String,
    pub layout: HeadLayout,
    pub params: Vec<T>,
}

/// Hash of everything that fixes the meaning of a parameter vector: the
/// anchor grid and the head layout.
pub fn config_hash<T: Real>(grid: &AnchorGrid<T>, layout: &HeadLayout) -> String {
    let grid64: AnchorGrid<f64> = AnchorGrid {
        height_cells: grid.height_cells,
        width_cells: grid.width_cells,
        cell_size: grid.cell_size.as_f64(),
        origin: (grid.origin.0.as_f64(), grid.origin.1.as_f64()),
        templates: grid
            .templates
            .iter()
            .map(|t| crate::geometry::AnchorTemplate {
                length: t.length.as_f64(),
                width: t.width.as_f64(),
                yaw: t.yaw.as_f64(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&(&grid64, layout)).expect("grid serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, state: &DetectorState<T>, grid: &AnchorGrid<T>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        format: FORMAT.to_string(),
        config_hash: config_hash(grid, &state.layout),
        layout: state.layout,
        params: state.params.clone(),
    };
    let text = serde_json::to_string(&ck)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing one produced for a different grid or layout.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, grid: &AnchorGrid<T>) -> Result<DetectorState<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<T> = serde_json::from_str(&text)?;
    if ck.format != FORMAT {
        return Err(Error::Config(format!(
            "{}: unknown checkpoint format `{}`",
            path.display(),
            ck.format
        )));
    }
    let layout = HeadLayout::for_grid(grid);
    let expected = config_hash(grid, &layout);
    if ck.config_hash != expected || ck.layout != layout {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: ck.config_hash,
        });
    }
    if ck.params.len() != layout.num_params() {
        return Err(Error::LayoutMismatch {
            expected: layout.num_params(),
            found: ck.params.len(),
        });
    }
    Ok(DetectorState {
        layout,
        params: ck.params,
        optimizer_writes: 0,
        ema_writes: 0,
    })
}
