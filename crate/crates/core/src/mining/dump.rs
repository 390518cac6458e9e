use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{LabelSet, LabelSource};
use crate::scalar::Real;

/// One merged label as written to a mining dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub anchor: usize,
    pub source: LabelSource,
    pub score: Option<f64>,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

/// Merged labels of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDump {
    pub scene_id: String,
    pub sigma_dt: Option<f64>,
    pub entries: Vec<DumpEntry>,
}

impl SceneDump {
    pub fn from_labels<T: Real>(scene_id: &str, sigma_dt: Option<T>, labels: &LabelSet<T>) -> Self {
        let entries = labels
            .positives
            .iter()
            .map(|e| DumpEntry {
                anchor: e.anchor,
                source: e.source,
                score: e.score.map(Real::as_f64),
                cx: e.bbox.cx.as_f64(),
                cy: e.bbox.cy.as_f64(),
                length: e.bbox.length.as_f64(),
                width: e.bbox.width.as_f64(),
                yaw: e.bbox.yaw.as_f64(),
            })
            .collect();
        SceneDump {
            scene_id: scene_id.to_string(),
            sigma_dt: sigma_dt.map(Real::as_f64),
            entries,
        }
    }
}

pub fn save_dump(path: impl AsRef<Path>, dumps: &[SceneDump]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dumps {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<Vec<SceneDump>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let d = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}
