use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::scenes::Scene;

/// Writes one JSON scene per line.
pub fn save_scenes<T: Real>(path: impl AsRef<Path>, scenes: &[Scene<T>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_scene<T: Real>(s: &Scene<T>) -> std::result::Result<(), (String, String)> {
    if s.agents.is_empty() {
        return Err(("agents".into(), "scene needs at least one agent".into()));
    }
    let mut ids = HashSet::new();
    for (k, g) in s.gt_boxes.iter().enumerate() {
        if !ids.insert(g.object_id) {
            return Err((
                format!("gt_boxes[{k}].object_id"),
                format!("duplicate object id {}", g.object_id),
            ));
        }
        if let Err(e) = g.bbox.validate() {
            return Err((format!("gt_boxes[{k}]"), e.to_string()));
        }
    }
    for (k, a) in s.agents.iter().enumerate() {
        if let Some(id) = a.sparse_label {
            if !ids.contains(&id) {
                return Err((
                    format!("agents[{k}].sparse_label"),
                    format!("references unknown object {id}"),
                ));
            }
        }
        if a.points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err((format!("agents[{k}].points"), "non-finite point".into()));
        }
    }
    Ok(())
}

/// Reads a corpus written by [`save_scenes`]. Blank lines are skipped.
pub fn load_scenes<T: Real>(path: impl AsRef<Path>) -> Result<Vec<Scene<T>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |field: String, message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            field,
            message,
        };
        let de = &mut serde_json::Deserializer::from_str(line);
        let scene: Scene<T> = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            parse_err(field, e.into_inner().to_string())
        })?;
        check_scene(&scene).map_err(|(f, m)| parse_err(f, m))?;
        out.push(scene);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_corpus, SceneGenParams};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let scenes: Vec<Scene<f64>> = generate_corpus(&SceneGenParams::default(), 0, 8).unwrap();
        save_scenes(&path, &scenes).unwrap();
        let back: Vec<Scene<f64>> = load_scenes(&path).unwrap();
        assert_eq!(back, scenes);

        let scenes32: Vec<Scene<f32>> = generate_corpus(&SceneGenParams::default(), 0, 3).unwrap();
        save_scenes(&path, &scenes32).unwrap();
        assert_eq!(load_scenes::<f32>(&path).unwrap(), scenes32);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_scenes::<f64>(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let scenes: Vec<Scene<f64>> = generate_corpus(&SceneGenParams::default(), 0, 2).unwrap();
        save_scenes(&path, &scenes).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 40]).unwrap();
        match load_scenes::<f64>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        fs::write(
            &path,
            r#"{"scene_id":"x","agents":[{"agent_id":0,"pose":{"x":0,"y":"oops","heading":0},"points":[],"sparse_label":null}],"gt_boxes":[]}"#,
        )
        .unwrap();
        let err = load_scenes::<f64>(&path).unwrap_err();
        match &err {
            Error::Parse { line, field, .. } => {
                assert_eq!(*line, 1);
                assert_eq!(field, "agents[0].pose.y");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_sparse_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            r#"{"scene_id":"x","agents":[{"agent_id":0,"pose":{"x":0,"y":0,"heading":0},"points":[],"sparse_label":4}],"gt_boxes":[]}"#,
        )
        .unwrap();
        let err = load_scenes::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("agents[0].sparse_label"), "{err}");
    }
}
