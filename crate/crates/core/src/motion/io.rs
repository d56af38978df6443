//! Line-delimited JSON dataset files, one sequence per line.
//!
//! Values are written in shortest round-trip form, so a save/load cycle is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::types::{Pose2DSequence, Pose3DSequence};
use crate::error::{Error, Result};

/// Links a 2D record to one view of a multi-view sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewTag {
    pub sequence: String,
    pub view: usize,
    pub rig: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record2D {
    pub id: String,
    pub fps: f64,
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub seq: Pose2DSequence,
    pub view: Option<ViewTag>,
}

impl Record2D {
    pub fn new(id: impl Into<String>, fps: f64, seq: Pose2DSequence) -> Self {
        Self {
            id: id.into(),
            fps,
            width: None,
            height: None,
            seq,
            view: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record3D {
    pub id: String,
    pub fps: f64,
    pub seq: Pose3DSequence,
    pub parents: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<f64>,
    joints: usize,
    frames: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parents: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rig: Option<String>,
}

fn nested(data: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    data.outer_iter()
        .map(|frame| frame.outer_iter().map(|p| p.to_vec()).collect())
        .collect()
}

fn to_array(raw: &RawRecord, dim: usize, line: usize) -> Result<Array3<f64>> {
    let schema = |message: String| Error::Schema { line, message };
    let mut data = Array3::zeros((raw.frames.len(), raw.joints, dim));
    for (t, frame) in raw.frames.iter().enumerate() {
        if frame.len() != raw.joints {
            return Err(schema(format!(
                "record `{}` frame {t} has {} joints, expected {}",
                raw.id,
                frame.len(),
                raw.joints
            )));
        }
        for (j, p) in frame.iter().enumerate() {
            if p.len() != dim {
                return Err(schema(format!(
                    "record `{}` frame {t} joint {j} has {} coordinates, expected {dim}",
                    raw.id,
                    p.len()
                )));
            }
            for (k, v) in p.iter().enumerate() {
                data[[t, j, k]] = *v;
            }
        }
    }
    Ok(data)
}

fn read_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, raw));
    }
    Ok(out)
}

fn write_records(path: &Path, records: impl Iterator<Item = RawRecord>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Record2D>> {
    read_records(path.as_ref())?
        .into_iter()
        .map(|(line, raw)| {
            let data = to_array(&raw, 2, line)?;
            let seq = Pose2DSequence::new(data).map_err(|e| Error::Schema {
                line,
                message: e.to_string(),
            })?;
            let view = match (raw.sequence, raw.view) {
                (Some(sequence), Some(view)) => Some(ViewTag {
                    sequence,
                    view,
                    rig: raw.rig.unwrap_or_default(),
                }),
                _ => None,
            };
            Ok(Record2D {
                id: raw.id,
                fps: raw.fps,
                width: raw.width,
                height: raw.height,
                seq,
                view,
            })
        })
        .collect()
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[Record2D]) -> Result<()> {
    write_records(
        path.as_ref(),
        records.iter().map(|r| RawRecord {
            id: r.id.clone(),
            fps: r.fps,
            width: r.width,
            height: r.height,
            joints: r.seq.joint_count(),
            frames: nested(r.seq.array()),
            root_index: None,
            parents: None,
            sequence: r.view.as_ref().map(|v| v.sequence.clone()),
            view: r.view.as_ref().map(|v| v.view),
            rig: r.view.as_ref().map(|v| v.rig.clone()),
        }),
    )
}

pub fn load_dataset_3d(path: impl AsRef<Path>) -> Result<Vec<Record3D>> {
    read_records(path.as_ref())?
        .into_iter()
        .map(|(line, raw)| {
            let data = to_array(&raw, 3, line)?;
            let root = raw.root_index.ok_or_else(|| Error::Schema {
                line,
                message: format!("3D record `{}` lacks root_index", raw.id),
            })?;
            let parents = raw.parents.clone().unwrap_or_default();
            if !parents.is_empty() && parents.len() != raw.joints {
                return Err(Error::Schema {
                    line,
                    message: format!("record `{}` parent list does not match joints", raw.id),
                });
            }
            let seq = Pose3DSequence::new(data, root).map_err(|e| Error::Schema {
                line,
                message: e.to_string(),
            })?;
            Ok(Record3D {
                id: raw.id,
                fps: raw.fps,
                seq,
                parents,
            })
        })
        .collect()
}

pub fn save_dataset_3d(path: impl AsRef<Path>, records: &[Record3D]) -> Result<()> {
    write_records(
        path.as_ref(),
        records.iter().map(|r| RawRecord {
            id: r.id.clone(),
            fps: r.fps,
            width: None,
            height: None,
            joints: r.seq.joint_count(),
            frames: nested(r.seq.array()),
            root_index: Some(r.seq.root_index()),
            parents: Some(r.parents.clone()),
            sequence: None,
            view: None,
            rig: None,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("mvlift-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let p = tmp("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<_> = (0..100)
            .map(|i| {
                let t = rng.gen_range(1..12);
                let seq = Pose2DSequence::new(Array3::from_shape_fn((t, 8, 2), |_| {
                    rng.gen_range(-1.0..1.0)
                }))
                .unwrap();
                let mut r = Record2D::new(format!("seq-{i}"), 30.0, seq);
                if i % 3 == 0 {
                    r.width = Some(640.0);
                    r.height = Some(480.0);
                    r.view = Some(ViewTag {
                        sequence: format!("s{}", i / 3),
                        view: i % 4,
                        rig: "circular-4x90-r3-h0".into(),
                    });
                }
                r
            })
            .collect();
        let p = tmp("round.jsonl");
        save_dataset(&p, &records).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.view, b.view);
            let err = (a.seq.array() - b.seq.array()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-9);
        }
    }

    #[test]
    fn wrong_joint_count_is_schema_error_with_line() {
        let p = tmp("bad.jsonl");
        let good = r#"{"id":"a","fps":30,"joints":1,"frames":[[[0.1,0.2]]]}"#;
        let bad = r#"{"id":"b","fps":30,"joints":2,"frames":[[[0.1,0.2],[0.3,0.4]],[[0.5,0.6]]]}"#;
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match load_dataset(&p).unwrap_err() {
            Error::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("frame 1"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_record_is_parse_error_with_line() {
        let p = tmp("malformed.jsonl");
        std::fs::write(&p, "\n{\"id\": 3\n").unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Parse { line: 2, .. }));
    }
}
