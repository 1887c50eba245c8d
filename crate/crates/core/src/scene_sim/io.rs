//! JSON Lines dataset format, one sequence per line.
//!
//! ```text
//! {"identity": 0, "beta_gt": [..] | null,
//!  "frames": [{"t": 0, "shot_id": 0, "valid": 1,
//!              "cam": {"focal": 500.0, "cx": 256.0, "cy": 256.0, "w": 512, "h": 512},
//!              "kp2d": [[u, v, c], ...],
//!              "gt": {"r_gl": [3], "t_gl": [3], "theta_b": [3(J-1)], "x3d": [3J]} | null}],
//!  "format_version": "1"}
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! write/read cycle reproduces every value bit for bit. The generator
//! configuration, when known, rides along on each line under `generator`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameGt, FrameObservation, Keypoint, Sequence, SequenceDataset, SimConfig};
use crate::body_model::FrameParams;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::{Vec2, Vec3};

pub const FORMAT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    identity: u64,
    beta_gt: Option<Vec<f64>>,
    frames: Vec<FrameLine>,
    format_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SimConfig>,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    t: usize,
    shot_id: usize,
    valid: u8,
    cam: CamLine,
    kp2d: Vec<[f64; 3]>,
    gt: Option<GtLine>,
}

#[derive(Serialize, Deserialize)]
struct CamLine {
    focal: f64,
    cx: f64,
    cy: f64,
    w: u32,
    h: u32,
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    r_gl: [f64; 3],
    t_gl: [f64; 3],
    theta_b: Vec<f64>,
    x3d: Vec<f64>,
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn to_line(seq: &Sequence, generator: Option<&SimConfig>) -> SequenceLine {
    SequenceLine {
        identity: seq.identity,
        beta_gt: seq.beta_gt.clone(),
        frames: seq
            .frames
            .iter()
            .map(|f| FrameLine {
                t: f.t,
                shot_id: f.shot_id,
                valid: f.valid as u8,
                cam: CamLine {
                    focal: f.camera.focal,
                    cx: f.camera.principal.x,
                    cy: f.camera.principal.y,
                    w: f.camera.image_size.0,
                    h: f.camera.image_size.1,
                },
                kp2d: f.keypoints.iter().map(|k| [k.u, k.v, k.conf]).collect(),
                gt: f.gt.as_ref().map(|g| GtLine {
                    r_gl: g.params.r_gl.into(),
                    t_gl: g.params.t_gl.into(),
                    theta_b: flatten(&g.params.theta_b),
                    x3d: flatten(&g.joints),
                }),
            })
            .collect(),
        format_version: FORMAT_VERSION.to_string(),
        generator: generator.cloned(),
    }
}

fn from_line(line: SequenceLine, lineno: usize) -> Result<Sequence> {
    let bad = |message: String| Error::Malformed {
        line: lineno,
        message,
    };
    let joints = line.frames.first().map_or(0, |f| f.kp2d.len());
    let mut frames = Vec::with_capacity(line.frames.len());
    let mut prev: Option<(usize, usize)> = None;
    for f in line.frames {
        if f.kp2d.len() != joints {
            return Err(bad(format!(
                "frame {}: kp2d has {} joints, expected {joints}",
                f.t,
                f.kp2d.len()
            )));
        }
        let valid = match f.valid {
            0 => false,
            1 => true,
            v => return Err(bad(format!("frame {}: field `valid` must be 0 or 1, got {v}", f.t))),
        };
        if let Some((pt, ps)) = prev {
            if f.t <= pt {
                return Err(bad(format!("field `t` must increase (frame {} after {pt})", f.t)));
            }
            if f.shot_id < ps {
                return Err(bad(format!("field `shot_id` decreases at frame {}", f.t)));
            }
        }
        prev = Some((f.t, f.shot_id));
        for k in &f.kp2d {
            if !(0.0..=1.0).contains(&k[2]) {
                return Err(bad(format!("frame {}: confidence {} outside [0, 1]", f.t, k[2])));
            }
            if !valid && k[2] != 0.0 {
                return Err(bad(format!("frame {}: invalid frame with non-zero confidence", f.t)));
            }
        }
        let camera = Camera {
            focal: f.cam.focal,
            principal: Vec2::new(f.cam.cx, f.cam.cy),
            image_size: (f.cam.w, f.cam.h),
            shot_id: f.shot_id,
        };
        camera
            .validate()
            .map_err(|e| bad(format!("frame {}: field `cam`: {e}", f.t)))?;
        let gt = match f.gt {
            None => None,
            Some(g) => {
                if g.theta_b.len() != 3 * joints.saturating_sub(1) || g.x3d.len() != 3 * joints {
                    return Err(bad(format!(
                        "frame {}: field `gt` has theta_b/x3d lengths {}/{} for {joints} joints",
                        f.t,
                        g.theta_b.len(),
                        g.x3d.len()
                    )));
                }
                let to_vecs = |v: &[f64]| -> Vec<Vec3> {
                    v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
                };
                Some(FrameGt {
                    params: FrameParams {
                        r_gl: Vec3::from(g.r_gl),
                        t_gl: Vec3::from(g.t_gl),
                        theta_b: to_vecs(&g.theta_b),
                    },
                    joints: to_vecs(&g.x3d),
                })
            }
        };
        frames.push(FrameObservation {
            t: f.t,
            shot_id: f.shot_id,
            valid,
            keypoints: f
                .kp2d
                .iter()
                .map(|k| Keypoint { u: k[0], v: k[1], conf: k[2] })
                .collect(),
            camera,
            gt,
        });
    }
    Ok(Sequence {
        identity: line.identity,
        beta_gt: line.beta_gt,
        frames,
    })
}

/// Serializes one dataset to JSON Lines text.
pub fn to_jsonl(dataset: &SequenceDataset) -> Result<String> {
    let mut out = String::new();
    for seq in &dataset.sequences {
        let line = to_line(seq, dataset.generator.as_ref());
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::invalid("dataset", e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(dataset: &SequenceDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(dataset)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses JSON Lines text; line numbers in errors are 1-based.
pub fn from_jsonl(reader: impl BufRead) -> Result<SequenceDataset> {
    let mut sequences = Vec::new();
    let mut generator = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        match value.get("format_version").and_then(|v| v.as_str()) {
            Some(FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    line: lineno,
                    found: other.to_string(),
                    supported: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Malformed {
                    line: lineno,
                    message: "missing field `format_version`".into(),
                })
            }
        }
        let parsed: SequenceLine = serde_json::from_value(value).map_err(|e| Error::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if generator.is_none() {
            generator = parsed.generator.clone();
        }
        sequences.push(from_line(parsed, lineno)?);
    }
    Ok(SequenceDataset {
        format_version: FORMAT_VERSION.to_string(),
        sequences,
        generator,
    })
}

pub fn read_dataset(path: &Path) -> Result<SequenceDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(BufReader::new(file))
}
