//! Estimates as JSON: per frame the same fields as a dataset `gt` block,
//! plus `converged` and the weighted frame `energy`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SequenceEstimate, SolverConfig};
use crate::body_model::{BodyModel, FrameParams};
use crate::error::{Error, Result};
use crate::objectives::EnergyBreakdown;
use crate::Vec3;

pub const ESTIMATE_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub format_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    pub estimates: Vec<SequenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub identity: u64,
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub energy: EnergyBreakdown,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    pub r_gl: [f64; 3],
    pub t_gl: [f64; 3],
    pub theta_b: Vec<f64>,
    pub x3d: Vec<f64>,
    pub converged: bool,
    pub energy: f64,
}

impl EstimateFile {
    pub fn new(model: &BodyModel, estimates: &[SequenceEstimate], solver: Option<SolverConfig>) -> Result<Self> {
        let estimates = estimates
            .iter()
            .map(|e| {
                let frames = (0..e.len())
                    .map(|t| {
                        let f = &e.frames[t];
                        Ok(FrameRecord {
                            t,
                            r_gl: f.r_gl.into(),
                            t_gl: f.t_gl.into(),
                            theta_b: f.to_vec()[6..].to_vec(),
                            x3d: e.joints(model, t)?.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
                            converged: e.converged[t],
                            energy: e.energy.per_frame_total.get(t).copied().unwrap_or(0.0),
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(SequenceRecord {
                    identity: e.identity,
                    beta: e.beta.clone(),
                    iterations: e.iterations,
                    energy: e.energy.clone(),
                    frames,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EstimateFile { format_version: ESTIMATE_FORMAT_VERSION.to_string(), solver, estimates })
    }

    pub fn to_estimates(&self) -> Result<Vec<SequenceEstimate>> {
        self.estimates
            .iter()
            .map(|s| {
                let frames = s
                    .frames
                    .iter()
                    .map(|f| {
                        let mut v = Vec::with_capacity(6 + f.theta_b.len());
                        v.extend_from_slice(&f.r_gl);
                        v.extend_from_slice(&f.t_gl);
                        v.extend_from_slice(&f.theta_b);
                        FrameParams::from_slice(&v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SequenceEstimate {
                    identity: s.identity,
                    beta: s.beta.clone(),
                    converged: s.frames.iter().map(|f| f.converged).collect(),
                    frames,
                    energy: s.energy.clone(),
                    iterations: s.iterations,
                })
            })
            .collect()
    }
}

pub fn write_estimates(
    model: &BodyModel,
    estimates: &[SequenceEstimate],
    solver: Option<SolverConfig>,
    path: &Path,
) -> Result<()> {
    let doc = EstimateFile::new(model, estimates, solver)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &doc).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_estimates(path: &Path) -> Result<EstimateFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(ESTIMATE_FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::Version { line: 1, found: other.to_string(), supported: ESTIMATE_FORMAT_VERSION })
        }
        None => return Err(Error::Malformed { line: 1, message: "missing field `format_version`".into() }),
    }
    serde_json::from_value(value).map_err(|e| Error::Malformed { line: 1, message: e.to_string() })
}

/// Flattened camera-frame joints of a record, as stored.
pub fn record_joints(f: &FrameRecord) -> Vec<Vec3> {
    f.x3d.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}
