//! Weights file: JSON with named tensors, explicit shapes and a format
//! version.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mat, ModelKind, TemporalModelWeights};
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format_version: String,
    kind: ModelKind,
    joint_count: usize,
    shape_dim: usize,
    feature_dim: usize,
    tensors: BTreeMap<String, Tensor>,
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Malformed { line: 1, message: message.into() }
}

pub fn weights_to_json(w: &TemporalModelWeights) -> Result<String> {
    let tensors = w
        .tensors()
        .into_iter()
        .map(|(name, m)| {
            let data = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
            (name, Tensor { shape: [m.nrows(), m.ncols()], data })
        })
        .collect();
    let doc = WeightsFile {
        format_version: WEIGHTS_FORMAT_VERSION.to_string(),
        kind: w.kind,
        joint_count: w.joint_count,
        shape_dim: w.shape_dim,
        feature_dim: w.feature_dim(),
        tensors,
    };
    serde_json::to_string(&doc).map_err(|e| malformed(e.to_string()))
}

pub fn weights_from_json(text: &str) -> Result<TemporalModelWeights> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(WEIGHTS_FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::Version { line: 1, found: other.to_string(), supported: WEIGHTS_FORMAT_VERSION })
        }
        None => return Err(malformed("missing field `format_version`")),
    }
    let mut doc: WeightsFile = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    let mut w = TemporalModelWeights::zeros(doc.kind, doc.joint_count, doc.shape_dim, doc.feature_dim)?;
    let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(w.tensors_mut()) {
        let t = doc.tensors.remove(name).ok_or_else(|| malformed(format!("missing tensor `{name}`")))?;
        let [r, c] = t.shape;
        if (r, c) != slot.shape() {
            return Err(malformed(format!(
                "tensor `{name}` has shape [{r}, {c}], expected [{}, {}]",
                slot.nrows(),
                slot.ncols()
            )));
        }
        if t.data.len() != r * c {
            return Err(malformed(format!("tensor `{name}` has {} values for shape [{r}, {c}]", t.data.len())));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(malformed(format!("tensor `{name}` has non-finite values")));
        }
        *slot = Mat::from_row_slice(r, c, &t.data);
    }
    if let Some(extra) = doc.tensors.keys().next() {
        return Err(malformed(format!("unexpected tensor `{extra}`")));
    }
    Ok(w)
}

pub fn write_weights(w: &TemporalModelWeights, path: &Path) -> Result<()> {
    let text = weights_to_json(w)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(text.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<TemporalModelWeights> {
    let mut text = String::new();
    File::open(path)
        .and_then(|f| std::io::Read::read_to_string(&mut BufReader::new(f), &mut text))
        .map_err(|e| Error::io(path, e))?;
    weights_from_json(&text)
}
