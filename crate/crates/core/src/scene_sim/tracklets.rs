use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SequenceDataset;
use crate::error::Error;

/// Tracklets spanning at least this many frames count as long.
pub const LONG_TRACKLET_FRAMES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackletMode {
    /// Split at every shot change and every absence.
    SingleShot,
    /// Follow the identity across shot changes; split where it is absent.
    ContinuousIdentity,
    /// One tracklet per identity, bridging absences.
    MultiShot,
}

impl TrackletMode {
    pub const ALL: [TrackletMode; 3] = [
        TrackletMode::SingleShot,
        TrackletMode::ContinuousIdentity,
        TrackletMode::MultiShot,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrackletMode::SingleShot => "single-shot",
            TrackletMode::ContinuousIdentity => "continuous-identity",
            TrackletMode::MultiShot => "multi-shot",
        }
    }
}

impl fmt::Display for TrackletMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackletMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "single-shot" => Ok(TrackletMode::SingleShot),
            "continuous-identity" => Ok(TrackletMode::ContinuousIdentity),
            "multi-shot" => Ok(TrackletMode::MultiShot),
            _ => Err(Error::UnknownMode {
                what: "tracklet mode",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracklet {
    /// Index of the sequence in the dataset.
    pub sequence: usize,
    pub identity: u64,
    /// Indices into the sequence's frames; valid frames only.
    pub frames: Vec<usize>,
    /// Frames from first to last, gaps included.
    pub span: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackletStats {
    pub count_all: usize,
    pub count_long: usize,
    pub frames_all: usize,
    pub frames_long: usize,
}

pub fn assemble_tracklets(dataset: &SequenceDataset, mode: TrackletMode) -> (Vec<Tracklet>, TrackletStats) {
    let mut out = Vec::new();
    for (si, seq) in dataset.sequences.iter().enumerate() {
        let mut current: Vec<usize> = Vec::new();
        let mut flush = |current: &mut Vec<usize>| {
            if current.is_empty() {
                return;
            }
            let frames = std::mem::take(current);
            let span = seq.frames[*frames.last().unwrap()].t - seq.frames[frames[0]].t + 1;
            out.push(Tracklet {
                sequence: si,
                identity: seq.identity,
                frames,
                span,
            });
        };
        for (i, f) in seq.frames.iter().enumerate() {
            if !f.valid {
                if mode != TrackletMode::MultiShot {
                    flush(&mut current);
                }
                continue;
            }
            if mode == TrackletMode::SingleShot {
                if let Some(&last) = current.last() {
                    if seq.frames[last].shot_id != f.shot_id {
                        flush(&mut current);
                    }
                }
            }
            current.push(i);
        }
        flush(&mut current);
    }

    let mut stats = TrackletStats::default();
    for t in &out {
        stats.count_all += 1;
        stats.frames_all += t.span;
        if t.span >= LONG_TRACKLET_FRAMES {
            stats.count_long += 1;
            stats.frames_long += t.span;
        }
    }
    (out, stats)
}
