use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::write_atomic;

/// First line of a run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    /// Task label including distractor variant.
    pub task: String,
    pub ablation: String,
    pub seed: u64,
    pub config_hash: String,
    /// Normalization constant for scores.
    pub max_return: f64,
    /// Final checkpoint, relative to the record's directory.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
}

/// Evaluation history of one (task, seed, variant) run.
///
/// Stored as JSON lines: the header, then one `{"step", "mean_return"}`
/// object per evaluation checkpoint in increasing step order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub points: Vec<EvalPoint>,
}

impl RunRecord {
    pub fn final_return(&self) -> Option<f64> {
        self.points.last().map(|p| p.mean_return)
    }

    /// Returns divided by the header's maximum return.
    pub fn normalized(&self) -> Vec<(u64, f64)> {
        self.points
            .iter()
            .map(|p| (p.step, p.mean_return / self.header.max_return))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for p in &self.points {
            out.push_str(&serde_json::to_string(p).expect("point serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: RunHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::invalid("empty run record"))?,
        )?;
        let points = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<EvalPoint>>>()?;
        if points.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::invalid("run record steps must increase"));
        }
        Ok(Self { header, points })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}
