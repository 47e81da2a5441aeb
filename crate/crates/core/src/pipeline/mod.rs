//! Quality-gated dataset generation: synthesize every text in every dialect,
//! score, gate, enhance or quarantine, and keep a line-delimited manifest.

mod gate;
mod review;
mod run;
mod stats;

pub use gate::{gate, GateConfig, GateDecision, GateInput};
pub use review::{export_review_queue, import_verdicts, ImportReport, Verdict};
pub use run::{
    read_text_db, run_pipeline, utterance_id, utterance_seed, ClassifierDecs, CommandEnhancer, Enhancer,
    FileMetricProvider, MetricProvider, ModelSynthesizer, PipelineConfig, PipelineHooks, PipelineSummary,
    Synthesizer,
};
pub use stats::{dataset_stats, DatasetStats, StatsRow};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialect::Dialect;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Accepted,
    /// Passed the gate after one enhancement pass.
    Enhanced,
    Rejected,
    /// Waiting for a human verdict.
    PendingReview,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Accepted => "accepted",
            Status::Enhanced => "enhanced",
            Status::Rejected => "rejected",
            Status::PendingReview => "pending_review",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub dialect: Dialect,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    pub duration_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
    pub status: Status,
}

impl UtteranceRecord {
    pub fn resolve_audio(&self, manifest_dir: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            manifest_dir.join(&self.audio_path)
        }
    }
}

/// Directory that relative audio paths of `manifest` resolve against.
pub fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parses a manifest. Blank lines are skipped; any malformed line is an error
/// naming its line number.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<UtteranceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn record_line(record: &UtteranceRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

/// Replaces `path` with `records` via a temporary file and rename.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for r in records {
            writeln!(w, "{}", record_line(r)?).map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
