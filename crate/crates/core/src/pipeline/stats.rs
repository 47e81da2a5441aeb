use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{manifest_dir, Status, UtteranceRecord};
use crate::dialect::Dialect;
use crate::eval::{mean_std, Aggregate};
use crate::signal::wav_duration;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub label: String,
    pub files: usize,
    pub bytes: u64,
    pub total_seconds: f64,
    pub average_seconds: f64,
    pub si_sdr: Option<Aggregate>,
    pub pesq: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    /// One row per dialect, in id order, including dialects with no files.
    pub dialects: Vec<StatsRow>,
    /// `None` when no audio file was found.
    pub total: Option<StatsRow>,
    /// Audio paths named by the manifest that could not be read.
    pub missing: Vec<PathBuf>,
}

impl DatasetStats {
    pub fn is_empty(&self) -> bool {
        self.total.is_none()
    }
}

struct Found<'a> {
    record: &'a UtteranceRecord,
    bytes: u64,
    seconds: f64,
}

fn row(label: &str, found: &[&Found]) -> StatsRow {
    let total_seconds = found.iter().fold(0.0, |acc, f| acc + f.seconds);
    let metric = |name: &str| {
        let values: Vec<f64> = found.iter().filter_map(|f| f.record.metrics.get(name).copied()).collect();
        mean_std(&values)
    };
    StatsRow {
        label: label.to_string(),
        files: found.len(),
        bytes: found.iter().map(|f| f.bytes).sum(),
        total_seconds,
        average_seconds: if found.is_empty() { 0.0 } else { total_seconds / found.len() as f64 },
        si_sdr: metric("si_sdr"),
        pesq: metric("pesq"),
    }
}

/// Per-dialect and total file statistics. Durations come from the WAV
/// headers; `statuses` restricts which records count (all when `None`).
pub fn dataset_stats(records: &[UtteranceRecord], manifest: &Path, statuses: Option<&[Status]>) -> DatasetStats {
    let dir = manifest_dir(manifest);
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for r in records.iter().filter(|r| statuses.is_none_or(|s| s.contains(&r.status))) {
        let path = r.resolve_audio(&dir);
        match (fs::metadata(&path), wav_duration(&path)) {
            (Ok(meta), Ok(seconds)) => found.push(Found {
                record: r,
                bytes: meta.len(),
                seconds,
            }),
            _ => {
                log::warn!("missing or unreadable audio {}", path.display());
                missing.push(path);
            }
        }
    }
    let dialects = Dialect::ALL
        .iter()
        .map(|&d| {
            let subset: Vec<&Found> = found.iter().filter(|f| f.record.dialect == d).collect();
            row(d.name(), &subset)
        })
        .collect();
    let all: Vec<&Found> = found.iter().collect();
    DatasetStats {
        dialects,
        total: (!all.is_empty()).then(|| row("total", &all)),
        missing,
    }
}

fn aggregate_cell(a: &Option<Aggregate>) -> String {
    a.as_ref()
        .map_or_else(|| "-".to_string(), |a| format!("{:.3}±{:.3}", a.mean, a.std))
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "dialect\tfiles\tbytes\tduration_s\tavg_duration_s\tsi_sdr\tpesq");
        let line = |s: &mut String, r: &StatsRow| {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.3}\t{:.3}\t{}\t{}",
                r.label,
                r.files,
                r.bytes,
                r.total_seconds,
                r.average_seconds,
                aggregate_cell(&r.si_sdr),
                aggregate_cell(&r.pesq)
            );
        };
        for r in &self.dialects {
            line(&mut s, r);
        }
        match &self.total {
            Some(t) => line(&mut s, t),
            None => s.push_str("total\tempty\n"),
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "missing\t{}", self.missing.len());
            for p in &self.missing {
                let _ = writeln!(s, "missing\t{}", p.display());
            }
        }
        f.write_str(&s)
    }
}
