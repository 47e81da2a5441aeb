//! Export of quarantined records for native-speaker screening, and import of
//! the reviewers' verdicts.
//!
//! Export CSV columns: `id,text,dialect,audio_path,failing_metrics`, where
//! `failing_metrics` is `name=value` pairs joined by `;`, or `unscored` when
//! the record has no DECS value.
//! Verdict CSV columns: `id,verdict` with verdict `accept` or `reject`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::Path;

use super::gate::GateConfig;
use super::{read_manifest, write_manifest, Status, UtteranceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accept" | "accepted" => Some(Verdict::Accept),
            "reject" | "rejected" => Some(Verdict::Reject),
            _ => None,
        }
    }

    fn status(self) -> Status {
        match self {
            Verdict::Accept => Status::Accepted,
            Verdict::Reject => Status::Rejected,
        }
    }
}

/// Writes every `pending_review` record; returns how many were written.
pub fn export_review_queue(records: &[UtteranceRecord], gate: &GateConfig, out: &Path) -> Result<usize> {
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "text", "dialect", "audio_path", "failing_metrics"])?;
    let mut n = 0;
    for r in records.iter().filter(|r| r.status == Status::PendingReview) {
        let mut failing: Vec<String> = gate
            .failing(&r.metrics)
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        if !r.metrics.contains_key("decs") {
            failing.push("unscored".to_string());
        }
        w.write_record([
            r.id.as_str(),
            r.text.as_str(),
            r.dialect.name(),
            &r.audio_path.to_string_lossy(),
            &failing.join(";"),
        ])?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(n)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    /// Records whose status changed.
    pub applied: usize,
    /// Verdicts already reflected in the manifest.
    pub unchanged: usize,
    /// `(line, message)` for every verdict line that could not be applied.
    pub errors: Vec<(usize, String)>,
}

/// Applies reviewer verdicts to `pending_review` records and rewrites the
/// manifest. Valid lines are applied even when others fail; importing the
/// same file twice leaves the manifest unchanged.
pub fn import_verdicts(manifest: &Path, verdicts: &Path) -> Result<ImportReport> {
    let mut records = read_manifest(manifest)?;
    let text = fs::read_to_string(verdicts).map_err(|e| Error::io(verdicts, e))?;
    let index: HashMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
    let mut report = ImportReport::default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    match reader.headers() {
        Ok(h) if h.len() >= 2 && h[0].trim() == "id" && h[1].trim() == "verdict" => {}
        _ => {
            report.errors.push((1, "header must be `id,verdict`".into()));
            return Ok(report);
        }
    }
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.errors.push((line, e.to_string()));
                continue;
            }
        };
        if row.len() != 2 {
            report.errors.push((line, format!("expected 2 fields, found {}", row.len())));
            continue;
        }
        let id = row[0].trim();
        let Some(verdict) = Verdict::parse(&row[1]) else {
            report.errors.push((line, format!("unknown verdict {:?}", &row[1])));
            continue;
        };
        let Some(&k) = index.get(id) else {
            report.errors.push((line, format!("unknown id {id:?}")));
            continue;
        };
        let record = &mut records[k];
        let target = verdict.status();
        if record.status == target {
            report.unchanged += 1;
        } else if record.status == Status::PendingReview {
            record.status = target;
            report.applied += 1;
        } else {
            report
                .errors
                .push((line, format!("{id} is {}, not pending review", record.status.name())));
        }
    }
    if report.applied > 0 {
        write_manifest(manifest, &records)?;
    }
    Ok(report)
}
