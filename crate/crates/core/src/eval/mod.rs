//! Objective metrics: SI-SDR, STOI, DECS, DCA and RTF, plus the dialect
//! classifier behind DECS/DCA and its feature export.

mod classifier;
mod stoi;

pub use classifier::{
    argmax, mel_features, train_dialect_classifier, ClassifierConfig, DialectClassifier, LabeledMel,
    TrainedClassifier,
};
pub use stoi::{stoi, stoi_min_samples, STOI_RATE};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialect::{dialect_id, Dialect};
use crate::error::{Error, Result};

/// Reported SI-SDR for an exact (or exactly scaled) reconstruction; also the
/// lower clamp, negated.
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB, without mean removal,
/// clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "si_sdr needs equal lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::InvalidArgument("si_sdr reference has zero energy".into()));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        noise += (t - e) * (t - e);
    }
    if noise == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Cosine similarity of two embeddings.
pub fn decs(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "decs needs equal dimensions, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("decs of a zero-norm embedding".into()));
    }
    // one square root of the product keeps cos(a, a) exactly 1
    Ok((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Percentage of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predicted.len(),
            labels.len()
        )));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Dialect classification accuracy of `classifier` on labelled mels, in percent.
pub fn dca(classifier: &DialectClassifier, examples: &[LabeledMel]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("dca of an empty set".into()));
    }
    let predicted = examples
        .iter()
        .map(|e| classifier.predict(&e.mel).map(|p| argmax(&p)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.dialect.id()).collect();
    accuracy(&predicted, &labels)
}

/// Real-time factor: compute time over produced audio time.
pub fn rtf(synthesis_seconds: f64, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rtf needs positive audio duration, got {audio_seconds}"
        )));
    }
    Ok(synthesis_seconds / audio_seconds)
}

/// One exported classifier row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub dialect: Dialect,
    pub probs: [f64; 3],
    pub embedding: Vec<f64>,
}

pub fn dialect_features(classifier: &DialectClassifier, examples: &[LabeledMel]) -> Result<Vec<FeatureRow>> {
    examples
        .iter()
        .map(|e| {
            let (p, emb) = classifier.predict_with_embedding(&e.mel)?;
            Ok(FeatureRow {
                id: e.id.clone(),
                dialect: e.dialect,
                probs: [p[0], p[1], p[2]],
                embedding: emb,
            })
        })
        .collect()
}

/// CSV with header `id,dialect,p0,p1,p2,e0,…`; floats use shortest
/// round-trip decimal formatting.
pub fn write_feature_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "dialect".into(), "p0".into(), "p1".into(), "p2".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.dialect.to_string()];
        rec.extend(r.probs.iter().chain(&r.embedding).map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_dialect_features(
    classifier: &DialectClassifier,
    examples: &[LabeledMel],
    path: &Path,
) -> Result<Vec<FeatureRow>> {
    let rows = dialect_features(classifier, examples)?;
    write_feature_csv(&rows, path)?;
    Ok(rows)
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() < 5 {
            return Err(parse_err(line, format!("expected at least 5 columns, found {}", rec.len())));
        }
        let nums = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(line, format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            id: rec[0].to_string(),
            dialect: dialect_id(&rec[1]).map_err(|e| parse_err(line, e.to_string()))?,
            probs: [nums[0], nums[1], nums[2]],
            embedding: nums[3..].to_vec(),
        });
    }
    Ok(rows)
}

/// Per-utterance metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Aggregate {
        count: values.len(),
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<UtteranceMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, metrics: BTreeMap<String, f64>) {
        self.rows.push(UtteranceMetrics {
            id: id.into(),
            metrics,
        });
    }

    /// Mean/std of every metric over the rows that report it.
    pub fn aggregates(&self) -> BTreeMap<String, Aggregate> {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            for (k, &v) in &r.metrics {
                values.entry(k.clone()).or_default().push(v);
            }
        }
        values
            .into_iter()
            .filter_map(|(k, v)| mean_std(&v).map(|a| (k, a)))
            .collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `metric,count,mean,std` summary.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "count", "mean", "std"])?;
        for (k, a) in self.aggregates() {
            w.write_record([k, a.count.to_string(), a.mean.to_string(), a.std.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_sdr_examples() {
        let r = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &twice).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(si_sdr(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(si_sdr(&[1.0], &[1.0, 1.0]).is_err());
        assert_eq!(si_sdr(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -SI_SDR_CAP_DB);
    }

    #[test]
    fn decs_identities() {
        let a = [0.3, -1.7, 2.2];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(decs(&a, &a).unwrap(), 1.0);
        assert_eq!(decs(&a, &neg).unwrap(), -1.0);
        assert_eq!(decs(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(decs(&a, &[0.0; 3]).is_err());
        assert!(decs(&a, &[1.0]).is_err());
    }

    #[test]
    fn accuracy_from_confusion_matrix() {
        // rows: true class, columns: predicted
        let confusion = [[5usize, 1, 0], [2, 7, 1], [0, 0, 4]];
        let (mut pred, mut label) = (Vec::new(), Vec::new());
        for (t, row) in confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                pred.extend(std::iter::repeat_n(p, n));
                label.extend(std::iter::repeat_n(t, n));
            }
        }
        let trace = 5 + 7 + 4;
        let total: usize = confusion.iter().flatten().sum();
        assert_eq!(accuracy(&pred, &label).unwrap(), 100.0 * trace as f64 / total as f64);
        let constant = vec![0; 30];
        let balanced: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert!((accuracy(&constant, &balanced).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn rtf_examples() {
        assert_eq!(rtf(1.0, 10.0).unwrap(), 0.1);
        assert_eq!(rtf(2.5, 2.5).unwrap(), 1.0);
        assert!(rtf(1.0, 0.0).is_err());
    }

    #[test]
    fn report_aggregates() {
        let mut rep = MetricReport::default();
        rep.push("a", BTreeMap::from([("stoi".to_string(), 0.5), ("si_sdr".to_string(), 10.0)]));
        rep.push("b", BTreeMap::from([("stoi".to_string(), 0.7)]));
        let agg = rep.aggregates();
        assert_eq!(agg["stoi"].count, 2);
        assert!((agg["stoi"].mean - 0.6).abs() < 1e-12);
        assert!((agg["stoi"].std - 0.1).abs() < 1e-12);
        assert_eq!(agg["si_sdr"].count, 1);
    }
}
