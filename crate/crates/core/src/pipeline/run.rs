use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;

use super::gate::{gate, GateConfig, GateDecision, GateInput};
use super::{record_line, Status, UtteranceRecord, MANIFEST_FILE};
use crate::dialect::Dialect;
use crate::error::{Error, Result};
use crate::eval::{decs, DialectClassifier};
use crate::model::TtsModel;
use crate::signal::{resample, AudioFrontend, Waveform};

/// Text → waveform for one dialect and seed.
pub trait Synthesizer: Sync {
    fn synthesize(&self, text: &str, dialect: Dialect, seed: u64) -> Result<Waveform>;
}

pub struct ModelSynthesizer {
    pub model: TtsModel,
    pub frontend: AudioFrontend,
}

impl ModelSynthesizer {
    pub fn new(model: TtsModel) -> Result<Self> {
        let frontend = AudioFrontend::new(&model.audio)?;
        Ok(ModelSynthesizer { model, frontend })
    }
}

impl Synthesizer for ModelSynthesizer {
    fn synthesize(&self, text: &str, dialect: Dialect, seed: u64) -> Result<Waveform> {
        Ok(self.model.synthesize(&self.frontend, text, dialect, seed)?.waveform)
    }
}

/// A per-utterance score read from the written audio. `Ok(None)` means the
/// provider has no value for this utterance.
pub trait MetricProvider: Sync {
    fn score(&self, id: &str, audio: &Path, dialect: Dialect) -> Result<Option<f64>>;
}

/// DECS between the classifier embedding of the audio and the centroid of
/// the intended dialect.
pub struct ClassifierDecs {
    pub classifier: DialectClassifier,
    pub frontend: AudioFrontend,
}

impl ClassifierDecs {
    pub fn new(classifier: DialectClassifier, frontend: AudioFrontend) -> Result<Self> {
        if classifier.n_mels != frontend.config.n_mels {
            return Err(Error::InvalidArgument(format!(
                "classifier expects {} mel bins, audio config has {}",
                classifier.n_mels, frontend.config.n_mels
            )));
        }
        Ok(ClassifierDecs { classifier, frontend })
    }

    pub fn score_waveform(&self, wav: &Waveform, dialect: Dialect) -> Result<f64> {
        let rate = self.frontend.config.sample_rate;
        let samples = if wav.sample_rate == rate {
            wav.samples.clone()
        } else {
            resample(&wav.samples, wav.sample_rate, rate)?
        };
        let mel = self.frontend.log_mel(&samples)?;
        decs(&self.classifier.embed(&mel)?, self.classifier.centroid(dialect))
    }
}

impl MetricProvider for ClassifierDecs {
    fn score(&self, _id: &str, audio: &Path, dialect: Dialect) -> Result<Option<f64>> {
        self.score_waveform(&Waveform::read_wav(audio)?, dialect).map(Some)
    }
}

/// Scores from a text file of `utterance-id value` lines. Lookup tries the
/// audio file stem first (so `00001_amdo.enhanced` can carry a separate
/// post-enhancement value), then the utterance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileMetricProvider {
    pub values: HashMap<String, f64>,
}

impl FileMetricProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut values = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err((i + 1, format!("expected `id value`, got {line:?}")));
            };
            let v: f64 = v.parse().map_err(|e| (i + 1, format!("bad value {v:?}: {e}")))?;
            if !v.is_finite() {
                return Err((i + 1, format!("non-finite value for {id}")));
            }
            values.insert(id.to_string(), v);
        }
        Ok(FileMetricProvider { values })
    }
}

impl MetricProvider for FileMetricProvider {
    fn score(&self, id: &str, audio: &Path, _dialect: Dialect) -> Result<Option<f64>> {
        let stem = audio.file_stem().and_then(|s| s.to_str());
        Ok(stem
            .and_then(|s| self.values.get(s))
            .or_else(|| self.values.get(id))
            .copied())
    }
}

/// Speech enhancement applied to audio that fails the perceptual gate.
pub trait Enhancer: Sync {
    fn enhance(&self, input: &Path, output: &Path) -> Result<()>;
}

/// Runs `program [args..] <input.wav> <output.wav>`; exit code 0 is success.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandEnhancer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Enhancer for CommandEnhancer {
    fn enhance(&self, input: &Path, output: &Path) -> Result<()> {
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(input)
            .arg(output)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::Contract(format!(
                "enhancement hook {} failed with {status}",
                self.program.display()
            )));
        }
        Ok(())
    }
}

pub struct PipelineHooks<'a> {
    pub synthesizer: &'a dyn Synthesizer,
    pub decs: &'a dyn MetricProvider,
    pub pesq: Option<&'a dyn MetricProvider>,
    pub dnsmos: Option<&'a dyn MetricProvider>,
    pub enhancer: Option<&'a dyn Enhancer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub seed: u64,
    pub gate: GateConfig,
    /// Stop after this many new records; the run can be resumed later.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineSummary {
    pub total_jobs: usize,
    /// Records found in an existing manifest and kept.
    pub resumed: usize,
    pub written: usize,
    pub status_counts: BTreeMap<&'static str, usize>,
}

impl PipelineSummary {
    pub fn complete(&self) -> bool {
        self.resumed + self.written == self.total_jobs
    }
}

/// Non-blank lines of a UTF-8 text file, paired with their 0-based line index.
pub fn read_text_db(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let texts: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i, l.trim().to_string()))
        .collect();
    if texts.is_empty() {
        return Err(Error::InvalidArgument(format!("text database {} is empty", path.display())));
    }
    Ok(texts)
}

pub fn utterance_id(text_index: usize, dialect: Dialect) -> String {
    format!("{text_index:05}_{}", dialect.name())
}

/// SplitMix64 over `(seed, text index, did)`, so each utterance's randomness
/// is independent of scheduling.
pub fn utterance_seed(seed: u64, text_index: usize, dialect: Dialect) -> u64 {
    let mut z = seed
        .wrapping_add((text_index as u64).wrapping_mul(3).wrapping_add(dialect.id() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Job<'t> {
    text_index: usize,
    text: &'t str,
    dialect: Dialect,
}

impl Job<'_> {
    fn id(&self) -> String {
        utterance_id(self.text_index, self.dialect)
    }
}

fn score_all(hooks: &PipelineHooks, id: &str, audio: &Path, dialect: Dialect) -> Result<BTreeMap<String, f64>> {
    let mut metrics = BTreeMap::new();
    let decs = hooks
        .decs
        .score(id, audio, dialect)?
        .ok_or_else(|| Error::Contract(format!("no decs value for {id}")))?;
    metrics.insert("decs".to_string(), decs);
    for (name, provider) in [("pesq", hooks.pesq), ("dnsmos", hooks.dnsmos)] {
        if let Some(v) = provider.map(|p| p.score(id, audio, dialect)).transpose()?.flatten() {
            metrics.insert(name.to_string(), v);
        }
    }
    Ok(metrics)
}

fn decide(metrics: &BTreeMap<String, f64>, config: &GateConfig) -> Result<GateDecision> {
    gate(&GateInput::from_metrics(metrics), config)
}

fn process(job: &Job, hooks: &PipelineHooks, config: &PipelineConfig) -> Result<UtteranceRecord> {
    let id = job.id();
    let seed = utterance_seed(config.seed, job.text_index, job.dialect);
    let wav = hooks.synthesizer.synthesize(job.text, job.dialect, seed)?;
    let rel = PathBuf::from("wavs").join(format!("{id}.wav"));
    let abs = config.out_dir.join(&rel);
    wav.write_wav(&abs)?;

    let mut record = UtteranceRecord {
        id: id.clone(),
        text: job.text.to_string(),
        dialect: job.dialect,
        audio_path: rel,
        duration_seconds: wav.duration_seconds(),
        metrics: BTreeMap::new(),
        status: Status::PendingReview,
    };
    match score_all(hooks, &id, &abs, job.dialect) {
        Ok(m) => record.metrics = m,
        Err(e) => {
            log::warn!("{id}: scoring failed ({e}); pending review");
            return Ok(record);
        }
    }
    match decide(&record.metrics, &config.gate)? {
        GateDecision::Accept => record.status = Status::Accepted,
        GateDecision::Reject => {
            log::info!("{id}: rejected by dialect gate (decs {:.4})", record.metrics["decs"]);
            record.status = Status::Rejected;
        }
        GateDecision::Enhance => enhance(&mut record, hooks, config)?,
    }
    Ok(record)
}

/// One enhancement pass and re-score. Hook failures quarantine the record.
fn enhance(record: &mut UtteranceRecord, hooks: &PipelineHooks, config: &PipelineConfig) -> Result<()> {
    let id = record.id.clone();
    let Some(enhancer) = hooks.enhancer else {
        log::warn!("{id}: needs enhancement but no hook is configured; pending review");
        return Ok(());
    };
    let input = config.out_dir.join(&record.audio_path);
    let rel = PathBuf::from("wavs").join(format!("{id}.enhanced.wav"));
    let output = config.out_dir.join(&rel);
    let enhanced = enhancer.enhance(&input, &output).and_then(|()| Waveform::read_wav(&output));
    let wav = match enhanced {
        Ok(w) => w,
        Err(e) => {
            log::warn!("{id}: enhancement hook failed ({e}); pending review");
            return Ok(());
        }
    };
    record.metrics = match score_all(hooks, &id, &output, record.dialect) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("{id}: re-scoring enhanced audio failed ({e}); pending review");
            return Ok(());
        }
    };
    record.audio_path = rel;
    record.duration_seconds = wav.duration_seconds();
    match decide(&record.metrics, &config.gate)? {
        GateDecision::Accept => record.status = Status::Enhanced,
        outcome => {
            log::info!("{id}: still failing after enhancement ({outcome:?}); rejected");
            record.status = Status::Rejected;
        }
    }
    Ok(())
}

/// Loads the manifest prefix written by an earlier run, dropping a torn
/// final line, and checks it against the job order.
fn resume_prefix(path: &Path, jobs: &[Job]) -> Result<(Vec<UtteranceRecord>, u64)> {
    let Ok(bytes) = fs::read(path) else {
        return Ok((Vec::new(), 0));
    };
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut start = 0usize;
    while let Some(nl) = bytes[start..].iter().position(|&b| b == b'\n') {
        let line = &bytes[start..start + nl];
        let end = start + nl + 1;
        if !line.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice::<UtteranceRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) if end == bytes.len() => {
                    log::warn!("{}: dropping unreadable final line ({e})", path.display());
                    break;
                }
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: records.len() + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        valid_len = end as u64;
        start = end;
    }
    if start < bytes.len() {
        log::warn!("{}: dropping incomplete final line", path.display());
    }
    if records.len() > jobs.len() {
        return Err(Error::Contract(format!(
            "{} has {} records but the run has only {} utterances",
            path.display(),
            records.len(),
            jobs.len()
        )));
    }
    for (r, j) in records.iter().zip(jobs) {
        if r.id != j.id() || r.text != j.text {
            return Err(Error::Contract(format!(
                "{}: record {} does not match the text database (expected {})",
                path.display(),
                r.id,
                j.id()
            )));
        }
    }
    Ok((records, valid_len))
}

/// Every text in every dialect, in `(text index, did)` order. Results are
/// computed by `config.workers` threads and appended by this thread in job
/// order, so the manifest is always a prefix of the complete run and any
/// worker count or restart yields the same file.
pub fn run_pipeline(texts: &[(usize, String)], hooks: &PipelineHooks, config: &PipelineConfig) -> Result<PipelineSummary> {
    config.gate.validate()?;
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts to process".into()));
    }
    let jobs: Vec<Job> = texts
        .iter()
        .flat_map(|(i, t)| {
            Dialect::ALL.iter().map(move |&dialect| Job {
                text_index: *i,
                text: t,
                dialect,
            })
        })
        .collect();
    let wav_dir = config.out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let manifest = config.out_dir.join(MANIFEST_FILE);
    let (existing, valid_len) = resume_prefix(&manifest, &jobs)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .map_err(|e| Error::io(&manifest, e))?;
    file.set_len(valid_len).map_err(|e| Error::io(&manifest, e))?;

    let mut summary = PipelineSummary {
        total_jobs: jobs.len(),
        resumed: existing.len(),
        ..PipelineSummary::default()
    };
    for r in &existing {
        *summary.status_counts.entry(r.status.name()).or_default() += 1;
    }
    if summary.resumed > 0 {
        log::info!("resuming after {} of {} records", summary.resumed, jobs.len());
    }

    let workers = config.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let remaining = &jobs[existing.len()..];
    let budget = config.limit.unwrap_or(usize::MAX).min(remaining.len());
    for chunk in remaining[..budget].chunks(workers * 2) {
        let results: Vec<Result<UtteranceRecord>> =
            pool.install(|| chunk.par_iter().map(|j| process(j, hooks, config)).collect());
        for r in results {
            let record = r?;
            append(&mut file, &manifest, &record)?;
            *summary.status_counts.entry(record.status.name()).or_default() += 1;
            summary.written += 1;
        }
    }
    Ok(summary)
}

fn append(file: &mut File, path: &Path, record: &UtteranceRecord) -> Result<()> {
    let line = record_line(record)? + "\n";
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}
