use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tmd_core::cfm::MelSpectrogram;
use tmd_core::dialect::{dialect_id, Dialect};
use tmd_core::eval::{
    argmax, decs, dialect_features, si_sdr, stoi, train_dialect_classifier, write_feature_csv, DialectClassifier,
    LabeledMel, MetricReport,
};
use tmd_core::model::{TrainExample, TtsModel};
use tmd_core::pipeline::{
    dataset_stats, export_review_queue, import_verdicts, manifest_dir, read_manifest, read_text_db, run_pipeline,
    write_manifest, ClassifierDecs, CommandEnhancer, Enhancer, FileMetricProvider, MetricProvider, ModelSynthesizer,
    PipelineConfig, PipelineHooks, Status, UtteranceRecord, MANIFEST_FILE,
};
use tmd_core::signal::{resample, AudioConfig, AudioFrontend, Waveform};
use tmd_core::tensor::Tensor;
use tmd_core::text::{build_vocab, Vocab};
use tmd_core::toy::{toy_audio_config, toy_corpus, toy_model_config, ToyCorpusConfig};

use crate::config::RunConfig;
use crate::{
    CliError, Common, EvalArgs, ExportFeaturesArgs, MakeToyArgs, PipelineArgs, ReviewExportArgs, ReviewImportArgs,
    StatsArgs, SynthArgs, TrainArgs, TrainClassifierArgs,
};

type CliResult = Result<(), CliError>;

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_records(manifest: &Path) -> Result<Vec<UtteranceRecord>, CliError> {
    require_file(manifest, "manifest")?;
    Ok(read_manifest(manifest)?)
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

/// Log-mel of a WAV (resampled to the frontend rate when needed) or of a
/// `.tmel` file.
fn audio_mel(path: &Path, frontend: &AudioFrontend) -> Result<Tensor, CliError> {
    if path.extension().is_some_and(|e| e == "tmel") {
        let mel = MelSpectrogram::load(path)?;
        if mel.num_bins() != frontend.config.n_mels {
            return Err(CliError::runtime(format!(
                "{} has {} mel bins, configuration expects {}",
                path.display(),
                mel.num_bins(),
                frontend.config.n_mels
            )));
        }
        return Ok(mel.frames);
    }
    let wav = Waveform::read_wav(path)?;
    let samples = conform_rate(&wav, frontend.config.sample_rate)?;
    Ok(frontend.log_mel(&samples)?)
}

fn conform_rate(wav: &Waveform, rate: u32) -> Result<Vec<f64>, CliError> {
    if wav.sample_rate == rate {
        Ok(wav.samples.clone())
    } else {
        Ok(resample(&wav.samples, wav.sample_rate, rate)?)
    }
}

fn classifier_frontend(audio: &AudioConfig, classifier: &DialectClassifier) -> Result<AudioFrontend, CliError> {
    if classifier.n_mels != audio.n_mels {
        return Err(CliError::usage(format!(
            "classifier expects {} mel bins but [audio] n_mels is {}",
            classifier.n_mels, audio.n_mels
        )));
    }
    Ok(AudioFrontend::new(audio)?)
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let records = load_records(&a.manifest)?;
    let kept: Vec<&UtteranceRecord> = records
        .iter()
        .filter(|r| matches!(r.status, Status::Accepted | Status::Enhanced))
        .collect();
    if kept.is_empty() {
        return Err(CliError::usage(format!(
            "manifest {} has no accepted or enhanced records",
            a.manifest.display()
        )));
    }
    if kept.len() < records.len() {
        log::info!("training on {} of {} records", kept.len(), records.len());
    }
    let vocab = match &a.vocab {
        Some(p) => {
            require_file(p, "vocab")?;
            Vocab::load(p)?
        }
        None => build_vocab(&kept.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), cfg.model.vocab_size)?,
    };
    let frontend = AudioFrontend::new(&cfg.audio)?;
    let dir = manifest_dir(&a.manifest);
    let mut model = TtsModel::new(cfg.model.clone(), cfg.audio.clone(), vocab, cfg.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let examples = kept
        .iter()
        .map(|r| {
            Ok(TrainExample {
                id: r.id.clone(),
                tokens: model.tokenize(&r.text),
                dialect: r.dialect,
                mel: audio_mel(&r.resolve_audio(&dir), &frontend)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    model.fit_normalization(&examples);

    let mut log_file = match &a.loss_log {
        Some(p) => Some(fs::File::create(p).map_err(write_err(p))?),
        None => None,
    };
    let mut io_error = None;
    let stdout = std::io::stdout();
    model.train(&examples, &cfg.train, |rec| {
        let mut out = stdout.lock();
        let _ = writeln!(
            out,
            "step={} duration={:.6} prior={:.6} flow={:.6} total={:.6}",
            rec.step, rec.duration, rec.prior, rec.flow, rec.total
        );
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(rec).expect("loss record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                io_error.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (io_error, &a.loss_log) {
        return Err(write_err(p)(e));
    }
    model.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    let dialect = dialect_id(&a.dialect)?;
    let cfg = load_config(&a.common)?;
    require_file(&a.checkpoint, "checkpoint")?;
    let mut model = TtsModel::load(&a.checkpoint)?;
    if let Some(n) = a.ode_steps {
        if n == 0 {
            return Err(CliError::usage("ode-steps must be positive"));
        }
        model.config.ode_steps = n;
    }
    let frontend = AudioFrontend::new(&model.audio)?;
    let out = model.synthesize(&frontend, &a.text, dialect, cfg.seed)?;
    let clipped = out.waveform.write_wav(&a.out)?;
    if clipped > 0 {
        log::warn!("{clipped} samples clipped to [-1, 1]");
    }
    if let Some(p) = &a.mel_out {
        MelSpectrogram::new(out.log_mel.clone(), model.audio.sample_rate, model.audio.hop_length as u32)?.save(p)?;
    }
    let rtf = out
        .rtf()
        .map_or_else(|_| "nan".to_string(), |r| format!("{r:.6}"));
    println!(
        "rtf={rtf} synthesis_seconds={:.6} audio_seconds={:.6} frames={} samples={}",
        out.synthesis_seconds,
        out.audio_seconds(),
        out.log_mel.rows(),
        out.waveform.samples.len()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let records = load_records(&a.manifest)?;
    let classifier = match &a.classifier {
        Some(p) => {
            require_file(p, "classifier")?;
            let c = DialectClassifier::load(p)?;
            let fe = classifier_frontend(&cfg.audio, &c)?;
            Some((c, fe))
        }
        None => None,
    };
    let timings = match &a.timings {
        Some(p) => {
            require_file(p, "timings")?;
            Some(FileMetricProvider::load(p)?)
        }
        None => None,
    };
    fs::create_dir_all(&a.out_dir).map_err(write_err(&a.out_dir))?;
    let dir = manifest_dir(&a.manifest);
    let mut report = MetricReport::default();
    let mut unpaired: Vec<(String, PathBuf)> = Vec::new();

    for r in &records {
        let file_name = r.audio_path.file_name().map(PathBuf::from).unwrap_or_default();
        let est_path = match &a.est_dir {
            Some(d) => d.join(&file_name),
            None => r.resolve_audio(&dir),
        };
        let Ok(est) = Waveform::read_wav(&est_path) else {
            unpaired.push((r.id.clone(), est_path));
            continue;
        };
        let mut metrics = BTreeMap::new();
        if let Some(ref_dir) = &a.ref_dir {
            let ref_path = ref_dir.join(&file_name);
            match Waveform::read_wav(&ref_path) {
                Ok(reference) => {
                    let est_samples = conform_rate(&est, reference.sample_rate)?;
                    let n = est_samples.len().min(reference.samples.len());
                    if n != reference.samples.len() || n != est_samples.len() {
                        log::info!("{}: lengths differ, scoring the first {n} samples", r.id);
                    }
                    let (x, y) = (&reference.samples[..n], &est_samples[..n]);
                    match si_sdr(x, y) {
                        Ok(v) => {
                            metrics.insert("si_sdr".to_string(), v);
                        }
                        Err(e) => log::warn!("{}: si_sdr skipped: {e}", r.id),
                    }
                    match stoi(x, y, reference.sample_rate) {
                        Ok(v) => {
                            metrics.insert("stoi".to_string(), v);
                        }
                        Err(e) => log::warn!("{}: stoi skipped: {e}", r.id),
                    }
                }
                Err(_) => unpaired.push((r.id.clone(), ref_path)),
            }
        }
        if let Some((clf, fe)) = &classifier {
            let mel = fe.log_mel(&conform_rate(&est, fe.config.sample_rate)?)?;
            let (probs, emb) = clf.predict_with_embedding(&mel)?;
            metrics.insert("decs".to_string(), decs(&emb, clf.centroid(r.dialect))?);
            let correct = argmax(&probs) == r.dialect.id();
            metrics.insert("dca".to_string(), if correct { 100.0 } else { 0.0 });
        }
        if let Some(t) = timings.as_ref().and_then(|t| t.values.get(&r.id)) {
            if est.duration_seconds() > 0.0 {
                metrics.insert("rtf".to_string(), t / est.duration_seconds());
            }
        }
        report.push(r.id.clone(), metrics);
    }

    report.write_jsonl(&a.out_dir.join("metrics.jsonl"))?;
    report.write_summary_csv(&a.out_dir.join("summary.csv"))?;
    let mut listing = String::new();
    for (id, p) in &unpaired {
        listing.push_str(&format!("{id}\t{}\n", p.display()));
    }
    let unpaired_path = a.out_dir.join("unpaired.txt");
    fs::write(&unpaired_path, &listing).map_err(write_err(&unpaired_path))?;

    if report.rows.is_empty() {
        println!("empty report");
    }
    for (k, agg) in report.aggregates() {
        println!("{k}\tcount={}\tmean={:.6}\tstd={:.6}", agg.count, agg.mean, agg.std);
    }
    for (id, p) in &unpaired {
        println!("unpaired\t{id}\t{}", p.display());
    }
    Ok(())
}

pub fn pipeline(a: PipelineArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    require_file(&a.texts, "text database")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let texts = read_text_db(&a.texts).map_err(|e| CliError::usage(e.to_string()))?;
    let load_stub = |p: &Option<PathBuf>, what: &str| -> Result<Option<FileMetricProvider>, CliError> {
        match p {
            Some(p) => {
                require_file(p, what)?;
                Ok(Some(FileMetricProvider::load(p)?))
            }
            None => Ok(None),
        }
    };
    let decs_stub = load_stub(&a.decs, "decs file")?;
    let pesq = load_stub(&a.pesq, "pesq file")?;
    let dnsmos = load_stub(&a.dnsmos, "dnsmos file")?;
    let model = TtsModel::load(&a.checkpoint)?;
    let classifier_decs = match (&decs_stub, &a.classifier) {
        (None, Some(p)) => {
            require_file(p, "classifier")?;
            let clf = DialectClassifier::load(p)?;
            let fe = classifier_frontend(&model.audio, &clf)?;
            Some(ClassifierDecs::new(clf, fe)?)
        }
        _ => None,
    };
    let decs_provider: &dyn MetricProvider = match (&decs_stub, &classifier_decs) {
        (Some(s), _) => s,
        (None, Some(c)) => c,
        (None, None) => return Err(CliError::usage("either --decs or --classifier is required")),
    };
    let enhancer = a.enhance_cmd.as_ref().map(|program| CommandEnhancer {
        program: program.clone(),
        args: a.enhance_args.clone(),
    });
    let synthesizer = ModelSynthesizer::new(model)?;
    let hooks = PipelineHooks {
        synthesizer: &synthesizer,
        decs: decs_provider,
        pesq: pesq.as_ref().map(|p| p as &dyn MetricProvider),
        dnsmos: dnsmos.as_ref().map(|p| p as &dyn MetricProvider),
        enhancer: enhancer.as_ref().map(|e| e as &dyn Enhancer),
    };
    let summary = run_pipeline(
        &texts,
        &hooks,
        &PipelineConfig {
            out_dir: a.out_dir.clone(),
            workers: cfg.workers,
            seed: cfg.seed,
            gate: cfg.gate,
            limit: a.limit,
        },
    )?;
    let counts: Vec<String> = summary.status_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "records={} resumed={} written={} complete={} {}",
        summary.resumed + summary.written,
        summary.resumed,
        summary.written,
        summary.complete(),
        counts.join(" ")
    );
    println!("manifest={}", a.out_dir.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn stats(a: StatsArgs) -> CliResult {
    let records = load_records(&a.manifest)?;
    let kept = [Status::Accepted, Status::Enhanced];
    let s = dataset_stats(&records, &a.manifest, a.kept_only.then_some(&kept[..]));
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
    } else {
        print!("{s}");
    }
    Ok(())
}

pub fn export_features(a: ExportFeaturesArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let records = load_records(&a.manifest)?;
    require_file(&a.classifier, "classifier")?;
    let clf = DialectClassifier::load(&a.classifier)?;
    let fe = classifier_frontend(&cfg.audio, &clf)?;
    let dir = manifest_dir(&a.manifest);
    let examples = records
        .iter()
        .map(|r| {
            Ok(LabeledMel {
                id: r.id.clone(),
                dialect: r.dialect,
                mel: audio_mel(&r.resolve_audio(&dir), &fe)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows = dialect_features(&clf, &examples)?;
    write_feature_csv(&rows, &a.out)?;
    println!("rows={}", rows.len());
    Ok(())
}

pub fn review_export(a: ReviewExportArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let records = load_records(&a.manifest)?;
    let n = export_review_queue(&records, &cfg.gate, &a.out)?;
    println!("pending_review={n}");
    Ok(())
}

pub fn review_import(a: ReviewImportArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.verdicts, "verdict file")?;
    let report = import_verdicts(&a.manifest, &a.verdicts)?;
    println!("applied={} unchanged={} errors={}", report.applied, report.unchanged, report.errors.len());
    for (line, message) in &report.errors {
        let e = serde_json::json!({ "error": "verdict", "line": line, "message": message });
        eprintln!("{e}");
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("{} verdict line(s) not applied", report.errors.len())))
    }
}

pub fn train_classifier(a: TrainClassifierArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.classifier.epochs = e;
    }
    let records = load_records(&a.manifest)?;
    let fe = AudioFrontend::new(&cfg.audio)?;
    let dir = manifest_dir(&a.manifest);
    let examples = records
        .iter()
        .map(|r| {
            Ok(LabeledMel {
                id: r.id.clone(),
                dialect: r.dialect,
                mel: audio_mel(&r.resolve_audio(&dir), &fe)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let trained = train_dialect_classifier(&examples, &cfg.classifier, cfg.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    trained.classifier.save(&a.out)?;
    let acc = trained
        .heldout_accuracy
        .map_or_else(|| "none".to_string(), |v| format!("{v:.2}"));
    println!("heldout_accuracy={acc} final_loss={:.6}", trained.final_loss);
    Ok(())
}

pub fn make_toy(a: MakeToyArgs) -> CliResult {
    if a.texts == 0 {
        return Err(CliError::usage("texts must be positive"));
    }
    let corpus = toy_corpus(&ToyCorpusConfig {
        texts: a.texts,
        seed: a.seed,
        ..ToyCorpusConfig::default()
    });
    let audio = toy_audio_config();
    let frontend = AudioFrontend::new(&audio)?;
    let wav_dir = a.out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(write_err(&wav_dir))?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for (i, u) in corpus.utterances.iter().enumerate() {
        let samples = frontend.log_mel_to_samples(&u.mel, a.seed.wrapping_add(i as u64))?;
        let wav = Waveform::new(samples, audio.sample_rate)?;
        let rel = PathBuf::from("wavs").join(format!("{}.wav", u.id));
        wav.write_wav(&a.out_dir.join(&rel))?;
        records.push(UtteranceRecord {
            id: u.id.clone(),
            text: u.text.clone(),
            dialect: u.dialect,
            audio_path: rel,
            duration_seconds: wav.duration_seconds(),
            metrics: BTreeMap::new(),
            status: Status::Accepted,
        });
    }
    write_manifest(&a.out_dir.join(MANIFEST_FILE), &records)?;
    let texts_path = a.out_dir.join("texts.txt");
    fs::write(&texts_path, corpus.texts.join("\n") + "\n").map_err(write_err(&texts_path))?;
    let config = RunConfig {
        seed: a.seed,
        model: toy_model_config(true),
        audio,
        ..RunConfig::default()
    };
    let config_path = a.out_dir.join("toy.toml");
    fs::write(&config_path, config.to_toml()).map_err(write_err(&config_path))?;
    println!(
        "utterances={} dialects={} manifest={} config={}",
        records.len(),
        Dialect::ALL.len(),
        a.out_dir.join(MANIFEST_FILE).display(),
        config_path.display()
    );
    Ok(())
}
