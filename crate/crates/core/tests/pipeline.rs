mod common;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use common::stubs::{Broken, CopyEnhancer, FailingEnhancer, Fixed, HashedMetric, ToneSynth};
use tmd_core::pipeline::{
    read_manifest, run_pipeline, Enhancer, GateConfig, MetricProvider, PipelineConfig, PipelineHooks, Status,
    UtteranceRecord, MANIFEST_FILE,
};

fn texts(n: usize) -> Vec<(usize, String)> {
    let alphabet: Vec<char> = "ཀཁགངཅཆཇཉཏཐ".chars().collect();
    (0..n)
        .map(|i| (i, (0..3 + i % 4).map(|k| alphabet[(i * 7 + k * 3) % alphabet.len()]).collect()))
        .collect()
}

fn config(out: &Path, workers: usize) -> PipelineConfig {
    PipelineConfig {
        out_dir: out.to_path_buf(),
        workers,
        seed: 11,
        gate: GateConfig::default(),
        limit: None,
    }
}

fn hooks<'a>(
    decs: &'a dyn MetricProvider,
    pesq: Option<&'a dyn MetricProvider>,
    enhancer: Option<&'a dyn Enhancer>,
) -> PipelineHooks<'a> {
    PipelineHooks {
        synthesizer: &ToneSynth,
        decs,
        pesq,
        dnsmos: None,
        enhancer,
    }
}

fn manifest(out: &Path) -> Vec<UtteranceRecord> {
    read_manifest(&out.join(MANIFEST_FILE)).unwrap()
}

const DECS: HashedMetric = HashedMetric {
    salt: 1,
    lo: 0.6,
    hi: 1.0,
};
const PESQ: HashedMetric = HashedMetric {
    salt: 2,
    lo: 2.0,
    hi: 4.5,
};

#[test]
fn worker_count_does_not_change_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let h = hooks(&DECS, Some(&PESQ), Some(&CopyEnhancer));
    run_pipeline(&texts(7), &h, &config(&a, 1)).unwrap();
    run_pipeline(&texts(7), &h, &config(&b, 3)).unwrap();
    assert_eq!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(b.join(MANIFEST_FILE)).unwrap()
    );
    let records = manifest(&a);
    assert_eq!(records.len(), 21);
    for (r, want) in records.iter().zip((0..7).flat_map(|t| (0..3).map(move |d| (t, d)))) {
        assert_eq!(r.id, format!("{:05}_{}", want.0, tmd_core::dialect::Dialect::ALL[want.1].name()));
        assert_eq!(
            fs::read(a.join(&r.audio_path)).unwrap(),
            fs::read(b.join(&r.audio_path)).unwrap()
        );
    }
}

#[test]
fn identity_enhancement_that_still_fails_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let pesq = Fixed {
        plain: 2.0,
        enhanced: 2.0,
    };
    let decs = Fixed {
        plain: 0.9,
        enhanced: 0.9,
    };
    let summary = run_pipeline(&texts(2), &hooks(&decs, Some(&pesq), Some(&CopyEnhancer)), &config(dir.path(), 1)).unwrap();
    assert_eq!(summary.status_counts["rejected"], 6);
    for r in manifest(dir.path()) {
        assert_eq!(r.status, Status::Rejected);
        assert!(r.audio_path.to_str().unwrap().ends_with(".enhanced.wav"));
        assert!(dir.path().join(&r.audio_path).exists());
    }
}

#[test]
fn successful_enhancement_is_marked_enhanced() {
    let dir = tempfile::tempdir().unwrap();
    let pesq = Fixed {
        plain: 2.0,
        enhanced: 3.5,
    };
    let decs = Fixed {
        plain: 0.9,
        enhanced: 0.9,
    };
    run_pipeline(&texts(1), &hooks(&decs, Some(&pesq), Some(&CopyEnhancer)), &config(dir.path(), 1)).unwrap();
    for r in manifest(dir.path()) {
        assert_eq!(r.status, Status::Enhanced);
        assert_eq!(r.metrics["pesq"], 3.5);
    }
}

#[test]
fn hook_failures_quarantine_records() {
    let dir = tempfile::tempdir().unwrap();
    let pesq = Fixed {
        plain: 1.0,
        enhanced: 1.0,
    };
    let h = hooks(&DECS, Some(&pesq), Some(&FailingEnhancer));
    let summary = run_pipeline(&texts(2), &h, &config(&dir.path().join("enh"), 1)).unwrap();
    assert!(summary.complete());
    for r in manifest(&dir.path().join("enh")) {
        assert_ne!(r.status, Status::Accepted);
        if r.metrics["decs"] > 0.8 {
            assert_eq!(r.status, Status::PendingReview);
        }
    }

    run_pipeline(&texts(2), &hooks(&Broken, None, None), &config(&dir.path().join("dec"), 1)).unwrap();
    let records = manifest(&dir.path().join("dec"));
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.status == Status::PendingReview && r.metrics.is_empty()));

    run_pipeline(&texts(1), &hooks(&DECS, Some(&Broken), None), &config(&dir.path().join("pesq"), 1)).unwrap();
    assert!(manifest(&dir.path().join("pesq")).iter().all(|r| r.status == Status::PendingReview));
}

#[test]
fn enhancement_without_a_hook_waits_for_review() {
    let dir = tempfile::tempdir().unwrap();
    let pesq = Fixed {
        plain: 1.0,
        enhanced: 1.0,
    };
    let decs = Fixed {
        plain: 0.95,
        enhanced: 0.95,
    };
    run_pipeline(&texts(1), &hooks(&decs, Some(&pesq), None), &config(dir.path(), 1)).unwrap();
    assert!(manifest(dir.path()).iter().all(|r| r.status == Status::PendingReview));
}

#[cfg(unix)]
#[test]
fn external_command_hooks() {
    use tmd_core::pipeline::CommandEnhancer;
    let dir = tempfile::tempdir().unwrap();
    let pesq = Fixed {
        plain: 2.0,
        enhanced: 3.2,
    };
    let decs = Fixed {
        plain: 0.9,
        enhanced: 0.9,
    };
    let cp = CommandEnhancer {
        program: "cp".into(),
        args: vec![],
    };
    run_pipeline(&texts(1), &hooks(&decs, Some(&pesq), Some(&cp)), &config(&dir.path().join("cp"), 1)).unwrap();
    assert!(manifest(&dir.path().join("cp")).iter().all(|r| r.status == Status::Enhanced));

    let fail = CommandEnhancer {
        program: "false".into(),
        args: vec![],
    };
    run_pipeline(&texts(1), &hooks(&decs, Some(&pesq), Some(&fail)), &config(&dir.path().join("f"), 1)).unwrap();
    assert!(manifest(&dir.path().join("f")).iter().all(|r| r.status == Status::PendingReview));
}

#[test]
fn interrupted_run_resumes_to_the_same_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let h = hooks(&DECS, Some(&PESQ), Some(&CopyEnhancer));
    run_pipeline(&texts(5), &h, &config(&full, 2)).unwrap();

    let mut limited = config(&part, 2);
    limited.limit = Some(8);
    let first = run_pipeline(&texts(5), &h, &limited).unwrap();
    assert_eq!((first.written, first.complete()), (8, false));
    let mut f = OpenOptions::new().append(true).open(part.join(MANIFEST_FILE)).unwrap();
    f.write_all(b"{\"id\":\"00002_kham\",\"te").unwrap();
    drop(f);

    let second = run_pipeline(&texts(5), &h, &config(&part, 1)).unwrap();
    assert_eq!((second.resumed, second.written), (8, 7));
    assert_eq!(
        fs::read(full.join(MANIFEST_FILE)).unwrap(),
        fs::read(part.join(MANIFEST_FILE)).unwrap()
    );

    let third = run_pipeline(&texts(5), &h, &config(&part, 1)).unwrap();
    assert_eq!((third.resumed, third.written), (15, 0));
}

#[test]
fn resume_against_a_different_text_database_fails() {
    let dir = tempfile::tempdir().unwrap();
    let h = hooks(&DECS, None, None);
    run_pipeline(&texts(2), &h, &config(dir.path(), 1)).unwrap();
    let mut changed = texts(2);
    changed[0].1 = "ཐཐཐ".into();
    assert!(run_pipeline(&changed, &h, &config(dir.path(), 1)).is_err());
}
