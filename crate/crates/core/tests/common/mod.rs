//! Shared fixtures for the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmd_core::alignment::{duration_loss, DurationPredictor};
use tmd_core::cfm::{FieldNet, FieldNetConfig};
use tmd_core::dialect::{Dialect, DialectEmbedding, DialectNorm, Fusion};
use tmd_core::encoder::{dsdr_forward, mhsa, AttentionParams, DsdrBlockParams};
use tmd_core::tensor::{check_gradients, GradCheckReport, ParamStore, Tape, Tensor, Var};
use tmd_core::Result;

pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Fusion,
    Attention,
    Dsdr,
    Duration,
    FieldNet,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::Fusion, Layer::Attention, Layer::Dsdr, Layer::Duration, Layer::FieldNet];
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(Tensor::randn(&shape, 1.0, rng));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Builds one randomly sized instance of `layer` (inputs stored as
/// parameters so they are checked too) and compares its gradients with
/// central differences. Returns a description of the configuration.
pub fn check_layer(layer: Layer, seed: u64) -> Result<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let rows = rng.random_range(1..=5);
    let dialect = Dialect::ALL[rng.random_range(0..3)];
    let r_seed: u64 = rng.random();
    match layer {
        Layer::Fusion => {
            let (hidden, ddim) = (rng.random_range(2..=6), rng.random_range(2..=5));
            let norm = if rng.random_bool(0.5) { DialectNorm::L2 } else { DialectNorm::LayerNorm };
            let emb = DialectEmbedding::new(&mut store, "emb", ddim, norm, &mut rng)?;
            let fusion = Fusion::new(&mut store, "fusion", ddim, hidden, &mut rng)?;
            let x = store.add("input", Tensor::randn(&[rows, hidden], 1.0, &mut rng))?;
            let report = check_gradients(
                &store,
                |tape, s| {
                    let h = tape.param(s, x);
                    let d = emb.embed(tape, s, dialect)?;
                    let out = fusion.fuse(tape, s, h, d)?;
                    project(tape, out, &mut ChaCha8Rng::seed_from_u64(r_seed))
                },
                GRAD_STEP,
            )?;
            Ok((format!("fusion rows={rows} hidden={hidden} dialect_dim={ddim} norm={norm:?}"), report))
        }
        Layer::Attention => {
            let heads = rng.random_range(1..=3);
            let dim = heads * rng.random_range(1..=3);
            let attn = AttentionParams::new(&mut store, "attn", dim, heads, &mut rng)?;
            let x = store.add("input", Tensor::randn(&[rows, dim], 1.0, &mut rng))?;
            let mut pad: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.3)).collect();
            pad[0] = false;
            let report = check_gradients(
                &store,
                |tape, s| {
                    let h = tape.param(s, x);
                    let out = mhsa(tape, s, h, &attn, &pad)?.output;
                    project(tape, out, &mut ChaCha8Rng::seed_from_u64(r_seed))
                },
                GRAD_STEP,
            )?;
            Ok((format!("mhsa rows={rows} dim={dim} heads={heads} pad={pad:?}"), report))
        }
        Layer::Dsdr => {
            let (dim, hidden) = (rng.random_range(2..=5), rng.random_range(2..=6));
            let block = DsdrBlockParams::new(&mut store, "dsdr", dim, hidden, true, &mut rng)?;
            let x = store.add("input", Tensor::randn(&[rows, dim], 1.0, &mut rng))?;
            let report = check_gradients(
                &store,
                |tape, s| {
                    let h = tape.param(s, x);
                    let out = dsdr_forward(tape, s, h, dialect, &block, 0, &mut Vec::new())?;
                    project(tape, out, &mut ChaCha8Rng::seed_from_u64(r_seed))
                },
                GRAD_STEP,
            )?;
            Ok((format!("dsdr rows={rows} dim={dim} hidden={hidden} dialect={dialect}"), report))
        }
        Layer::Duration => {
            let (input, hidden) = (rng.random_range(2..=5), rng.random_range(2..=5));
            let kernel = [1, 3][rng.random_range(0..2)];
            let pred = DurationPredictor::new(&mut store, "dur", input, hidden, kernel, &mut rng)?;
            let x = store.add("input", Tensor::randn(&[rows, input], 1.0, &mut rng))?;
            let durations: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=6)).collect();
            let report = check_gradients(
                &store,
                |tape, s| {
                    let h = tape.param(s, x);
                    let log_d = pred.forward(tape, s, h)?;
                    duration_loss(tape, log_d, &durations)
                },
                GRAD_STEP,
            )?;
            Ok((format!("duration rows={rows} input={input} hidden={hidden} kernel={kernel}"), report))
        }
        Layer::FieldNet => {
            let config = FieldNetConfig {
                mel_bins: rng.random_range(2..=4),
                cond_dim: rng.random_range(2..=4),
                dialect_dim: rng.random_range(2..=4),
                hidden: rng.random_range(2..=5),
                time_dim: 2 * rng.random_range(1..=2),
                kernel: [1, 3][rng.random_range(0..2)],
                routed: rng.random_bool(0.5),
            };
            let desc = format!("field-net rows={rows} {config:?}");
            let net = FieldNet::new(&mut store, "field", config.clone(), &mut rng)?;
            let x_t = store.add("x_t", Tensor::randn(&[rows, config.mel_bins], 1.0, &mut rng))?;
            let cond = store.add("cond", Tensor::randn(&[rows, config.cond_dim], 1.0, &mut rng))?;
            let h_did = store.add("h_did", Tensor::randn(&[1, config.dialect_dim], 1.0, &mut rng))?;
            let target = Tensor::randn(&[rows, config.mel_bins], 1.0, &mut rng);
            let t: f64 = rng.random();
            let report = check_gradients(
                &store,
                |tape, s| {
                    let (x, c, d) = (tape.param(s, x_t), tape.param(s, cond), tape.param(s, h_did));
                    let out = net.forward(tape, s, x, t, c, d, dialect)?;
                    let y = tape.constant(target.clone());
                    tape.mse(out, y)
                },
                GRAD_STEP,
            )?;
            Ok((desc, report))
        }
    }
}

/// Pipeline hooks that need no trained model.
pub mod stubs {
    use std::fs;
    use std::hash::{DefaultHasher, Hash, Hasher};
    use std::path::Path;

    use tmd_core::dialect::Dialect;
    use tmd_core::pipeline::{Enhancer, MetricProvider, Synthesizer};
    use tmd_core::signal::Waveform;
    use tmd_core::{Error, Result};

    fn io(path: &Path, source: std::io::Error) -> Error {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// A short tone whose pitch and phase depend on the text, dialect and seed.
    pub struct ToneSynth;

    impl Synthesizer for ToneSynth {
        fn synthesize(&self, text: &str, dialect: Dialect, seed: u64) -> Result<Waveform> {
            let n = 400 + 80 * text.chars().count();
            let freq = 200.0 + 50.0 * dialect.id() as f64 + (seed % 97) as f64;
            let phase = (seed % 1000) as f64 / 1000.0;
            let samples = (0..n)
                .map(|i| 0.4 * (std::f64::consts::TAU * (freq * i as f64 / 8000.0 + phase)).sin())
                .collect();
            Waveform::new(samples, 8000)
        }
    }

    /// A value in `[lo, hi)` hashed from the audio bytes, so identical audio
    /// scores identically.
    pub struct HashedMetric {
        pub salt: u64,
        pub lo: f64,
        pub hi: f64,
    }

    impl MetricProvider for HashedMetric {
        fn score(&self, _id: &str, audio: &Path, _dialect: Dialect) -> Result<Option<f64>> {
            let bytes = fs::read(audio).map_err(|e| io(audio, e))?;
            let mut h = DefaultHasher::new();
            (self.salt, bytes).hash(&mut h);
            let u = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
            Ok(Some(self.lo + (self.hi - self.lo) * u))
        }
    }

    /// Fixed score, or a separate score for `*.enhanced.wav` files.
    pub struct Fixed {
        pub plain: f64,
        pub enhanced: f64,
    }

    impl MetricProvider for Fixed {
        fn score(&self, _id: &str, audio: &Path, _dialect: Dialect) -> Result<Option<f64>> {
            let name = audio.file_name().and_then(|n| n.to_str()).unwrap_or("");
            Ok(Some(if name.ends_with(".enhanced.wav") { self.enhanced } else { self.plain }))
        }
    }

    pub struct Broken;

    impl MetricProvider for Broken {
        fn score(&self, id: &str, _audio: &Path, _dialect: Dialect) -> Result<Option<f64>> {
            Err(Error::Contract(format!("provider offline for {id}")))
        }
    }

    pub struct CopyEnhancer;

    impl Enhancer for CopyEnhancer {
        fn enhance(&self, input: &Path, output: &Path) -> Result<()> {
            fs::copy(input, output).map_err(|e| io(output, e))?;
            Ok(())
        }
    }

    pub struct FailingEnhancer;

    impl Enhancer for FailingEnhancer {
        fn enhance(&self, _input: &Path, _output: &Path) -> Result<()> {
            Err(Error::Contract("enhancer crashed".into()))
        }
    }
}
