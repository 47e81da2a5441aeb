//! The full acoustic model: dialect embedding, routed text encoder, duration
//! predictor and flow-matching decoder, with training and synthesis.

use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_score, duration_loss, durations_from_log, length_regulate, mas, DurationPredictor};
use crate::cfm::{cfm_loss, euler_sample, ConditionedField, FieldNet, FieldNetConfig, DEFAULT_SIGMA_MIN};
use crate::dialect::{Dialect, DialectEmbedding, DialectNorm};
use crate::encoder::{Encoder, EncoderConfig, RouteEvent};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::signal::{AudioConfig, AudioFrontend, Waveform};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, ParamGrads, ParamStore, Tape, Tensor, Var,
};
use crate::text::{tokenize, TokenSequence, Vocab, DEFAULT_VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub dialect_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Dialect-routed feed-forward in every encoder block; `false` gives the
    /// shared-FFN ablation.
    pub dsdr: bool,
    /// Per-block override of `dsdr`; must have `blocks` entries when set.
    pub dsdr_layers: Option<Vec<bool>>,
    /// Add the projected dialect embedding to encoder and decoder features.
    pub fusion: bool,
    pub dialect_norm: DialectNorm,
    /// Route the decoder's feed-forward by dialect as well.
    pub decoder_dsdr: bool,
    pub duration_hidden: usize,
    pub duration_kernel: usize,
    pub field_hidden: usize,
    pub field_time_dim: usize,
    pub field_kernel: usize,
    pub sigma_min: f64,
    pub ode_steps: usize,
    /// Synthesis fails rather than produce more frames than this.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            hidden: 192,
            dialect_dim: 128,
            blocks: 2,
            heads: 2,
            ffn_hidden: 192,
            dsdr: true,
            dsdr_layers: None,
            fusion: true,
            dialect_norm: DialectNorm::L2,
            decoder_dsdr: false,
            duration_hidden: 64,
            duration_kernel: 3,
            field_hidden: 128,
            field_time_dim: 16,
            field_kernel: 3,
            sigma_min: DEFAULT_SIGMA_MIN,
            ode_steps: 10,
            max_frames: 5000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < crate::text::NUM_RESERVED {
            return bad(format!("vocab_size {} is below the 4 reserved ids", self.vocab_size));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("dialect_dim", self.dialect_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("duration_hidden", self.duration_hidden),
            ("field_hidden", self.field_hidden),
            ("field_time_dim", self.field_time_dim),
            ("ode_steps", self.ode_steps),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        for (name, k) in [("duration_kernel", self.duration_kernel), ("field_kernel", self.field_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if let Some(layers) = &self.dsdr_layers {
            if layers.len() != self.blocks {
                return bad(format!("dsdr_layers has {} entries for {} blocks", layers.len(), self.blocks));
            }
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return bad(format!("sigma_min {} outside [0, 1)", self.sigma_min));
        }
        Ok(())
    }

    pub fn routed_blocks(&self) -> Vec<bool> {
        self.dsdr_layers.clone().unwrap_or_else(|| vec![self.dsdr; self.blocks])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Set by the caller; run configuration files carry a single top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: 2e-3,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument("learning_rate and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised utterance: tokens, dialect and its log-mel target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub dialect: Dialect,
    /// `frames × n_mels` natural-log mel energies.
    pub mel: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub duration: f64,
    pub prior: f64,
    pub flow: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TtsModel {
    pub config: ModelConfig,
    pub audio: AudioConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub dialect: DialectEmbedding,
    pub encoder: Encoder,
    /// Projects encoder states to the mel space for alignment and the prior loss.
    pub mu_proj: Linear,
    pub duration: DurationPredictor,
    pub field: FieldNet,
    /// Global log-mel normalization applied to decoder targets.
    pub mel_mean: f64,
    pub mel_std: f64,
}

/// Per-utterance losses and the tape that produced them.
pub struct ForwardLosses {
    pub tape: Tape,
    pub duration: Var,
    pub prior: Var,
    pub flow: Var,
    pub total: Var,
    pub trace: Vec<RouteEvent>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub log_mel: Tensor,
    pub durations: Vec<usize>,
    pub waveform: Waveform,
    pub trace: Vec<RouteEvent>,
    pub synthesis_seconds: f64,
}

impl Synthesis {
    pub fn audio_seconds(&self) -> f64 {
        self.waveform.duration_seconds()
    }

    pub fn rtf(&self) -> Result<f64> {
        crate::eval::rtf(self.synthesis_seconds, self.audio_seconds())
    }
}

impl TtsModel {
    pub fn new(config: ModelConfig, audio: AudioConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocab has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let m = audio.n_mels;
        let dialect = DialectEmbedding::new(&mut store, "dialect", c.dialect_dim, c.dialect_norm, &mut rng)?;
        let encoder = Encoder::new(
            &mut store,
            "encoder",
            EncoderConfig {
                vocab_size: c.vocab_size,
                hidden: c.hidden,
                ffn_hidden: c.ffn_hidden,
                heads: c.heads,
                routed: c.routed_blocks(),
                dialect_dim: c.dialect_dim,
            },
            &mut rng,
        )?;
        let mu_proj = Linear::new(&mut store, "mu_proj", c.hidden, m, &mut rng)?;
        let duration = DurationPredictor::new(
            &mut store,
            "duration",
            c.hidden,
            c.duration_hidden,
            c.duration_kernel,
            &mut rng,
        )?;
        let field = FieldNet::new(
            &mut store,
            "decoder",
            FieldNetConfig {
                mel_bins: m,
                cond_dim: c.hidden + m,
                dialect_dim: c.dialect_dim,
                hidden: c.field_hidden,
                time_dim: c.field_time_dim,
                kernel: c.field_kernel,
                routed: c.decoder_dsdr,
            },
            &mut rng,
        )?;
        Ok(TtsModel {
            config,
            audio,
            vocab,
            store,
            dialect,
            encoder,
            mu_proj,
            duration,
            field,
            mel_mean: 0.0,
            mel_std: 1.0,
        })
    }

    /// Sets the global log-mel normalization from training targets.
    pub fn fit_normalization(&mut self, examples: &[TrainExample]) {
        let values: Vec<f64> = examples.iter().flat_map(|e| e.mel.data().iter().copied()).collect();
        if let Some(a) = crate::eval::mean_std(&values) {
            self.mel_mean = a.mean;
            self.mel_std = a.std.max(1e-3);
        }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, &self.vocab)
    }

    /// `h_did`, or a zero row when fusion is disabled.
    fn dialect_vector(&self, tape: &mut Tape, dialect: Dialect) -> Result<Var> {
        if self.config.fusion {
            self.dialect.embed(tape, &self.store, dialect)
        } else {
            Ok(tape.constant(Tensor::zeros(&[1, self.config.dialect_dim])))
        }
    }

    fn normalize(&self, mel: &Tensor) -> Tensor {
        mel.map(|v| (v - self.mel_mean) / self.mel_std)
    }

    /// Builds the three training losses for one utterance. `seed` drives the
    /// flow-matching noise and time draw.
    pub fn forward_losses(&self, example: &TrainExample, seed: u64) -> Result<ForwardLosses> {
        if example.mel.cols() != self.audio.n_mels {
            return Err(Error::shape("training mel", example.mel.shape(), &[example.mel.rows(), self.audio.n_mels]));
        }
        let y = self.normalize(&example.mel);
        let mut tape = Tape::new();
        let h_did = self.dialect_vector(&mut tape, example.dialect)?;
        let enc = self.encoder.forward(&mut tape, &self.store, &example.tokens, example.dialect, h_did)?;
        let mu = self.mu_proj.forward(&mut tape, &self.store, enc.hidden)?;

        let score = alignment_score(tape.value(mu), &y)?;
        let path = mas(&score)?;

        let detached = tape.constant(tape.value(enc.hidden).clone());
        let log_d = self.duration.forward(&mut tape, &self.store, detached)?;
        let duration = duration_loss(&mut tape, log_d, &path.durations)?;

        let mu_up = length_regulate(&mut tape, mu, &path.durations)?;
        let target = tape.constant(y.clone());
        let prior = tape.mse(mu_up, target)?;

        let h_up = length_regulate(&mut tape, enc.hidden, &path.durations)?;
        let cond = tape.concat_cols(&[h_up, mu_up])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = &self.field;
        let store = &self.store;
        let dialect = example.dialect;
        let flow = cfm_loss(&mut tape, &y, self.config.sigma_min, &mut rng, |tape, x_t, t| {
            field.forward(tape, store, x_t, t, cond, h_did, dialect)
        })?;

        let sum = tape.add(duration, prior)?;
        let total = tape.add(sum, flow)?;
        Ok(ForwardLosses {
            tape,
            duration,
            prior,
            flow,
            total,
            trace: enc.trace,
        })
    }

    /// Loss values and parameter gradients for one utterance.
    pub fn utterance_gradients(&self, example: &TrainExample, seed: u64) -> Result<([f64; 4], ParamGrads)> {
        let f = self.forward_losses(example, seed)?;
        let grads = f.tape.backward(f.total)?;
        let value = |v: Var| f.tape.value(v).data()[0];
        Ok((
            [value(f.duration), value(f.prior), value(f.flow), value(f.total)],
            f.tape.param_grads(&grads),
        ))
    }

    /// Mean loss and gradients over a batch, computed in parallel and summed
    /// in batch order so results do not depend on the thread count.
    pub fn batch_gradients(&self, batch: &[&TrainExample], seeds: &[u64]) -> Result<([f64; 4], ParamGrads)> {
        let results: Vec<Result<([f64; 4], ParamGrads)>> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(e, &s)| self.utterance_gradients(e, s))
            .collect();
        let mut losses = [0.0; 4];
        let mut grads = ParamGrads::default();
        for r in results {
            let (l, g) = r?;
            for (a, b) in losses.iter_mut().zip(l) {
                *a += b;
            }
            grads.accumulate(&g);
        }
        let n = batch.len() as f64;
        losses.iter_mut().for_each(|l| *l /= n);
        grads.scale(1.0 / n);
        Ok((losses, grads))
    }

    /// Adam training over random mini-batches. `on_step` sees every loss
    /// record as it is produced.
    pub fn train(
        &mut self,
        examples: &[TrainExample],
        config: &TrainConfig,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut adam = Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        });
        let mut log = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            let batch: Vec<&TrainExample> = (0..config.batch_size)
                .map(|_| examples.choose(&mut rng).expect("non-empty"))
                .collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rand::Rng::random(&mut rng)).collect();
            let (l, mut grads) = self.batch_gradients(&batch, &seeds)?;
            grads.clip_global_norm(config.grad_clip);
            adam.step(&mut self.store, &grads)?;
            let rec = LossRecord {
                step,
                duration: l[0],
                prior: l[1],
                flow: l[2],
                total: l[3],
            };
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    /// Text → log-mel, without waveform reconstruction.
    pub fn synthesize_mel(&self, tokens: &TokenSequence, dialect: Dialect, seed: u64) -> Result<(Tensor, Vec<usize>, Vec<RouteEvent>)> {
        let mut tape = Tape::new();
        let h_did = self.dialect_vector(&mut tape, dialect)?;
        let enc = self.encoder.forward(&mut tape, &self.store, tokens, dialect, h_did)?;
        let log_d = self.duration.forward(&mut tape, &self.store, enc.hidden)?;
        let durations = durations_from_log(tape.value(log_d).data());
        let frames = durations.iter().try_fold(0usize, |a, &d| a.checked_add(d));
        match frames {
            Some(f) if f <= self.config.max_frames => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "predicted durations exceed max_frames = {}",
                    self.config.max_frames
                )))
            }
        }
        let mu = self.mu_proj.forward(&mut tape, &self.store, enc.hidden)?;
        let mu_up = length_regulate(&mut tape, mu, &durations)?;
        let h_up = length_regulate(&mut tape, enc.hidden, &durations)?;
        let cond = tape.concat_cols(&[h_up, mu_up])?;
        let field = ConditionedField {
            net: &self.field,
            store: &self.store,
            cond: tape.value(cond).clone(),
            h_did: tape.value(h_did).clone(),
            dialect,
        };
        let frames = cond_rows(&tape, cond);
        let y = euler_sample(&field, frames, self.audio.n_mels, self.config.ode_steps, seed)?;
        let log_mel = y.map(|v| v * self.mel_std + self.mel_mean);
        Ok((log_mel, durations, enc.trace))
    }

    /// Full text-to-waveform path, timed for the real-time factor.
    pub fn synthesize(&self, frontend: &AudioFrontend, text: &str, dialect: Dialect, seed: u64) -> Result<Synthesis> {
        let start = Instant::now();
        let tokens = self.tokenize(text);
        let (log_mel, durations, trace) = self.synthesize_mel(&tokens, dialect, seed)?;
        let samples = frontend.log_mel_to_samples(&log_mel, seed)?;
        let synthesis_seconds = start.elapsed().as_secs_f64();
        Ok(Synthesis {
            log_mel,
            durations,
            waveform: Waveform::new(samples, self.audio.sample_rate)?,
            trace,
            synthesis_seconds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vocab: Vec<String> = self.vocab.chars().iter().map(|&c| format!("{:04X}", c as u32)).collect();
        let ckpt = Checkpoint {
            meta: vec![
                ("kind".into(), "tts-model".into()),
                ("model".into(), serde_json::to_string(&self.config)?),
                ("audio".into(), serde_json::to_string(&self.audio)?),
                ("vocab".into(), vocab.join(",")),
                ("mel_mean".into(), format!("{:?}", self.mel_mean)),
                ("mel_std".into(), format!("{:?}", self.mel_std)),
            ],
            params: self.store.clone(),
        };
        save_checkpoint(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: m,
        };
        if ckpt.meta_value("kind") != Some("tts-model") {
            return Err(bad("not a tts-model checkpoint".into()));
        }
        let meta = |k: &str| ckpt.meta_value(k).ok_or_else(|| bad(format!("missing meta {k}")));
        let config: ModelConfig = serde_json::from_str(meta("model")?)?;
        let audio: AudioConfig = serde_json::from_str(meta("audio")?)?;
        let mut vocab_text = String::from("0\t<pad>\n1\t<unk>\n2\t<bos>\n3\t<eos>\n");
        for (i, hex) in meta("vocab")?.split(',').filter(|h| !h.is_empty()).enumerate() {
            vocab_text.push_str(&format!("{}\t{hex}\n", i + crate::text::NUM_RESERVED));
        }
        let vocab = Vocab::from_text(&vocab_text).map_err(|(_, m)| bad(m))?;
        let parse_f = |k: &str| -> Result<f64> { meta(k)?.parse().map_err(|e| bad(format!("{k}: {e}"))) };
        let mut model = TtsModel::new(config, audio, vocab, 0)?;
        model.mel_mean = parse_f("mel_mean")?;
        model.mel_std = parse_f("mel_std")?;
        if ckpt.params.len() != model.store.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for (_, name, value) in ckpt.params.iter() {
            let id = model.store.id(name).ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
            model.store.set(id, value.clone())?;
        }
        Ok(model)
    }
}

fn cond_rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_audio_config, toy_corpus, toy_model_config, ToyCorpusConfig};

    fn small() -> (TtsModel, Vec<TrainExample>) {
        let corpus = toy_corpus(&ToyCorpusConfig {
            texts: 4,
            ..ToyCorpusConfig::default()
        });
        let mut model = TtsModel::new(toy_model_config(true), toy_audio_config(), corpus.vocab.clone(), 1).unwrap();
        let examples = corpus.train_examples(&model.vocab);
        model.fit_normalization(&examples);
        (model, examples)
    }

    #[test]
    fn losses_are_finite_and_trace_matches_dialect() {
        let (model, examples) = small();
        for e in &examples[..3] {
            let f = model.forward_losses(e, 5).unwrap();
            assert!(f.tape.value(f.total).item().unwrap().is_finite());
            assert_eq!(f.trace.len(), model.config.blocks);
            assert!(f.trace.iter().all(|r| r.branch == e.dialect.id()));
        }
    }

    #[test]
    fn batch_gradients_are_order_deterministic() {
        let (model, examples) = small();
        let batch: Vec<&TrainExample> = examples.iter().take(4).collect();
        let seeds = [1, 2, 3, 4];
        let a = model.batch_gradients(&batch, &seeds).unwrap();
        let b = model.batch_gradients(&batch, &seeds).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut model, examples) = small();
        model
            .train(&examples, &TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::default() }, |_| {})
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = TtsModel::load(&path).unwrap();
        assert_eq!(loaded.store, model.store);
        assert_eq!(loaded.vocab, model.vocab);
        assert_eq!(loaded.mel_mean, model.mel_mean);
        let tokens = model.tokenize("ཀཁ");
        assert_eq!(
            model.synthesize_mel(&tokens, Dialect::Kham, 3).unwrap().0,
            loaded.synthesize_mel(&tokens, Dialect::Kham, 3).unwrap().0
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dsdr_layers = Some(vec![true]);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.field_kernel = 2;
        assert!(c.validate().is_err());
    }
}
