//! Synthetic parallel corpus with dialect-dependent spectral targets, small
//! enough to train on in seconds.
//!
//! Every character owns a spectral pattern `p_c` (zero mean across the
//! alphabet in every bin) and a base duration. A dialect scales the pattern
//! bin-wise by its gain profile `g_d`, so a frame of character `c` in dialect
//! `d` is `floor + g_d ⊙ p_c + noise`. One leading and one trailing floor
//! frame stand in for BOS/EOS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialect::{Dialect, NUM_DIALECTS};
use crate::eval::LabeledMel;
use crate::model::{ModelConfig, TrainExample};
use crate::signal::AudioConfig;
use crate::tensor::Tensor;
use crate::text::{build_vocab, tokenize, Vocab, NUM_RESERVED};

/// Ten Tibetan consonants, U+0F40 onwards.
pub const TOY_ALPHABET: [char; 10] = ['ཀ', 'ཁ', 'ག', 'ང', 'ཅ', 'ཆ', 'ཇ', 'ཉ', 'ཏ', 'ཐ'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    /// Distinct texts; each is rendered in all three dialects.
    pub texts: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub n_mels: usize,
    /// Standard deviation of the per-frame noise, in log-mel units.
    pub noise: f64,
    /// Amplitude of the dialect gain profiles around 1.
    pub dialect_contrast: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            texts: 100,
            min_chars: 4,
            max_chars: 9,
            n_mels: 20,
            noise: 0.1,
            dialect_contrast: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub text_index: usize,
    pub text: String,
    pub dialect: Dialect,
    /// `frames × n_mels` log-mel target.
    pub mel: Tensor,
    /// Frames per token, BOS and EOS included.
    pub durations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub texts: Vec<String>,
    pub utterances: Vec<ToyUtterance>,
    /// Per-character patterns, `alphabet × n_mels`.
    pub patterns: Tensor,
    /// Per-dialect gain profiles, `3 × n_mels`.
    pub gains: Tensor,
}

/// Bin-wise gain of `dialect`: each dialect emphasises a different third of
/// the spectrum.
pub fn dialect_gain(dialect: Dialect, bin: usize, n_mels: usize, contrast: f64) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * (bin as f64 / n_mels as f64 - dialect.id() as f64 / NUM_DIALECTS as f64);
    1.0 + contrast * phase.cos()
}

fn floor_level(bin: usize) -> f64 {
    -3.0 - 0.05 * bin as f64
}

pub fn toy_corpus(config: &ToyCorpusConfig) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.n_mels;
    let a = TOY_ALPHABET.len();

    let mut raw = Tensor::randn(&[a, m], 1.0, &mut rng).into_data();
    for j in 0..m {
        let mean = (0..a).map(|i| raw[i * m + j]).sum::<f64>() / a as f64;
        for i in 0..a {
            raw[i * m + j] -= mean;
        }
    }
    let patterns = Tensor::new(vec![a, m], raw).expect("shape matches data");
    let base_durations: Vec<usize> = (0..a).map(|_| rng.random_range(2..=5)).collect();
    let gains = Tensor::from_rows(
        &Dialect::ALL
            .iter()
            .map(|&d| (0..m).map(|j| dialect_gain(d, j, m, config.dialect_contrast)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )
    .expect("gain rows share a length");

    let texts: Vec<String> = (0..config.texts)
        .map(|_| {
            let len = rng.random_range(config.min_chars..=config.max_chars.max(config.min_chars));
            (0..len).map(|_| TOY_ALPHABET[rng.random_range(0..a)]).collect()
        })
        .collect();

    let mut utterances = Vec::with_capacity(texts.len() * NUM_DIALECTS);
    for (ti, text) in texts.iter().enumerate() {
        for &dialect in &Dialect::ALL {
            let chars: Vec<usize> = text
                .chars()
                .map(|c| TOY_ALPHABET.iter().position(|&x| x == c).expect("toy alphabet"))
                .collect();
            let mut durations = vec![1];
            for &c in &chars {
                let jitter: i64 = rng.random_range(-1..=1);
                durations.push((base_durations[c] as i64 + jitter).max(1) as usize);
            }
            durations.push(1);
            let mut rows = Vec::new();
            for (k, &d) in durations.iter().enumerate() {
                let ch = k.checked_sub(1).and_then(|i| chars.get(i).copied());
                for _ in 0..d {
                    let row: Vec<f64> = (0..m)
                        .map(|j| {
                            let voiced = ch.map_or(0.0, |c| gains.get(dialect.id(), j) * patterns.get(c, j));
                            let noise: f64 = rng.sample(rand_distr::StandardNormal);
                            floor_level(j) + voiced + config.noise * noise
                        })
                        .collect();
                    rows.push(row);
                }
            }
            utterances.push(ToyUtterance {
                id: format!("toy{ti:04}_{}", dialect.name()),
                text_index: ti,
                text: text.clone(),
                dialect,
                mel: Tensor::from_rows(&rows).expect("rows share a length"),
                durations,
            });
        }
    }
    let vocab = build_vocab(&[TOY_ALPHABET.iter().collect::<String>()], a + NUM_RESERVED)
        .expect("non-empty alphabet");
    ToyCorpus {
        vocab,
        texts,
        utterances,
        patterns,
        gains,
    }
}

impl ToyCorpus {
    pub fn train_examples(&self, vocab: &Vocab) -> Vec<TrainExample> {
        self.utterances
            .iter()
            .map(|u| TrainExample {
                id: u.id.clone(),
                tokens: tokenize(&u.text, vocab),
                dialect: u.dialect,
                mel: u.mel.clone(),
            })
            .collect()
    }

    pub fn labeled_mels(&self) -> Vec<LabeledMel> {
        self.utterances
            .iter()
            .map(|u| LabeledMel {
                id: u.id.clone(),
                dialect: u.dialect,
                mel: u.mel.clone(),
            })
            .collect()
    }
}

/// 16 kHz, 512-point FFT, hop 128, 20 mel bins.
pub fn toy_audio_config() -> AudioConfig {
    AudioConfig {
        sample_rate: 16000,
        n_fft: 512,
        hop_length: 128,
        n_mels: 20,
        f_min: 0.0,
        f_max: None,
        griffin_lim_iters: 16,
    }
}

/// Small model for the toy corpus. `dsdr = false` gives the shared-FFN
/// ablation with otherwise identical structure.
pub fn toy_model_config(dsdr: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: TOY_ALPHABET.len() + NUM_RESERVED,
        hidden: 32,
        dialect_dim: 16,
        blocks: 2,
        heads: 2,
        ffn_hidden: 32,
        dsdr,
        duration_hidden: 16,
        field_hidden: 48,
        field_time_dim: 8,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_determinism() {
        let cfg = ToyCorpusConfig {
            texts: 5,
            ..ToyCorpusConfig::default()
        };
        let a = toy_corpus(&cfg);
        let b = toy_corpus(&cfg);
        assert_eq!(a.utterances.len(), 15);
        for (u, v) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(u.mel, v.mel);
            assert_eq!(u.mel.rows(), u.durations.iter().sum::<usize>());
            assert_eq!(u.durations.len(), u.text.chars().count() + 2);
            assert_eq!(u.mel.cols(), 20);
        }
        assert_eq!(a.vocab.len(), 14);
    }

    #[test]
    fn patterns_are_centred_per_bin() {
        let c = toy_corpus(&ToyCorpusConfig {
            texts: 1,
            ..ToyCorpusConfig::default()
        });
        for j in 0..20 {
            let s: f64 = (0..TOY_ALPHABET.len()).map(|i| c.patterns.get(i, j)).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn gain_profiles_differ() {
        for j in 0..20 {
            let g: Vec<f64> = Dialect::ALL.iter().map(|&d| dialect_gain(d, j, 20, 0.8)).collect();
            assert!(g.iter().all(|&v| v > 0.0));
        }
        let rows: Vec<Vec<f64>> = Dialect::ALL
            .iter()
            .map(|&d| (0..20).map(|j| dialect_gain(d, j, 20, 0.8)).collect())
            .collect();
        assert_ne!(rows[0], rows[1]);
        assert_ne!(rows[1], rows[2]);
    }
}
