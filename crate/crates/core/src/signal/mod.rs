//! Deterministic DSP: STFT/ISTFT, mel filterbank, Griffin-Lim, resampling
//! and 16-bit WAV I/O.

mod griffin_lim;
mod mel;
mod resample;
mod stft;

pub use griffin_lim::{consistency_error, griffin_lim, griffin_lim_with_momentum, GriffinLimOutput, GRIFFIN_LIM_MOMENTUM};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank, INVERT_ITERS};
pub use resample::resample;
pub use stft::{hann_window, Spectrogram, StftPlan};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied before taking the log of mel energies.
pub const LOG_MEL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples outside `[−1, 1]`.
    pub fn clipped_count(&self) -> usize {
        self.samples.iter().filter(|v| v.abs() > 1.0).count()
    }

    /// Writes 16-bit PCM mono. Out-of-range samples are clamped; their count
    /// is returned so callers can flag them.
    pub fn write_wav(&self, path: &Path) -> Result<usize> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &v in &self.samples {
            writer.write_sample((v.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
        }
        writer.finalize()?;
        Ok(self.clipped_count())
    }

    /// Reads 16-bit PCM mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }
}

/// Duration in seconds read from a WAV header without decoding samples.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path)?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

fn default_f_max() -> Option<f64> {
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper mel edge; `None` means the Nyquist frequency.
    #[serde(default = "default_f_max")]
    pub f_max: Option<f64>,
    pub griffin_lim_iters: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop_length: 256,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            griffin_lim_iters: 32,
        }
    }
}

impl AudioConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }
}

/// Waveform ↔ log-mel conversion for one audio configuration.
#[derive(Debug, Clone)]
pub struct AudioFrontend {
    pub config: AudioConfig,
    pub plan: StftPlan,
    pub filterbank: MelFilterbank,
}

impl AudioFrontend {
    pub fn new(config: &AudioConfig) -> Result<Self> {
        Ok(AudioFrontend {
            plan: StftPlan::new(config.n_fft, config.hop_length)?,
            filterbank: MelFilterbank::new(
                config.sample_rate,
                config.n_fft,
                config.n_mels,
                config.f_min,
                config.f_max(),
            )?,
            config: config.clone(),
        })
    }

    /// `frames × n_mels` natural-log mel energies of `samples`.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Tensor> {
        let mag = self.plan.stft(samples)?.magnitude();
        Ok(self.filterbank.project(&mag)?.map(|v| v.max(LOG_MEL_FLOOR).ln()))
    }

    /// Inverts a log-mel matrix: mel pseudo-inverse, then Griffin-Lim.
    pub fn log_mel_to_samples(&self, log_mel: &Tensor, seed: u64) -> Result<Vec<f64>> {
        let mel = log_mel.map(f64::exp);
        let mag = self.filterbank.pseudo_invert(&mel)?;
        Ok(griffin_lim(&self.plan, &mag, self.config.griffin_lim_iters, seed)?.samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_and_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.5, -2.0], 16000).unwrap();
        assert_eq!(w.write_wav(&path).unwrap(), 2);
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, 16000);
        let expect = [0.0, 0.5, -0.5, 1.0, -1.0];
        for (a, b) in r.samples.iter().zip(expect) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
        assert!((wav_duration(&path).unwrap() - 5.0 / 16000.0).abs() < 1e-12);
    }

    #[test]
    fn frontend_shapes() {
        let cfg = AudioConfig {
            sample_rate: 16000,
            n_fft: 512,
            hop_length: 128,
            n_mels: 20,
            ..AudioConfig::default()
        };
        let fe = AudioFrontend::new(&cfg).unwrap();
        let x: Vec<f64> = (0..1280).map(|n| (n as f64 * 0.1).sin() * 0.3).collect();
        let lm = fe.log_mel(&x).unwrap();
        assert_eq!(lm.shape(), &[11, 20]);
        let y = fe.log_mel_to_samples(&lm, 0).unwrap();
        assert_eq!(y.len(), 1280);
    }
}
