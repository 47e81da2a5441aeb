use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, `frames × (n_fft/2 + 1)`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn magnitude(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.frames, self.bins],
            self.data.iter().map(|c| c.norm()).collect(),
        )
    }

    /// Combines a magnitude matrix with per-cell phases.
    pub fn from_polar(mag: &Tensor, phase: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let (frames, bins) = mag.dims2("from_polar")?;
        let data = (0..frames * bins)
            .map(|i| Complex64::from_polar(mag.data()[i], phase(i / bins, i % bins)))
            .collect();
        Ok(Spectrogram { frames, bins, data })
    }
}

/// Windowed FFT analysis and least-squares overlap-add synthesis for one
/// `(n_fft, hop)` pair.
#[derive(Clone)]
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl StftPlan {
    /// Hann-windowed plan. `n_fft` must be even and `1 ≤ hop ≤ n_fft`.
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        Self::with_window(n_fft, hop, hann_window(n_fft))
    }

    pub fn with_window(n_fft: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(Error::InvalidArgument(format!("n_fft {n_fft} must be even and at least 2")));
        }
        if hop == 0 || hop > n_fft {
            return Err(Error::InvalidArgument(format!("hop {hop} must be in 1..={n_fft}")));
        }
        if window.len() != n_fft {
            return Err(Error::InvalidArgument(format!(
                "window length {} differs from n_fft {n_fft}",
                window.len()
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Length of the padded-domain signal spanned by `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        self.n_fft + frames.saturating_sub(1) * self.hop
    }

    /// Centered STFT: the signal is reflection-padded by `n_fft/2` on both
    /// sides, giving `1 + len/hop` frames.
    pub fn stft(&self, signal: &[f64]) -> Result<Spectrogram> {
        if signal.len() < self.n_fft {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than one {}-sample frame",
                signal.len(),
                self.n_fft
            )));
        }
        let frames = 1 + signal.len() / self.hop;
        let pad = self.pad();
        let n = signal.len() as isize;
        let padded: Vec<f64> = (0..self.padded_len(frames))
            .map(|i| {
                let j = i as isize - pad as isize;
                let j = if j < 0 {
                    -j
                } else if j >= n {
                    2 * (n - 1) - j
                } else {
                    j
                };
                // beyond a single reflection the tail is zero
                if (0..n).contains(&j) {
                    signal[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(self.analyze(&padded, frames))
    }

    /// Uncentered analysis of `frames` frames starting at sample 0.
    pub fn analyze(&self, padded: &[f64], frames: usize) -> Spectrogram {
        let bins = self.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = padded.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(x * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }

    /// Least-squares inverse of [`Self::analyze`]: the padded-domain signal
    /// whose windowed frames are closest to the inverse transforms of
    /// `spec`. Samples not covered by any window weight are zero.
    pub fn synthesize(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        if spec.bins != self.bins() {
            return Err(Error::shape("istft", &[spec.frames, spec.bins], &[spec.frames, self.bins()]));
        }
        let len = self.padded_len(spec.frames);
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for f in 0..spec.frames {
            let row = &spec.data[f * spec.bins..(f + 1) * spec.bins];
            buf[..spec.bins].copy_from_slice(row);
            // Hermitian extension; DC and Nyquist keep only their real parts
            buf[0].im = 0.0;
            buf[self.n_fft / 2].im = 0.0;
            for k in 1..self.n_fft / 2 {
                buf[self.n_fft - k] = row[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                num[start + i] += w * buf[i].re * scale;
                den[start + i] += w * w;
            }
        }
        Ok(num
            .iter()
            .zip(&den)
            .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
            .collect())
    }

    /// Inverse of [`Self::stft`]; `length` defaults to `(frames − 1)·hop`.
    pub fn istft(&self, spec: &Spectrogram, length: Option<usize>) -> Result<Vec<f64>> {
        let padded = self.synthesize(spec)?;
        let pad = self.pad();
        let len = length.unwrap_or(spec.frames.saturating_sub(1) * self.hop);
        if pad + len > padded.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames cannot produce {len} samples",
                spec.frames
            )));
        }
        Ok(padded[pad..pad + len].to_vec())
    }

    /// Central part of a padded-domain signal, as [`Self::istft`] returns it.
    pub fn crop(&self, padded: &[f64], frames: usize) -> Vec<f64> {
        let pad = self.pad();
        padded[pad..pad + frames.saturating_sub(1) * self.hop].to_vec()
    }
}
