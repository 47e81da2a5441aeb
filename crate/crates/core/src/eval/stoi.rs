//! Short-time objective intelligibility with the original constants:
//! 10 kHz analysis, 256-sample Hann frames at 50% overlap, 512-point FFT,
//! 15 one-third-octave bands from 150 Hz, 30-frame segments, −15 dB
//! clipping bound and 40 dB silent-frame removal.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::resample;

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Symmetric Hann window without its zero end points.
fn window() -> Vec<f64> {
    let n = FRAME + 2;
    (1..=FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Frame start offsets: `0, HOP, …` strictly below `len − FRAME`.
fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

/// One-third-octave band matrix over the `NFFT/2 + 1` bins.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=NFFT / 2)
        .map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64)
        .collect();
    let nearest = |target: f64| {
        (0..freqs.len())
            .min_by(|&a, &b| (freqs[a] - target).abs().total_cmp(&(freqs[b] - target).abs()))
            .unwrap()
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Drops frames of both signals where the reference is more than 40 dB below
/// its loudest frame, then overlap-adds the windowed survivors.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = window();
    let frame = |s: &[f64], start: usize| -> Vec<f64> { (0..FRAME).map(|i| w[i] * s[start + i]).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| 20.0 * (frame(x, s).iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let out_len = if kept.is_empty() { 0 } else { (kept.len() - 1) * HOP + FRAME };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &s) in kept.iter().enumerate() {
        let (fx, fy) = (frame(x, s), frame(y, s));
        for j in 0..FRAME {
            xs[i * HOP + j] += fx[j];
            ys[i * HOP + j] += fy[j];
        }
    }
    (xs, ys)
}

/// Band envelopes, `BANDS × frames`.
fn band_envelopes(s: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let w = window();
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let mut out = vec![Vec::new(); BANDS];
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for start in frame_starts(s.len()) {
        buf.fill(Complex64::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i].re = w[i] * s[start + i];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            out[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimum number of samples at `sample_rate` for which STOI is defined
/// (before silent-frame removal).
pub fn stoi_min_samples(sample_rate: u32) -> usize {
    let at_10k = (SEGMENT - 1) * HOP + FRAME + 1;
    (at_10k as u64 * sample_rate as u64).div_ceil(STOI_RATE as u64) as usize
}

pub fn stoi(reference: &[f64], estimate: &[f64], sample_rate: u32) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "stoi needs equal lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let x = resample(reference, sample_rate, STOI_RATE)?;
    let y = resample(estimate, sample_rate, STOI_RATE)?;
    let (x, y) = remove_silent_frames(&x, &y);
    let bands = third_octave_bands();
    let xb = band_envelopes(&x, &bands);
    let yb = band_envelopes(&y, &bands);
    let frames = xb[0].len();
    if frames < SEGMENT {
        return Err(Error::InvalidArgument(format!(
            "stoi needs at least {SEGMENT} non-silent frames ({} samples at {sample_rate} Hz); got {frames}",
            stoi_min_samples(sample_rate)
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for b in 0..BANDS {
            let xs = &xb[b][m - SEGMENT..m];
            let ys = &yb[b][m - SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + EPS);
            let yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            total += correlation(xs, &yp);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let da: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let db: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let (na, nb) = (norm(&da) + EPS, norm(&db) + EPS);
    da.iter().zip(&db).map(|(x, y)| (x / na) * (y / nb)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    /// Amplitude-modulated harmonic test signal.
    pub(crate) fn speechlike(len: usize, rate: u32) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let t = n as f64 / rate as f64;
                let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
                let tone: f64 = [150.0, 450.0, 900.0, 1800.0, 3100.0]
                    .iter()
                    .map(|f| (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum();
                0.2 * env * tone
            })
            .collect()
    }

    #[test]
    fn band_edges_are_increasing() {
        let bands = third_octave_bands();
        assert_eq!(bands.len(), 15);
        for w in bands.windows(2) {
            assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
        // lowest band centre 150 Hz lies near bin 7.7
        assert_eq!(bands[0], (7, 9));
    }

    #[test]
    fn identical_signals_score_one() {
        let x = speechlike(16000, 16000);
        let s = stoi(&x, &x, 16000).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn noise_scores_low() {
        let x = speechlike(20000, 10000);
        let n = Tensor::randn(&[20000], 0.3, &mut ChaCha8Rng::seed_from_u64(5)).into_data();
        let s = stoi(&x, &n, 10000).unwrap();
        assert!(s < 0.2, "{s}");
    }

    #[test]
    fn too_short_reports_minimum() {
        let x = vec![0.1; 2000];
        let err = stoi(&x, &x, 10000).unwrap_err().to_string();
        assert!(err.contains(&stoi_min_samples(10000).to_string()), "{err}");
        assert!(stoi(&x, &x[..1000], 10000).is_err());
    }
}
