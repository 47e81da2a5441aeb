use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side of its centre.
const ZERO_CROSSINGS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel whose cutoff is
/// the lower of the two Nyquist frequencies.
pub fn resample(samples: &[f64], from_hz: u32, to_hz: u32) -> Result<Vec<f64>> {
    if from_hz == 0 || to_hz == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if from_hz == to_hz {
        return Ok(samples.to_vec());
    }
    let ratio = to_hz as f64 / from_hz as f64;
    // cutoff in cycles per input sample
    let fc = 0.5 * ratio.min(1.0);
    let half = (ZERO_CROSSINGS / (2.0 * fc)).ceil();
    let out_len = (samples.len() as u64 * to_hz as u64 / from_hz as u64) as usize;
    let n = samples.len() as isize;
    Ok((0..out_len)
        .map(|j| {
            let centre = j as f64 / ratio;
            let lo = ((centre - half).ceil() as isize).max(0);
            let hi = ((centre + half).floor() as isize).min(n - 1);
            (lo..=hi)
                .map(|i| {
                    let d = i as f64 - centre;
                    let arg = 2.0 * fc * d;
                    let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                    let window = 0.5 + 0.5 * (PI * d / half).cos();
                    samples[i as usize] * 2.0 * fc * sinc * window
                })
                .sum()
        })
        .collect())
}
