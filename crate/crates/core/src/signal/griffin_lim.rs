use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stft::{Spectrogram, StftPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reconstructed signal plus the consistency error of every iterate.
#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    /// Centered samples, `(frames − 1)·hop` long.
    pub samples: Vec<f64>,
    /// `errors[k]` is the error of the estimate after `k` iterations.
    pub errors: Vec<f64>,
}

/// `‖|S| − mag‖` over the full two-sided spectrum: every one-sided bin other
/// than DC and Nyquist stands for two conjugate bins and is counted twice.
pub fn consistency_error(spec: &Spectrogram, mag: &Tensor) -> f64 {
    let bins = spec.bins;
    spec.data
        .iter()
        .zip(mag.data())
        .enumerate()
        .map(|(i, (c, &m))| {
            let k = i % bins;
            let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            weight * (c.norm() - m).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Extrapolation weight of the accelerated iteration.
pub const GRIFFIN_LIM_MOMENTUM: f64 = 0.99;

/// Griffin-Lim phase reconstruction of a `frames × (n_fft/2 + 1)` magnitude.
///
/// Iterates on the reflection-free padded-domain signal, alternating the
/// least-squares inverse STFT with magnitude replacement. Each step starts
/// from the momentum-extrapolated signal `x + α(x − x_prev)` (fast
/// Griffin-Lim); a step that would raise the consistency error is replaced by
/// a plain projection from `x`, which cannot, and the momentum restarts. The
/// error sequence is therefore non-increasing. With `iters = 0` the result is
/// the inverse of the magnitude under seeded uniform random phase.
pub fn griffin_lim(plan: &StftPlan, mag: &Tensor, iters: usize, seed: u64) -> Result<GriffinLimOutput> {
    griffin_lim_with_momentum(plan, mag, iters, seed, GRIFFIN_LIM_MOMENTUM)
}

/// [`griffin_lim`] with an explicit extrapolation weight; `0` is the classic
/// algorithm.
pub fn griffin_lim_with_momentum(
    plan: &StftPlan,
    mag: &Tensor,
    iters: usize,
    seed: u64,
    momentum: f64,
) -> Result<GriffinLimOutput> {
    if !(momentum >= 0.0 && momentum.is_finite()) {
        return Err(Error::InvalidArgument(format!("momentum must be finite and non-negative, got {momentum}")));
    }
    let (frames, bins) = mag.dims2("griffin_lim")?;
    if bins != plan.bins() {
        return Err(Error::shape("griffin_lim", mag.shape(), &[frames, plan.bins()]));
    }
    if mag.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("magnitudes must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..frames * bins).map(|_| rng.random_range(0.0..TAU)).collect();
    let init = Spectrogram::from_polar(mag, |f, k| phases[f * bins + k])?;
    let mut x = plan.synthesize(&init)?;
    let mut spec = plan.analyze(&x, frames);
    let mut err = consistency_error(&spec, mag);
    let mut errors = vec![err];
    let project = |from: &Spectrogram| -> Result<(Vec<f64>, Spectrogram, f64)> {
        let target = Spectrogram::from_polar(mag, |f, k| from.at(f, k).arg())?;
        let y = plan.synthesize(&target)?;
        let s = plan.analyze(&y, frames);
        let e = consistency_error(&s, mag);
        Ok((y, s, e))
    };
    let mut extrapolated: Option<Vec<f64>> = None;
    for _ in 0..iters {
        let candidate = match &extrapolated {
            Some(z) => Some(project(&plan.analyze(z, frames))?).filter(|c| c.2 <= err),
            None => None,
        };
        let (y, s, e) = match candidate {
            Some(c) => c,
            None => project(&spec)?,
        };
        extrapolated = Some(
            y.iter()
                .zip(&x)
                .map(|(a, b)| a + momentum * (a - b))
                .collect(),
        );
        (x, spec, err) = (y, s, e);
        errors.push(err);
    }
    Ok(GriffinLimOutput {
        samples: plan.crop(&x, frames),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_iterations_is_seeded() {
        let plan = StftPlan::new(64, 16).unwrap();
        let mag = Tensor::full(&[10, 33], 0.5);
        let a = griffin_lim(&plan, &mag, 0, 1).unwrap();
        let b = griffin_lim(&plan, &mag, 0, 1).unwrap();
        let c = griffin_lim(&plan, &mag, 0, 2).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.samples.len(), 9 * 16);
        assert_eq!(a.errors.len(), 1);
    }

    #[test]
    fn error_never_increases() {
        let plan = StftPlan::new(128, 32).unwrap();
        let x: Vec<f64> = (0..2000)
            .map(|n| (2.0 * PI * 440.0 * n as f64 / 8000.0).sin() * (n as f64 / 300.0).cos())
            .collect();
        let mag = plan.stft(&x).unwrap().magnitude();
        let out = griffin_lim(&plan, &mag, 30, 3).unwrap();
        for w in out.errors.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
        assert!(out.errors[30] < out.errors[0]);
    }

    #[test]
    fn random_magnitudes_decrease_with_and_without_momentum() {
        let plan = StftPlan::new(64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mag = Tensor::new(vec![12, 33], (0..12 * 33).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for momentum in [0.0, 0.5, GRIFFIN_LIM_MOMENTUM] {
            let out = griffin_lim_with_momentum(&plan, &mag, 60, 9, momentum).unwrap();
            for w in out.errors.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "momentum {momentum}: {} -> {}", w[0], w[1]);
            }
        }
        assert!(griffin_lim_with_momentum(&plan, &mag, 1, 0, -0.1).is_err());
        assert!(griffin_lim_with_momentum(&plan, &mag, 1, 0, f64::NAN).is_err());
    }

    #[test]
    fn momentum_converges_faster_on_a_sine() {
        let plan = StftPlan::new(128, 32).unwrap();
        let x: Vec<f64> = (0..1024).map(|n| (2.0 * PI * 500.0 * n as f64 / 8000.0).sin()).collect();
        let mag = plan.stft(&x).unwrap().magnitude();
        let classic = griffin_lim_with_momentum(&plan, &mag, 40, 2, 0.0).unwrap();
        let fast = griffin_lim(&plan, &mag, 40, 2).unwrap();
        assert_eq!(classic.errors[0], fast.errors[0]);
        assert!(fast.errors[40] < classic.errors[40]);
    }
}
