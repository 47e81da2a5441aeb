use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels × (n_fft/2 + 1)`,
/// unnormalized (peak weight 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Tensor,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

/// Multiplicative-update iterations used by [`MelFilterbank::pseudo_invert`].
pub const INVERT_ITERS: usize = 200;

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_fft < 2 {
            return Err(Error::InvalidArgument("need at least one mel band and n_fft ≥ 2".into()));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "mel range [{f_min}, {f_max}] must satisfy 0 ≤ f_min < f_max ≤ {nyquist}"
            )));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut w = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let up = (f - left) / (centre - left);
                let down = (right - f) / (right - centre);
                w[m * bins + k] = up.min(down).max(0.0);
            }
            if w[m * bins..(m + 1) * bins].iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "mel band {m} ({left:.1}–{right:.1} Hz) contains no FFT bin; use fewer bands or a larger n_fft"
                )));
            }
        }
        Ok(MelFilterbank {
            weights: Tensor::from_parts(vec![n_mels, bins], w),
            sample_rate,
            n_fft,
            f_min,
            f_max,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn bins(&self) -> usize {
        self.weights.cols()
    }

    /// `frames × bins` magnitudes → `frames × n_mels`.
    pub fn project(&self, magnitude: &Tensor) -> Result<Tensor> {
        let (_, bins) = magnitude.dims2("mel_project")?;
        if bins != self.bins() {
            return Err(Error::shape("mel_project", magnitude.shape(), self.weights.shape()));
        }
        magnitude.matmul(&self.weights.transpose()?)
    }

    /// Non-negative least-squares estimate of the magnitudes behind `mel`.
    ///
    /// Starts from the transpose-normalized back-projection and refines it
    /// with multiplicative updates `s ← s · (Wᵀm) / (Wᵀ W s)`, which keep
    /// every entry non-negative and do not increase `‖W s − m‖²`.
    pub fn pseudo_invert(&self, mel: &Tensor) -> Result<Tensor> {
        self.pseudo_invert_iters(mel, INVERT_ITERS)
    }

    pub fn pseudo_invert_iters(&self, mel: &Tensor, iters: usize) -> Result<Tensor> {
        let (frames, m) = mel.dims2("pseudo_invert")?;
        if m != self.n_mels() {
            return Err(Error::shape("pseudo_invert", mel.shape(), self.weights.shape()));
        }
        if mel.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("mel energies must be non-negative".into()));
        }
        let w = &self.weights;
        let wt = w.transpose()?;
        let bins = self.bins();
        let col_sum: Vec<f64> = (0..bins).map(|k| (0..m).map(|i| w.get(i, k)).sum()).collect();
        let back = mel.matmul(w)?; // rows are Wᵀm
        let b = back.data();
        let mut s: Vec<f64> = (0..frames * bins)
            .map(|i| {
                let c = col_sum[i % bins];
                if c > 0.0 { b[i] / c } else { 0.0 }
            })
            .collect();
        for _ in 0..iters {
            let cur = Tensor::from_parts(vec![frames, bins], s);
            let gs = cur.matmul(&wt)?.matmul(w)?;
            s = cur.into_data();
            for ((v, &num), &den) in s.iter_mut().zip(b).zip(gs.data()) {
                if den > 0.0 {
                    *v *= num / den;
                }
            }
        }
        Tensor::matrix(frames, bins, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn rows_ordered_nonempty_and_gapless() {
        let fb = MelFilterbank::new(22050, 1024, 80, 0.0, 11025.0).unwrap();
        let w = &fb.weights;
        let mut last_peak = 0;
        for m in 0..fb.n_mels() {
            let row = w.row(m);
            assert!(row.iter().sum::<f64>() > 0.0);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(peak >= last_peak);
            last_peak = peak;
        }
        // every bin strictly inside (f_min, f_max) is covered by some band
        for k in 1..fb.bins() - 1 {
            assert!((0..fb.n_mels()).any(|m| w.get(m, k) > 0.0), "gap at bin {k}");
        }
    }

    #[test]
    fn too_many_bands_is_an_error() {
        assert!(MelFilterbank::new(16000, 64, 80, 0.0, 8000.0).is_err());
        assert!(MelFilterbank::new(16000, 512, 20, 100.0, 9000.0).is_err());
    }

    #[test]
    fn projection_support() {
        let fb = MelFilterbank::new(16000, 512, 20, 0.0, 8000.0).unwrap();
        let zero = fb.project(&Tensor::zeros(&[3, fb.bins()])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let k = 40;
        let mut one = vec![0.0; fb.bins()];
        one[k] = 1.0;
        let mel = fb.project(&Tensor::matrix(1, fb.bins(), one).unwrap()).unwrap();
        for m in 0..fb.n_mels() {
            assert_eq!(mel.data()[m] > 0.0, fb.weights.get(m, k) > 0.0);
        }
        assert!(fb.project(&Tensor::zeros(&[1, 7])).is_err());
    }

    #[test]
    fn project_invert_project_is_close() {
        let fb = MelFilterbank::new(22050, 1024, 80, 0.0, 11025.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let data: Vec<f64> = (0..4 * fb.bins()).map(|_| rng.random_range(0.0..1.0)).collect();
            let spec = Tensor::matrix(4, fb.bins(), data).unwrap();
            let mel = fb.project(&spec).unwrap();
            let again = fb.project(&fb.pseudo_invert(&mel).unwrap()).unwrap();
            let err: f64 = mel.zip_map(&again, |a, b| (a - b).powi(2)).unwrap().sum().sqrt();
            let norm: f64 = mel.map(|a| a * a).sum().sqrt();
            assert!(err / norm < 0.1, "relative error {}", err / norm);
            let inv = fb.pseudo_invert(&mel).unwrap();
            assert!(inv.data().iter().all(|&v| v >= 0.0));
        }
    }
}
