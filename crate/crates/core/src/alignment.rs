//! Text-to-frame timing: monotonic alignment search, duration prediction and
//! length regulation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv1d, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Frames per text position. Every entry is at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub durations: Vec<usize>,
    pub total_frames: usize,
}

impl AlignmentPath {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("duration at position {i} is zero")));
        }
        let total_frames = durations.iter().sum();
        Ok(AlignmentPath {
            durations,
            total_frames,
        })
    }

    /// Text index of every frame.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }
}

/// Best monotonic surjective path through `score` (`T_text × T_mel`).
///
/// The path is recovered by backtracking from the last cell; when staying on
/// the current text position and stepping back to the previous one score
/// equally, the backtrack stays. Equal-score frames therefore go to the later
/// position.
pub fn mas(score: &Tensor) -> Result<AlignmentPath> {
    let (t_text, t_mel) = score.dims2("mas")?;
    if t_text == 0 {
        return Err(Error::InvalidArgument("alignment needs at least one text position".into()));
    }
    if t_mel < t_text {
        return Err(Error::InvalidArgument(format!(
            "{t_mel} frames cannot cover {t_text} text positions"
        )));
    }
    let s = score.data();
    let neg = f64::NEG_INFINITY;
    // q[i][j]: best score of a path ending at (i, j)
    let mut q = vec![neg; t_text * t_mel];
    for j in 0..t_mel {
        for i in 0..t_text.min(j + 1) {
            let here = s[i * t_mel + j];
            let best = if j == 0 {
                0.0
            } else {
                let stay = q[i * t_mel + j - 1];
                let advance = if i > 0 { q[(i - 1) * t_mel + j - 1] } else { neg };
                stay.max(advance)
            };
            q[i * t_mel + j] = best + here;
        }
    }
    let mut durations = vec![0usize; t_text];
    let mut i = t_text - 1;
    for j in (0..t_mel).rev() {
        durations[i] += 1;
        if j == 0 {
            break;
        }
        if i > 0 {
            let stay = q[i * t_mel + j - 1];
            let advance = q[(i - 1) * t_mel + j - 1];
            // staying requires room for the remaining positions: i ≤ j - 1
            if advance > stay || i > j - 1 {
                i -= 1;
            }
        }
    }
    AlignmentPath::new(durations)
}

/// Summed score of the cells visited by `path`.
pub fn path_score(score: &Tensor, path: &AlignmentPath) -> Result<f64> {
    let (t_text, t_mel) = score.dims2("path_score")?;
    if path.durations.len() != t_text || path.total_frames != t_mel {
        return Err(Error::InvalidArgument(format!(
            "path covers {}×{} but score is {t_text}×{t_mel}",
            path.durations.len(),
            path.total_frames
        )));
    }
    Ok(path
        .frame_indices()
        .iter()
        .enumerate()
        .map(|(j, &i)| score.data()[i * t_mel + j])
        .sum())
}

/// Negative squared distance between every projected text row and every
/// mel frame: `score[i][j] = −‖mu[i] − y[j]‖²`.
pub fn alignment_score(mu: &Tensor, mel: &Tensor) -> Result<Tensor> {
    let (t_text, m) = mu.dims2("alignment_score")?;
    let (t_mel, m2) = mel.dims2("alignment_score")?;
    if m != m2 {
        return Err(Error::shape("alignment_score", mu.shape(), mel.shape()));
    }
    let mut out = vec![0.0; t_text * t_mel];
    for i in 0..t_text {
        let a = mu.row(i);
        for j in 0..t_mel {
            let b = mel.row(j);
            out[i * t_mel + j] = -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    Tensor::matrix(t_text, t_mel, out)
}

/// Repeats row `t` of `h` `durations[t]` times.
pub fn length_regulate(tape: &mut Tape, h: Var, durations: &[usize]) -> Result<Var> {
    let rows = tape.value(h).rows();
    if durations.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "{} durations for {rows} rows",
            durations.len()
        )));
    }
    let path = AlignmentPath::new(durations.to_vec())?;
    tape.gather_rows(h, &path.frame_indices())
}

/// conv(k) → GELU → conv(k) → GELU → linear, one log duration per position.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationPredictor {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub out: Linear,
}

impl DurationPredictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DurationPredictor {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), input, hidden, kernel, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), hidden, hidden, kernel, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, 1, rng)?,
        })
    }

    /// `T × 1` log durations.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_text: Var) -> Result<Var> {
        let x = self.conv1.forward(tape, store, h_text)?;
        let x = tape.gelu(x);
        let x = self.conv2.forward(tape, store, x)?;
        let x = tape.gelu(x);
        self.out.forward(tape, store, x)
    }
}

/// MSE between predicted log durations (`T × 1`) and `ln(durations)`.
pub fn duration_loss(tape: &mut Tape, log_d: Var, durations: &[usize]) -> Result<Var> {
    let target: Vec<f64> = durations.iter().map(|&d| (d as f64).ln()).collect();
    let target = tape.constant(Tensor::matrix(durations.len(), 1, target)?);
    tape.mse(log_d, target)
}

/// Inference rule: `max(1, round(exp(log_d)))`.
pub fn durations_from_log(log_d: &[f64]) -> Vec<usize> {
    log_d
        .iter()
        .map(|&l| {
            let d = l.exp().round();
            // NaN compares false and falls through to the floor
            if d >= 1.0 {
                d as usize
            } else {
                1
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_text_position_takes_all_frames() {
        let s = Tensor::matrix(1, 5, vec![1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert_eq!(mas(&s).unwrap().durations, vec![5]);
    }

    #[test]
    fn diagonal_dominant() {
        let mut d = vec![0.0; 9];
        for i in 0..3 {
            d[i * 3 + i] = 10.0;
        }
        let s = Tensor::matrix(3, 3, d).unwrap();
        assert_eq!(mas(&s).unwrap().durations, vec![1, 1, 1]);
    }

    #[test]
    fn ties_prefer_staying() {
        let s = Tensor::zeros(&[2, 4]);
        assert_eq!(mas(&s).unwrap().durations, vec![1, 3]);
    }

    #[test]
    fn too_few_frames() {
        assert!(mas(&Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn mas_matches_brute_force_on_random_4x6() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let data: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = Tensor::matrix(4, 6, data).unwrap();
            let path = mas(&s).unwrap();
            assert_eq!(path.total_frames, 6);
            let best = brute_force_best(&s);
            assert_eq!(path_score(&s, &path).unwrap(), best);
        }
    }

    /// Enumerates compositions of `t_mel` into `t_text` positive parts.
    fn brute_force_best(s: &Tensor) -> f64 {
        let (n, m) = (s.rows(), s.cols());
        let mut best = f64::NEG_INFINITY;
        let mut parts = Vec::new();
        fn rec(n: usize, left: usize, parts: &mut Vec<usize>, s: &Tensor, best: &mut f64) {
            if parts.len() == n - 1 {
                if left == 0 {
                    return;
                }
                parts.push(left);
                let p = AlignmentPath::new(parts.clone()).unwrap();
                *best = best.max(path_score(s, &p).unwrap());
                parts.pop();
                return;
            }
            for d in 1..left {
                parts.push(d);
                rec(n, left - d, parts, s, best);
                parts.pop();
            }
        }
        rec(n, m, &mut parts, s, &mut best);
        best
    }

    #[test]
    fn score_is_negative_squared_distance() {
        let mu = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 1.0]]).unwrap();
        let s = alignment_score(&mu, &y).unwrap();
        assert_eq!(s.data(), &[-1.0, -2.0, -5.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(durations_from_log(&[0.0, 2.4f64.ln(), -5.0, 2.6f64.ln()]), vec![1, 2, 1, 3]);
    }

    #[test]
    fn regulate_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let same = length_regulate(&mut tape, h, &[1, 1]).unwrap();
        assert_eq!(tape.value(same), tape.value(h));
        let up = length_regulate(&mut tape, h, &[2, 3]).unwrap();
        assert_eq!(tape.value(up).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert!(length_regulate(&mut tape, h, &[0, 2]).is_err());
        assert!(length_regulate(&mut tape, h, &[1]).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let durations = [1, 3, 2];
        let mut tape = Tape::new();
        let logs: Vec<f64> = durations.iter().map(|&d| (d as f64).ln()).collect();
        let l = tape.constant(Tensor::matrix(3, 1, logs).unwrap());
        let loss = duration_loss(&mut tape, l, &durations).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn predictor_output_length_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dp = DurationPredictor::new(&mut store, "dp", 6, 5, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[7, 6], 1.0, &mut rng));
        let out = dp.forward(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(out).shape(), &[7, 1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn durations_are_a_composition(t_text in 1usize..6, extra in 0usize..6, seed in any::<u64>()) {
                let t_mel = t_text + extra;
                let s = Tensor::randn(&[t_text, t_mel], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
                let p = mas(&s).unwrap();
                prop_assert!(p.durations.iter().all(|&d| d >= 1));
                prop_assert_eq!(p.durations.iter().sum::<usize>(), t_mel);
            }
        }
    }
}
