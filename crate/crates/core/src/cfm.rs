//! Conditional flow-matching mel decoder: interpolant targets, the
//! vector-field network, the training loss and an Euler ODE sampler.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dialect::{Dialect, Fusion};
use crate::encoder::{dsdr_forward, DsdrBlockParams};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Conv1d, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

/// `F × M` mel frames with the audio metadata needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop_length: u32,
}

const MEL_MAGIC: &[u8; 4] = b"TMEL";

impl MelSpectrogram {
    pub fn new(frames: Tensor, sample_rate: u32, hop_length: u32) -> Result<Self> {
        frames.dims2("mel spectrogram")?;
        if sample_rate == 0 || hop_length == 0 {
            return Err(Error::InvalidArgument("sample rate and hop must be positive".into()));
        }
        Ok(MelSpectrogram {
            frames,
            sample_rate,
            hop_length,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.cols()
    }

    /// Little-endian layout: `b"TMEL"`, then u32 `M`, `F`, `sample_rate`,
    /// `hop_length`, then `F × M` f32 values row by row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.frames.numel());
        out.extend_from_slice(MEL_MAGIC);
        for v in [
            self.num_bins() as u32,
            self.num_frames() as u32,
            self.sample_rate,
            self.hop_length,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..4] != MEL_MAGIC {
            return Err("missing TMEL header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (m, f, sr, hop) = (word(0) as usize, word(1) as usize, word(2), word(3));
        let expected = 20 + 4 * m * f;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes for {f}×{m} frames, found {}", bytes.len()));
        }
        let data: Vec<f64> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let frames = Tensor::new(vec![f, m], data).map_err(|e| e.to_string())?;
        MelSpectrogram::new(frames, sr, hop).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        })
    }
}

/// Interpolant and target field for one `(x0, x1, t)` triple:
/// `x_t = (1 − (1 − σ)t)·x0 + t·x1`, `u = x1 − (1 − σ)·x0`.
pub fn ot_cfm_pair(x1: &Tensor, x0: &Tensor, t: f64, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(Error::InvalidArgument(format!("sigma_min {sigma_min} outside [0, 1)")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let x_t = x0.zip_map(x1, |p, q| a * p + t * q)?;
    let u = x1.zip_map(x0, |q, p| q - (1.0 - sigma_min) * p)?;
    Ok((x_t, u))
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// One-sample flow-matching loss: draws `x0 ~ N(0, I)` and `t ~ U[0, 1]`,
/// then returns `mean((predict(x_t, t) − u)²)`.
pub fn cfm_loss<R, F>(tape: &mut Tape, x1: &Tensor, sigma_min: f64, rng: &mut R, predict: F) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Tape, Var, f64) -> Result<Var>,
{
    let x0 = standard_normal(x1.shape(), rng);
    let t: f64 = rng.random();
    let (x_t, u) = ot_cfm_pair(x1, &x0, t, sigma_min)?;
    let x_t = tape.constant(x_t);
    let pred = predict(tape, x_t, t)?;
    let target = tape.constant(u);
    tape.mse(pred, target)
}

/// A time-dependent vector field over `F × M` states.
pub trait VectorField {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VectorField for F {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Forward Euler from `x0` over `[0, 1]` with `n_steps` uniform steps.
pub fn euler_integrate<V: VectorField + ?Sized>(field: &V, x0: Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0;
    for k in 0..n_steps {
        let v = field.eval(&x, k as f64 * dt)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("vector field output at step {k}")));
        }
        x = x.zip_map(&v, |a, b| a + dt * b)?;
    }
    Ok(x)
}

/// Euler sampling from seeded standard-normal noise of shape `frames × bins`.
pub fn euler_sample<V: VectorField + ?Sized>(
    field: &V,
    frames: usize,
    bins: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = standard_normal(&[frames, bins], &mut rng);
    euler_integrate(field, x0, n_steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetConfig {
    pub mel_bins: usize,
    pub cond_dim: usize,
    pub dialect_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub kernel: usize,
    /// Adds a dialect-routed feed-forward after the convolutions.
    pub routed: bool,
}

/// `[x_t | fuse(cond, h_did) | time]` → conv → GELU → conv → GELU →
/// (optional routed FFN, residual) → linear → `F × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet {
    pub config: FieldNetConfig,
    pub fusion: Fusion,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ffn: Option<DsdrBlockParams>,
    pub out: Linear,
}

impl FieldNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: FieldNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = &config;
        let input = c.mel_bins + c.cond_dim + c.time_dim;
        let fusion = Fusion::new(store, &format!("{name}.fusion"), c.dialect_dim, c.cond_dim, rng)?;
        let conv1 = Conv1d::new(store, &format!("{name}.conv1"), input, c.hidden, c.kernel, rng)?;
        let conv2 = Conv1d::new(store, &format!("{name}.conv2"), c.hidden, c.hidden, c.kernel, rng)?;
        let ffn = if c.routed {
            Some(DsdrBlockParams::new(store, &format!("{name}.ffn"), c.hidden, c.hidden, true, rng)?)
        } else {
            None
        };
        let out = Linear::new(store, &format!("{name}.out"), c.hidden, c.mel_bins, rng)?;
        Ok(FieldNet {
            config,
            fusion,
            conv1,
            conv2,
            ffn,
            out,
        })
    }

    /// Time features: sinusoidal embedding of `1000·t`, repeated per frame.
    fn time_features(&self, frames: usize, t: f64) -> Tensor {
        let row = sinusoidal(1000.0 * t, self.config.time_dim);
        let data = (0..frames).flat_map(|_| row.iter().copied()).collect();
        Tensor::from_parts(vec![frames, self.config.time_dim], data)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: Var,
        t: f64,
        cond: Var,
        h_did: Var,
        dialect: Dialect,
    ) -> Result<Var> {
        let frames = tape.value(x_t).rows();
        if tape.value(cond).rows() != frames {
            return Err(Error::shape("field net", tape.value(x_t).shape(), tape.value(cond).shape()));
        }
        let cond = self.fusion.fuse(tape, store, cond, h_did)?;
        let time = tape.constant(self.time_features(frames, t));
        let x = tape.concat_cols(&[x_t, cond, time])?;
        let x = self.conv1.forward(tape, store, x)?;
        let x = tape.gelu(x);
        let x = self.conv2.forward(tape, store, x)?;
        let mut x = tape.gelu(x);
        if let Some(ffn) = &self.ffn {
            let mut trace = Vec::new();
            let f = dsdr_forward(tape, store, x, dialect, ffn, 0, &mut trace)?;
            x = tape.add(x, f)?;
        }
        self.out.forward(tape, store, x)
    }
}

/// A trained field network bound to one utterance's conditioning.
pub struct ConditionedField<'a> {
    pub net: &'a FieldNet,
    pub store: &'a ParamStore,
    pub cond: Tensor,
    pub h_did: Tensor,
    pub dialect: Dialect,
}

impl VectorField for ConditionedField<'_> {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cond = tape.constant(self.cond.clone());
        let h = tape.constant(self.h_did.clone());
        let v = self.net.forward(&mut tape, self.store, xv, t, cond, h, self.dialect)?;
        Ok(tape.value(v).clone())
    }
}
