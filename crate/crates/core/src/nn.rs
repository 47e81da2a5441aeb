//! Small parameterised layers shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Two-layer position-wise feed-forward with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }

    pub fn num_scalars(&self) -> usize {
        self.up.num_scalars() + self.down.num_scalars()
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.up.weight, self.up.bias, self.down.weight, self.down.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// "Same"-padded 1-D convolution over rows: `T×in` → `T×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv1d {
            kernel,
            linear: Linear::new(store, name, fan_in * kernel, fan_out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.unfold(x, self.kernel)?;
        self.linear.forward(tape, store, cols)
    }
}

/// Fixed sinusoidal features, `rows × dim`, for positions `0..rows`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for p in 0..rows {
        data[p * dim..(p + 1) * dim].copy_from_slice(&sinusoidal(p as f64, dim));
    }
    Tensor::from_parts(vec![rows, dim], data)
}

/// Sinusoidal embedding of a scalar (positions or flow time).
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim.div_ceil(2);
    (0..dim)
        .map(|i| {
            let k = (i % half) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            if i < half {
                (value * freq).sin()
            } else {
                (value * freq).cos()
            }
        })
        .collect()
}
