//! Central finite-difference check of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both norms are below `1e-8`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the analytic gradient of `loss` for every parameter in `store`
/// against `(f(θ + h) − f(θ − h)) / 2h`. Parameters the loss never touches
/// must have a numeric gradient of zero.
pub fn check_gradients<F>(store: &ParamStore, loss: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s)?;
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.param_grads(&tape.backward(l)?);

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (id, name, value) in store.iter() {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; value.numel()],
        };
        let mut numeric = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let x = value.data()[i];
            work.data_mut(id)[i] = x + h;
            let up = eval(&work)?;
            work.data_mut(id)[i] = x - h;
            let down = eval(&work)?;
            work.data_mut(id)[i] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let relative_error = if scale < 1e-8 { norm(&diff) } else { norm(&diff) / scale };
        if !relative_error.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of {name}")));
        }
        params.push(ParamCheck {
            name: name.to_string(),
            relative_error,
        });
    }
    Ok(GradCheckReport { params })
}
