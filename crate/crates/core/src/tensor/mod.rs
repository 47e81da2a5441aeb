//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is an immutable value type. Differentiable computation happens on
//! a [`Tape`], which records every primitive together with its backward rule.
//! Trainable weights live in a [`ParamStore`] and are updated by [`Adam`].

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};
pub use optim::{adam_update, Adam, AdamConfig, AdamMoments};
pub use tape::{Gradients, ParamGrads, ParamId, ParamStore, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: the shape must cover `data` exactly and every value
    /// must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {pos} is {}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for values produced by already-validated math.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            vec![m, n],
            matmul_raw(&self.data, &other.data, m, k, n),
        ))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }
}

/// `a[m×k] · b[k×n]`, i-k-j loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::full(&[3, 4], 7.5);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 4]));
        let err = a.matmul(&any).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        let nt = matmul_nt_raw(a.data(), b.data(), 3, 4, 5);
        for (x, y) in direct.data().iter().zip(&nt) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = matmul_tn_raw(a.data(), a.data(), 3, 4, 4);
        let expect = a.transpose().unwrap().matmul(&a).unwrap();
        for (x, y) in expect.data().iter().zip(&tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    use rand::SeedableRng;
}
