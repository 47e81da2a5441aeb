use std::collections::{BTreeMap, HashMap};

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a named trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named trainable tensors. Insertion order is the canonical parameter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", current.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0].data
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Unfold {
        x: Var,
        kernel: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in topological order for one forward pass.
///
/// A tape is single-owner. Every op validates shapes before computing.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to every node that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Gradients keyed by parameter. Parameters that did not participate in the
/// forward pass have no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (&id, g) in &other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Parameters brought onto this tape, in first-use order.
    pub fn params_used(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_order.iter().map(|&(id, _)| id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_nt_raw(av.data(), bv.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatmulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(av.zip_map(bv, f).expect("shapes checked"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a row vector (any shape with `cols(a)` elements) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.numel() != c {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax where columns flagged in `pad` receive zero probability.
    /// A row with every column masked is an error.
    pub fn masked_softmax_rows(&mut self, x: Var, pad: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("softmax_rows")?;
        if let Some(p) = pad {
            if p.len() != c {
                return Err(Error::shape("softmax_rows mask", xv.shape(), &[p.len()]));
            }
            if p.iter().all(|&m| m) {
                return Err(Error::InvalidArgument(
                    "attention row has every position masked".into(),
                ));
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let live = |j: usize| pad.is_none_or(|p| !p[j]);
            let max = (0..c)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..c).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                z += e;
            }
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::from_parts(vec![r, c], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(d).enumerate() {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cannot normalize zero-norm row {i}"
                )));
            }
            chunk.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Selects rows of a 2-D `table`; duplicate indices are allowed.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = tv.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (r, _) = self.value(*first).dims2("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Zero-padded sliding windows along rows: `T×C` → `T×(kernel·C)`, window
    /// centred on each row. Followed by a matmul this is a "same" 1-D conv.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel must be odd, got {kernel}")));
        }
        let xv = self.value(x);
        let (t, c) = xv.dims2("unfold")?;
        let half = kernel / 2;
        let mut data = vec![0.0; t * kernel * c];
        for i in 0..t {
            for k in 0..kernel {
                let src = i as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < t {
                    let dst = i * kernel * c + k * c;
                    data[dst..dst + c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let out = Tensor::from_parts(vec![t, kernel * c], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unfold { x, kernel }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidArgument(format!("target {t} out of {c} classes")));
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[t];
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.requires_grad)
                        .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
                })
                .collect(),
        })
    }

    /// Collects gradients for every parameter brought onto this tape.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for &(id, v) in &self.param_order {
            if let Some(g) = grads.get(v) {
                out.insert(id, g.clone());
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt_raw(g, val(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn_raw(val(*a), g, m, k, n));
                }
            }
            Op::MatmulNT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.requires_grad(*a) {
                    acc(*a, matmul_raw(g, val(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn_raw(g, val(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let c = val(*row).len();
                let mut d = vec![0.0; c];
                for chunk in g.chunks(c) {
                    d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                acc(*row, d);
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Gelu(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect(),
            ),
            Op::Tanh(a) => acc(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; out.len()];
                for (i, (yr, gr)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let rows = inv_std.len();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for i in 0..rows {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let gg: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let mean_gg = gg.iter().sum::<f64>() / d as f64;
                        let mean_ggx =
                            gg.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (gg[j] - mean_gg - xh[j] * mean_ggx);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..rows {
                    for j in 0..d {
                        dgamma[j] += g[i * d + j] * xhat[i * d + j];
                        dbeta[j] += g[i * d + j];
                    }
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.cols();
                let mut dx = vec![0.0; out.len()];
                for (i, n) in norms.iter().enumerate() {
                    let y = &out[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { table, indices } => {
                let c = node.value.cols();
                let mut d = vec![0.0; val(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
                acc(*table, d);
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(*x).cols();
                let mut d = vec![0.0; val(*x).len()];
                for (r, chunk) in g.chunks(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(chunk);
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let d: Vec<f64> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + pc].iter().copied())
                            .collect();
                        acc(p, d);
                    }
                    offset += pc;
                }
            }
            Op::Unfold { x, kernel } => {
                let (t, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let half = kernel / 2;
                let mut d = vec![0.0; t * c];
                for i in 0..t {
                    for k in 0..*kernel {
                        let src = i as isize + k as isize - half as isize;
                        if src >= 0 && (src as usize) < t {
                            let s = src as usize;
                            let base = i * kernel * c + k * c;
                            for j in 0..c {
                                d[s * c + j] += g[base + j];
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / n as f64);
                acc(*logits, d);
            }
        }
    }
}
