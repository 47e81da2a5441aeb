//! Dialect ids, normalized dialect embeddings and their fusion into hidden
//! features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// The three major Tibetan dialects, in the fixed id order 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    #[serde(rename = "u-tsang")]
    UTsang,
    #[serde(rename = "amdo")]
    Amdo,
    #[serde(rename = "kham")]
    Kham,
}

pub const NUM_DIALECTS: usize = 3;

impl Dialect {
    pub const ALL: [Dialect; NUM_DIALECTS] = [Dialect::UTsang, Dialect::Amdo, Dialect::Kham];

    /// The routing key `did`.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("dialect id {id} not in {{0, 1, 2}}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Dialect::UTsang => "u-tsang",
            Dialect::Amdo => "amdo",
            Dialect::Kham => "kham",
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Case-insensitive lookup; accepts `ü-tsang` and `utsang` as aliases.
pub fn dialect_id(name: &str) -> Result<Dialect> {
    match name.trim().to_lowercase().as_str() {
        "u-tsang" | "ü-tsang" | "utsang" => Ok(Dialect::UTsang),
        "amdo" => Ok(Dialect::Amdo),
        "kham" => Ok(Dialect::Kham),
        _ => Err(Error::UnknownDialect(name.to_string())),
    }
}

impl FromStr for Dialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        dialect_id(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DialectNorm {
    /// Unit Euclidean norm.
    #[default]
    L2,
    LayerNorm,
}

/// The trainable `3 × dim` embedding table and the normalization applied to
/// each looked-up row.
#[derive(Debug, Clone, PartialEq)]
pub struct DialectEmbedding {
    pub table: ParamId,
    pub dim: usize,
    pub norm: DialectNorm,
    layer_norm: Option<LayerNorm>,
}

impl DialectEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        norm: DialectNorm,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[NUM_DIALECTS, dim], 1.0, rng))?;
        let layer_norm = match norm {
            DialectNorm::L2 => None,
            DialectNorm::LayerNorm => Some(LayerNorm::new(store, &format!("{name}.norm"), dim)?),
        };
        Ok(DialectEmbedding {
            table,
            dim,
            norm,
            layer_norm,
        })
    }

    /// `h_did` as a `1 × dim` row. A zero table row cannot be L2-normalized
    /// and is reported as an error.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, dialect: Dialect) -> Result<Var> {
        let table = tape.param(store, self.table);
        let row = tape.gather_rows(table, &[dialect.id()])?;
        match &self.layer_norm {
            None => tape.l2_normalize_rows(row),
            Some(ln) => ln.forward(tape, store, row),
        }
    }
}

/// Linear projection of the dialect embedding, added to every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub proj: Linear,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dialect_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Fusion {
            proj: Linear::new(store, name, dialect_dim, hidden, rng)?,
        })
    }

    /// `ĥ[t] = h_text[t] + proj(h_did)` for every row `t`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, h_text: Var, h_did: Var) -> Result<Var> {
        self.fuse_parts(tape, store, h_text, &[h_did])
    }

    /// Fusion of several embeddings: they are concatenated before the
    /// projection, whose input width must equal their combined width.
    pub fn fuse_parts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_text: Var,
        parts: &[Var],
    ) -> Result<Var> {
        let cond = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(parts)?
        };
        let projected = self.proj.forward(tape, store, cond)?;
        tape.add_row(h_text, projected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_and_ids() {
        assert_eq!(dialect_id("amdo").unwrap().id(), 1);
        assert_eq!(dialect_id("Ü-Tsang").unwrap().id(), 0);
        assert_eq!(dialect_id("UTSANG").unwrap(), Dialect::UTsang);
        assert_eq!(dialect_id("kham").unwrap().id(), 2);
        let err = dialect_id("lhasa").unwrap_err().to_string();
        assert!(err.contains("u-tsang") && err.contains("amdo") && err.contains("kham"));
        assert!(Dialect::from_id(3).is_err());
        for d in Dialect::ALL {
            assert_eq!(dialect_id(d.name()).unwrap(), d);
        }
    }

    #[test]
    fn embeddings_have_unit_norm() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let emb = DialectEmbedding::new(&mut store, "d", 128, DialectNorm::L2, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut rows = Vec::new();
            for d in Dialect::ALL {
                let h = emb.embed(&mut tape, &store, d).unwrap();
                let n: f64 = tape.value(h).data().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
                rows.push(tape.value(h).data().to_vec());
            }
            let cos: f64 = rows[0].iter().zip(&rows[1]).map(|(a, b)| a * b).sum();
            assert!(cos < 1.0 - 1e-6);
        }
    }

    #[test]
    fn axis_row_and_zero_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = DialectEmbedding::new(&mut store, "d", 4, DialectNorm::L2, &mut rng).unwrap();
        store
            .set(
                emb.table,
                Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0], vec![0.0; 4], vec![1.0; 4]]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let h = emb.embed(&mut tape, &store, Dialect::UTsang).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(emb.embed(&mut tape, &store, Dialect::Amdo).is_err());
    }

    fn fusion_with(proj_w: Tensor, proj_b: Tensor) -> (ParamStore, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", proj_w.shape()[0], proj_w.shape()[1], &mut rng).unwrap();
        store.set(f.proj.weight, proj_w).unwrap();
        store.set(f.proj.bias, proj_b).unwrap();
        (store, f)
    }

    #[test]
    fn fuse_examples() {
        // zero projection: identity
        let (store, f) = fusion_with(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let d = tape.constant(Tensor::from_rows(&[vec![0.6, 0.0, 0.8]]).unwrap());
        let out = f.fuse(&mut tape, &store, h, d).unwrap();
        assert_eq!(tape.value(out), tape.value(h));

        // proj(h_did) = (0.5, -1) via bias only
        let (store, f) = fusion_with(Tensor::zeros(&[3, 2]), Tensor::vector(vec![0.5, -1.0]).unwrap());
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let d = tape.constant(Tensor::from_rows(&[vec![0.6, 0.0, 0.8]]).unwrap());
        let out = f.fuse(&mut tape, &store, h, d).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 0.0]);

        // zero text: every row equals proj(h_did)
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let (store, f) = fusion_with(w, Tensor::vector(vec![0.1, 0.2]).unwrap());
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        let d = tape.constant(Tensor::from_rows(&[vec![0.6, 0.0, 0.8]]).unwrap());
        let out = f.fuse(&mut tape, &store, h, d).unwrap();
        for r in 0..3 {
            let row = tape.value(out).row(r);
            assert!((row[0] - 1.5).abs() < 1e-15 && (row[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_minus_fuse_of_zero_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", 8, 6, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let dvec = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zv = tape.constant(Tensor::zeros(&[4, 6]));
        let dv = tape.constant(dvec);
        let a = f.fuse(&mut tape, &store, xv, dv).unwrap();
        let b = f.fuse(&mut tape, &store, zv, dv).unwrap();
        let diff = tape.value(a).zip_map(tape.value(b), |p, q| p - q).unwrap();
        for (d, e) in diff.data().iter().zip(x.data()) {
            assert!((d - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", 4, 6, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        let d = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(f.fuse(&mut tape, &store, h, d).is_err());
    }

    #[test]
    fn concat_hook_widens_projection_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", 4 + 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        let d = tape.constant(Tensor::ones(&[1, 4]));
        let extra = tape.constant(Tensor::ones(&[1, 2]));
        let out = f.fuse_parts(&mut tape, &store, h, &[d, extra]).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 3]);
        assert!(f.fuse(&mut tape, &store, h, d).is_err());
    }
}
