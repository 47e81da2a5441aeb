//! Small dialect classifier over mel statistics. Its hidden layer doubles as
//! the dialect embedding used for DECS.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialect::{Dialect, NUM_DIALECTS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};

/// One labelled utterance as seen by the classifier.
#[derive(Debug, Clone)]
pub struct LabeledMel {
    pub id: String,
    pub dialect: Dialect,
    /// `frames × n_mels` log-mel matrix.
    pub mel: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub embedding_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of each dialect held out for the accuracy report.
    pub holdout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embedding_dim: 16,
            epochs: 300,
            learning_rate: 0.01,
            holdout: 0.2,
        }
    }
}

/// `features → Linear → tanh` (embedding) `→ Linear → softmax`.
#[derive(Debug, Clone)]
pub struct DialectClassifier {
    pub store: ParamStore,
    hidden: Linear,
    out: Linear,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    /// Mean training embedding of each dialect, `3 × embedding_dim`.
    pub centroids: Tensor,
    pub n_mels: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: DialectClassifier,
    /// Percentage correct on the held-out split; `None` when nothing was held out.
    pub heldout_accuracy: Option<f64>,
    pub final_loss: f64,
}

/// Per-bin mean and standard deviation over frames, `2 · n_mels` values.
pub fn mel_features(mel: &Tensor) -> Result<Vec<f64>> {
    let (frames, m) = mel.dims2("mel_features")?;
    if frames == 0 {
        return Err(Error::InvalidArgument("mel has no frames".into()));
    }
    let mut out = vec![0.0; 2 * m];
    for j in 0..m {
        let mean = (0..frames).map(|i| mel.get(i, j)).sum::<f64>() / frames as f64;
        let var = (0..frames).map(|i| (mel.get(i, j) - mean).powi(2)).sum::<f64>() / frames as f64;
        out[j] = mean;
        out[m + j] = var.sqrt();
    }
    Ok(out)
}

/// Splits indices per dialect into (train, held-out) with a seeded shuffle.
fn split(examples: &[LabeledMel], holdout: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for d in Dialect::ALL {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].dialect == d).collect();
        idx.shuffle(rng);
        let n_test = (idx.len() as f64 * holdout).floor() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn train_dialect_classifier(
    examples: &[LabeledMel],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    let present = Dialect::ALL
        .iter()
        .filter(|&&d| examples.iter().any(|e| e.dialect == d))
        .count();
    if present < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier training needs at least two dialects, found {present}"
        )));
    }
    let n_mels = examples[0].mel.cols();
    let feats = examples
        .iter()
        .map(|e| {
            if e.mel.cols() != n_mels {
                return Err(Error::shape("classifier features", e.mel.shape(), &[e.mel.rows(), n_mels]));
            }
            mel_features(&e.mel)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = 2 * n_mels;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split(examples, config.holdout, &mut rng);

    let mut feature_mean = vec![0.0; dim];
    let mut feature_std = vec![0.0; dim];
    for &i in &train {
        for (m, v) in feature_mean.iter_mut().zip(&feats[i]) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for ((s, v), m) in feature_std.iter_mut().zip(&feats[i]).zip(&feature_mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    for s in &mut feature_std {
        *s = s.sqrt().max(1e-6);
    }

    let mut store = ParamStore::new();
    let hidden = Linear::new(&mut store, "classifier.hidden", dim, config.embedding_dim, &mut rng)?;
    let out = Linear::new(&mut store, "classifier.out", config.embedding_dim, NUM_DIALECTS, &mut rng)?;
    let mut clf = DialectClassifier {
        store,
        hidden,
        out,
        feature_mean,
        feature_std,
        centroids: Tensor::zeros(&[NUM_DIALECTS, config.embedding_dim]),
        n_mels,
    };

    let x_train = clf.normalized_matrix(train.iter().map(|&i| feats[i].as_slice()))?;
    let y_train: Vec<usize> = train.iter().map(|&i| examples[i].dialect.id()).collect();
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let emb = clf.hidden.forward(&mut tape, &clf.store, x)?;
        let emb = tape.tanh(emb);
        let logits = clf.out.forward(&mut tape, &clf.store, emb)?;
        let loss = tape.cross_entropy(logits, &y_train)?;
        final_loss = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        adam.step(&mut clf.store, &tape.param_grads(&grads))?;
    }

    let emb_dim = config.embedding_dim;
    let mut centroids = vec![0.0; NUM_DIALECTS * emb_dim];
    let mut counts = [0usize; NUM_DIALECTS];
    let train_emb = clf.embed_matrix(&x_train)?;
    for (r, &label) in y_train.iter().enumerate() {
        counts[label] += 1;
        for j in 0..emb_dim {
            centroids[label * emb_dim + j] += train_emb.get(r, j);
        }
    }
    for (d, &c) in counts.iter().enumerate() {
        for j in 0..emb_dim {
            centroids[d * emb_dim + j] /= c.max(1) as f64;
        }
    }
    clf.centroids = Tensor::matrix(NUM_DIALECTS, emb_dim, centroids)?;

    let heldout_accuracy = if test.is_empty() {
        None
    } else {
        let correct = test
            .iter()
            .filter(|&&i| clf.predict(&examples[i].mel).map(|p| argmax(&p) == examples[i].dialect.id()).unwrap_or(false))
            .count();
        Some(100.0 * correct as f64 / test.len() as f64)
    };
    Ok(TrainedClassifier {
        classifier: clf,
        heldout_accuracy,
        final_loss,
    })
}

pub fn argmax(p: &[f64]) -> usize {
    (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap_or(0)
}

impl DialectClassifier {
    pub fn embedding_dim(&self) -> usize {
        self.hidden.fan_out
    }

    fn normalized_matrix<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Result<Tensor> {
        let dim = self.feature_mean.len();
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend(
                r.iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_std)
                    .map(|((v, m), s)| (v - m) / s),
            );
            n += 1;
        }
        Tensor::matrix(n, dim, data)
    }

    fn embed_matrix(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = self.hidden.forward(&mut tape, &self.store, xv)?;
        let h = tape.tanh(h);
        Ok(tape.value(h).clone())
    }

    fn features(&self, mel: &Tensor) -> Result<Tensor> {
        if mel.cols() != self.n_mels {
            return Err(Error::shape("classifier input", mel.shape(), &[mel.rows(), self.n_mels]));
        }
        let f = mel_features(mel)?;
        self.normalized_matrix(std::iter::once(f.as_slice()))
    }

    /// Hidden-layer dialect embedding of one mel.
    pub fn embed(&self, mel: &Tensor) -> Result<Vec<f64>> {
        Ok(self.embed_matrix(&self.features(mel)?)?.into_data())
    }

    /// Softmax probabilities over the three dialects.
    pub fn predict(&self, mel: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict_with_embedding(mel)?.0)
    }

    /// `(softmax, embedding)` from one forward pass.
    pub fn predict_with_embedding(&self, mel: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.features(mel)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let h = self.hidden.forward(&mut tape, &self.store, xv)?;
        let h = tape.tanh(h);
        let logits = self.out.forward(&mut tape, &self.store, h)?;
        let p = tape.softmax_rows(logits)?;
        Ok((tape.value(p).data().to_vec(), tape.value(h).data().to_vec()))
    }

    pub fn centroid(&self, dialect: Dialect) -> &[f64] {
        self.centroids.row(dialect.id())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = self.store.clone();
        params.add("classifier.feature_mean", Tensor::vector(self.feature_mean.clone())?)?;
        params.add("classifier.feature_std", Tensor::vector(self.feature_std.clone())?)?;
        params.add("classifier.centroids", self.centroids.clone())?;
        let ckpt = Checkpoint {
            meta: vec![
                ("kind".into(), "dialect-classifier".into()),
                ("n_mels".into(), self.n_mels.to_string()),
            ],
            params,
        };
        save_checkpoint(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: m.to_string(),
        };
        if ckpt.meta_value("kind") != Some("dialect-classifier") {
            return Err(bad("not a dialect-classifier checkpoint"));
        }
        let n_mels: usize = ckpt
            .meta_value("n_mels")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing n_mels"))?;
        let p = &ckpt.params;
        let get = |name: &str| {
            p.id(name)
                .map(|id| p.get(id).clone())
                .ok_or_else(|| bad(&format!("missing parameter {name}")))
        };
        let hw = get("classifier.hidden.weight")?;
        let hb = get("classifier.hidden.bias")?;
        let ow = get("classifier.out.weight")?;
        let ob = get("classifier.out.bias")?;
        let feature_mean = get("classifier.feature_mean")?.into_data();
        let feature_std = get("classifier.feature_std")?.into_data();
        let centroids = get("classifier.centroids")?;
        let (dim, emb) = hw.dims2("classifier")?;
        if dim != 2 * n_mels || feature_mean.len() != dim || feature_std.len() != dim {
            return Err(bad("feature dimensions disagree with n_mels"));
        }
        let mut store = ParamStore::new();
        let hidden = Linear {
            weight: store.add("classifier.hidden.weight", hw)?,
            bias: store.add("classifier.hidden.bias", hb)?,
            fan_in: dim,
            fan_out: emb,
        };
        let out = Linear {
            weight: store.add("classifier.out.weight", ow)?,
            bias: store.add("classifier.out.bias", ob)?,
            fan_in: emb,
            fan_out: NUM_DIALECTS,
        };
        Ok(DialectClassifier {
            store,
            hidden,
            out,
            feature_mean,
            feature_std,
            centroids,
            n_mels,
        })
    }
}
