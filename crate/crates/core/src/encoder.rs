//! Transformer text encoder with dialect-routed feed-forward sublayers.
//!
//! Each block is post-norm: `x → MHSA → +x → LN → DSDR → +· → LN`. The DSDR
//! sublayer sums a shared public FFN with exactly one of three private FFNs,
//! selected by the dialect id. With routing disabled the block is an ordinary
//! transformer block with a single shared FFN.

use rand::Rng;

use crate::dialect::{Dialect, DialectEmbedding, Fusion, NUM_DIALECTS};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, FeedForward, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{TokenSequence, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

/// Output of one attention call: the projected result plus each head's
/// attention-weight matrix.
#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            head_dim: dim / heads,
        })
    }
}

/// Multi-head self-attention. `pad[j]` excludes key position `j`.
pub fn mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &AttentionParams,
    pad: &[bool],
) -> Result<Attention> {
    let q = params.q.forward(tape, store, x)?;
    let k = params.k.forward(tape, store, x)?;
    let v = params.v.forward(tape, store, x)?;
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let start = h * params.head_dim;
        let qh = tape.slice_cols(q, start, params.head_dim)?;
        let kh = tape.slice_cols(k, start, params.head_dim)?;
        let vh = tape.slice_cols(v, start, params.head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.masked_softmax_rows(scores, Some(pad))?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let output = params.out.forward(tape, store, cat)?;
    Ok(Attention { output, weights })
}

/// Public FFN plus three dialect-private FFNs of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DsdrBlockParams {
    pub public: FeedForward,
    pub private: Option<[FeedForward; NUM_DIALECTS]>,
}

impl DsdrBlockParams {
    /// `routed = false` builds the ablation: a single shared FFN.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        routed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let public = FeedForward::new(store, &format!("{name}.public"), dim, hidden, rng)?;
        let private = if routed {
            Some([
                FeedForward::new(store, &format!("{name}.private0"), dim, hidden, rng)?,
                FeedForward::new(store, &format!("{name}.private1"), dim, hidden, rng)?,
                FeedForward::new(store, &format!("{name}.private2"), dim, hidden, rng)?,
            ])
        } else {
            None
        };
        Ok(DsdrBlockParams { public, private })
    }

    pub fn num_scalars(&self) -> usize {
        self.public.num_scalars()
            + self
                .private
                .as_ref()
                .map_or(0, |p| p.iter().map(FeedForward::num_scalars).sum())
    }
}

/// One private-branch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteEvent {
    pub block: usize,
    pub branch: usize,
}

/// `FFN_public(h) + FFN_private[did](h)`; only the selected branch is
/// evaluated and recorded in `trace`.
pub fn dsdr_forward(
    tape: &mut Tape,
    store: &ParamStore,
    h_attn: Var,
    dialect: Dialect,
    params: &DsdrBlockParams,
    block: usize,
    trace: &mut Vec<RouteEvent>,
) -> Result<Var> {
    let public = params.public.forward(tape, store, h_attn)?;
    let Some(private) = &params.private else {
        return Ok(public);
    };
    let branch = dialect.id();
    trace.push(RouteEvent { block, branch });
    let routed = private[branch].forward(tape, store, h_attn)?;
    tape.add(public, routed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub norm1: LayerNorm,
    pub ffn: DsdrBlockParams,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    /// One entry per block: whether its FFN is dialect-routed.
    pub routed: Vec<bool>,
    pub dialect_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub fusion: Fusion,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Fused hidden states, `T × hidden`.
    pub hidden: Var,
    pub trace: Vec<RouteEvent>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden;
        let embedding = store.add(
            format!("{name}.embedding"),
            Tensor::randn(&[config.vocab_size, h], 1.0 / (h as f64).sqrt(), rng),
        )?;
        let mut blocks = Vec::with_capacity(config.routed.len());
        for (i, &routed) in config.routed.iter().enumerate() {
            let bn = format!("{name}.block{i}");
            blocks.push(EncoderBlock {
                attn: AttentionParams::new(store, &format!("{bn}.attn"), h, config.heads, rng)?,
                norm1: LayerNorm::new(store, &format!("{bn}.norm1"), h)?,
                ffn: DsdrBlockParams::new(store, &format!("{bn}.ffn"), h, config.ffn_hidden, routed, rng)?,
                norm2: LayerNorm::new(store, &format!("{bn}.norm2"), h)?,
            });
        }
        let fusion = Fusion::new(store, &format!("{name}.fusion"), config.dialect_dim, h, rng)?;
        Ok(Encoder {
            config,
            embedding,
            blocks,
            fusion,
        })
    }

    /// Token embeddings plus sinusoidal positions, `T × hidden`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocab of size {}",
                self.config.vocab_size
            )));
        }
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, &tokens.indices())?;
        let pos = tape.constant(sinusoidal_positions(tokens.len(), self.config.hidden));
        tape.add(emb, pos)
    }

    /// Runs the block stack and fuses `h_did` into its output. Positions
    /// holding `PAD` are excluded as attention keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &TokenSequence,
        dialect: Dialect,
        h_did: Var,
    ) -> Result<EncoderOutput> {
        let pad: Vec<bool> = tokens.ids.iter().map(|&i| i == PAD).collect();
        let mut x = self.embed(tape, store, tokens)?;
        let mut trace = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let a = mhsa(tape, store, x, &block.attn, &pad)?;
            let r = tape.add(x, a.output)?;
            let h = block.norm1.forward(tape, store, r)?;
            let f = dsdr_forward(tape, store, h, dialect, &block.ffn, i, &mut trace)?;
            let r = tape.add(h, f)?;
            x = block.norm2.forward(tape, store, r)?;
        }
        let hidden = self.fusion.fuse(tape, store, x, h_did)?;
        Ok(EncoderOutput { hidden, trace })
    }
}

/// Convenience wrapper: embeds the dialect with `emb` and runs the encoder.
pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &Encoder,
    emb: &DialectEmbedding,
    tokens: &TokenSequence,
    dialect: Dialect,
) -> Result<EncoderOutput> {
    let h_did = emb.embed(tape, store, dialect)?;
    encoder.forward(tape, store, tokens, dialect, h_did)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialect::DialectNorm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            source_text: String::new(),
        }
    }

    fn build(seed: u64, blocks: usize, routed: bool) -> (ParamStore, Encoder, DialectEmbedding) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = DialectEmbedding::new(&mut store, "dialect", 8, DialectNorm::L2, &mut rng).unwrap();
        let enc = Encoder::new(
            &mut store,
            "enc",
            EncoderConfig {
                vocab_size: 12,
                hidden: 8,
                ffn_hidden: 8,
                heads: 2,
                routed: vec![routed; blocks],
                dialect_dim: 8,
            },
            &mut rng,
        )
        .unwrap();
        (store, enc, emb)
    }

    #[test]
    fn single_position_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let a = mhsa(&mut tape, &store, x, &p, &[false]).unwrap();
        for w in &a.weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
        // output = W_O applied to the position's value vector
        let v = p.v.forward(&mut tape, &store, x).unwrap();
        let expect = p.out.forward(&mut tape, &store, v).unwrap();
        assert_eq!(tape.value(a.output), tape.value(expect));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 6, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 6], 2.0, &mut rng));
        let a = mhsa(&mut tape, &store, x, &p, &[false, false, true, false, false]).unwrap();
        for w in &a.weights {
            let t = tape.value(*w);
            for r in 0..5 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(t.row(r)[2], 0.0);
            }
        }
        assert!(mhsa(&mut tape, &store, x, &p, &[true; 5]).is_err());
        assert!(AttentionParams::new(&mut store, "bad", 5, 2, &mut rng).is_err());
    }

    #[test]
    fn two_position_single_head_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 2, 1, &mut rng).unwrap();
        let set = |store: &mut ParamStore, l: &Linear, w: [f64; 4]| {
            store.set(l.weight, Tensor::matrix(2, 2, w.to_vec()).unwrap()).unwrap();
            store.set(l.bias, Tensor::zeros(&[2])).unwrap();
        };
        set(&mut store, &p.q, [1.0, 0.0, 0.0, 1.0]);
        set(&mut store, &p.k, [1.0, 0.0, 0.0, 1.0]);
        set(&mut store, &p.v, [2.0, 0.0, 0.0, 1.0]);
        set(&mut store, &p.out, [1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let a = mhsa(&mut tape, &store, x, &p, &[false, false]).unwrap();
        // scores = I/√2; softmax row 0 = [e^{1/√2}, 1]/(e^{1/√2}+1)
        let e = (1.0 / 2f64.sqrt()).exp();
        let (hi, lo) = (e / (e + 1.0), 1.0 / (e + 1.0));
        // V = [[2,0],[0,1]]
        let expect = [2.0 * hi, lo, 2.0 * lo, hi];
        for (g, w) in tape.value(a.output).data().iter().zip(expect) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    fn zero_ffn(store: &mut ParamStore, f: &FeedForward) {
        for id in f.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn dsdr_public_zero_gives_private_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let p = DsdrBlockParams::new(&mut store, "b", 6, 5, true, &mut rng).unwrap();
        zero_ffn(&mut store, &p.public);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        for d in Dialect::ALL {
            let mut trace = Vec::new();
            let out = dsdr_forward(&mut tape, &store, h, d, &p, 0, &mut trace).unwrap();
            let direct = p.private.as_ref().unwrap()[d.id()].forward(&mut tape, &store, h).unwrap();
            assert_eq!(tape.value(out), tape.value(direct));
            assert_eq!(trace, vec![RouteEvent { block: 0, branch: d.id() }]);
        }
    }

    #[test]
    fn dsdr_branches_differ_unless_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let p = DsdrBlockParams::new(&mut store, "b", 6, 5, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let mut tr = Vec::new();
        let a = dsdr_forward(&mut tape, &store, h, Dialect::UTsang, &p, 0, &mut tr).unwrap();
        let b = dsdr_forward(&mut tape, &store, h, Dialect::Amdo, &p, 0, &mut tr).unwrap();
        assert_ne!(tape.value(a), tape.value(b));

        let private = p.private.clone().unwrap();
        for branch in &private[1..] {
            for (src, dst) in private[0].param_ids().iter().zip(branch.param_ids()) {
                let v = store.get(*src).clone();
                store.set(dst, v).unwrap();
            }
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let outs: Vec<Tensor> = Dialect::ALL
            .iter()
            .map(|&d| {
                let v = dsdr_forward(&mut tape, &store, h, d, &p, 0, &mut tr).unwrap();
                tape.value(v).clone()
            })
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn parameter_count_matches_formula() {
        let (dim, hidden) = (192, 192);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = DsdrBlockParams::new(&mut store, "b", dim, hidden, true, &mut rng).unwrap();
        let ffn = 2 * dim * hidden + hidden + dim;
        assert_eq!(p.num_scalars(), 4 * ffn);
        assert_eq!(store.num_scalars(), 4 * ffn);
        let mut store = ParamStore::new();
        let shared = DsdrBlockParams::new(&mut store, "b", dim, hidden, false, &mut rng).unwrap();
        assert_eq!(shared.num_scalars(), ffn);
    }

    #[test]
    fn empty_stack_is_fused_embedding() {
        let (store, enc, emb) = build(1, 0, true);
        let toks = tokens(&[2, 5, 6, 3]);
        let mut tape = Tape::new();
        let out = encoder_forward(&mut tape, &store, &enc, &emb, &toks, Dialect::Kham).unwrap();
        assert!(out.trace.is_empty());
        let e = enc.embed(&mut tape, &store, &toks).unwrap();
        let h = emb.embed(&mut tape, &store, Dialect::Kham).unwrap();
        let fused = enc.fusion.fuse(&mut tape, &store, e, h).unwrap();
        assert_eq!(tape.value(out.hidden), tape.value(fused));
    }

    #[test]
    fn dialect_changes_output_and_trace() {
        for seed in 0..5 {
            let (store, enc, emb) = build(seed, 2, true);
            let toks = tokens(&[2, 5, 6, 7, 3]);
            let mut tape = Tape::new();
            let a = encoder_forward(&mut tape, &store, &enc, &emb, &toks, Dialect::UTsang).unwrap();
            let b = encoder_forward(&mut tape, &store, &enc, &emb, &toks, Dialect::Kham).unwrap();
            assert_ne!(tape.value(a.hidden), tape.value(b.hidden));
            assert_eq!(
                b.trace,
                vec![RouteEvent { block: 0, branch: 2 }, RouteEvent { block: 1, branch: 2 }]
            );
        }
    }

    #[test]
    fn pad_positions_send_no_gradient_to_pad_embedding() {
        let (store, enc, emb) = build(2, 2, true);
        let toks = tokens(&[2, 5, 6, 3, PAD, PAD]);
        let mut tape = Tape::new();
        let out = encoder_forward(&mut tape, &store, &enc, &emb, &toks, Dialect::Amdo).unwrap();
        let valid = tape.gather_rows(out.hidden, &[0, 1, 2, 3]).unwrap();
        let sq = tape.mul(valid, valid).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let g = tape.param_grads(&grads);
        let emb_grad = g.get(enc.embedding).unwrap();
        assert!(emb_grad.row(PAD as usize).iter().all(|&v| v == 0.0));
        assert!(emb_grad.row(5).iter().any(|&v| v != 0.0));
    }
}
