//! Decoder-only language model: token/position embedding, a stack of
//! single-head causal attention blocks with residual connections, and a linear
//! prediction head over the byte vocabulary.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fused_forward_on, FusedContext};
use crate::numerics::rng::{self, SeededRng};
use crate::numerics::{log_sum_exp, Matrix, NodeId, ParamId, ParamStore, Scalar, Tape};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the one-hot input token representation.
    pub d_seq: usize,
    pub d_emb: usize,
    pub d_vocab: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_seq: Vocabulary::SIZE,
            d_emb: 32,
            d_vocab: Vocabulary::SIZE,
            n_layers: 2,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_seq == 0 || self.d_emb == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.d_vocab < 2 {
            return Err(Error::Config("d_vocab must be >= 2".into()));
        }
        if self.d_seq != Vocabulary::SIZE || self.d_vocab != Vocabulary::SIZE {
            return Err(Error::Config(format!(
                "byte-level vocabulary needs d_seq = d_vocab = {}",
                Vocabulary::SIZE
            )));
        }
        Ok(())
    }
}

/// Handles to the parameters of one attention block.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// `f_init`: d_seq × d_emb token embedding.
    pub init: ParamId,
    /// Learned absolute positions, max_seq × d_emb.
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    /// d_emb × d_vocab prediction head.
    pub head: ParamId,
    _scalar: std::marker::PhantomData<T>,
}

/// Parameter name prefixes.
pub const LM_PREFIX: &str = "lm.";
pub const LM_BIAS_PREFIX: &str = "lm.bias.";

impl<T: Scalar> LanguageModel<T> {
    /// Registers freshly initialized parameters in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d_emb;
        let mut r = rng::rng(config.seed, "lm");
        let emb_scale = (3.0 / d as f64).sqrt();
        let init = store.add("lm.embed", rng::uniform(&mut r, config.d_seq, d, emb_scale))?;
        let pos = store.add(
            "lm.pos",
            rng::uniform(&mut r, config.max_seq, d, 0.5 * emb_scale),
        )?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut w = |name: &str, r: &mut SeededRng| {
                store.add(format!("lm.l{l}.{name}"), rng::fan_in_init(r, d, d))
            };
            let (wq, wk, wv, wo) = (w("wq", &mut r)?, w("wk", &mut r)?, w("wv", &mut r)?, w("wo", &mut r)?);
            let mut b = |name: &str| store.add(format!("{LM_BIAS_PREFIX}l{l}.{name}"), Matrix::zeros(1, d));
            let (bq, bk, bv, bo) = (b("q")?, b("k")?, b("v")?, b("o")?);
            layers.push(DecoderLayer {
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
            });
        }
        let head = store.add("lm.head", rng::fan_in_init(&mut r, d, config.d_vocab))?;
        Ok(Self {
            config,
            vocab: Vocabulary::byte_level(),
            init,
            pos,
            layers,
            head,
            _scalar: std::marker::PhantomData,
        })
    }

    /// Re-binds handles to parameters already present in `store` (checkpoint load).
    pub fn bind(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(DecoderLayer {
                    wq: store.id(&format!("lm.l{l}.wq"))?,
                    wk: store.id(&format!("lm.l{l}.wk"))?,
                    wv: store.id(&format!("lm.l{l}.wv"))?,
                    wo: store.id(&format!("lm.l{l}.wo"))?,
                    bq: store.id(&format!("{LM_BIAS_PREFIX}l{l}.q"))?,
                    bk: store.id(&format!("{LM_BIAS_PREFIX}l{l}.k"))?,
                    bv: store.id(&format!("{LM_BIAS_PREFIX}l{l}.v"))?,
                    bo: store.id(&format!("{LM_BIAS_PREFIX}l{l}.o"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            init: store.id("lm.embed")?,
            pos: store.id("lm.pos")?,
            head: store.id("lm.head")?,
            config,
            vocab: Vocabulary::byte_level(),
            layers,
            _scalar: std::marker::PhantomData,
        })
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq {
            return Err(Error::Capacity {
                len,
                max_seq: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// `f_init(x)`: token embedding plus learned position embedding.
    pub fn embed_on(&self, tape: &mut Tape<'_, T>, x: &[u32]) -> Result<NodeId> {
        if x.is_empty() {
            return Err(Error::Evaluation("empty token sequence".into()));
        }
        self.check_len(x.len())?;
        if let Some(&bad) = x.iter().find(|&&t| t as usize >= self.config.d_seq) {
            return Err(Error::Vocabulary(bad));
        }
        let ids: Vec<usize> = x.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..x.len()).collect();
        let table = tape.param(self.init);
        let tok = tape.gather_rows(table, &ids)?;
        let pos_table = tape.param(self.pos);
        let pos = tape.gather_rows(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    /// One decoder block: `z + W_o(normalize(W_q(z) W_k(z)ᵀ) W_v(z))` with a
    /// causal mask inside the normalization.
    pub fn block_on(&self, tape: &mut Tape<'_, T>, layer: usize, z: NodeId) -> Result<NodeId> {
        let n = tape.value(z).rows();
        self.check_len(n)?;
        let lp = &self.layers[layer];
        let q = affine(tape, z, lp.wq, lp.bq)?;
        let k = affine(tape, z, lp.wk, lp.bk)?;
        let v = affine(tape, z, lp.wv, lp.bv)?;
        let scores = tape.matmul_t(q, k)?;
        let attn = tape.attention_normalize(scores, self.config.d_emb, true);
        let mixed = tape.matmul(attn, v)?;
        let out = affine(tape, mixed, lp.wo, lp.bo)?;
        tape.add(z, out)
    }

    pub fn forward_on(&self, tape: &mut Tape<'_, T>, x: &[u32]) -> Result<NodeId> {
        let mut z = self.embed_on(tape, x)?;
        for l in 0..self.layers.len() {
            z = self.block_on(tape, l, z)?;
        }
        Ok(z)
    }

    /// Applies the prediction head to every row: N × d_vocab logits.
    pub fn logits_on(&self, tape: &mut Tape<'_, T>, z: NodeId) -> Result<NodeId> {
        let head = tape.param(self.head);
        tape.matmul(z, head)
    }
}

fn affine<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
    let w = tape.param(w);
    let xw = tape.matmul(x, w)?;
    let b = tape.param(b);
    tape.add_row(xw, b)
}

/// Runs a single decoder block outside a training tape.
pub fn block_forward<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    layer: usize,
    z: &Matrix<T>,
) -> Result<Matrix<T>> {
    if z.cols() != model.config.d_emb {
        return Err(Error::Dimension {
            op: "block_forward",
            lhs: z.shape(),
            rhs: (z.rows(), model.config.d_emb),
        });
    }
    let mut tape = Tape::new(store);
    let zn = tape.input(z.clone());
    let out = model.block_on(&mut tape, layer, zn)?;
    Ok(tape.value(out).clone())
}

/// `z_final = f_trans(x)`, shape `len(x) × d_emb`.
pub fn transformer_forward<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    x: &[u32],
) -> Result<Matrix<T>> {
    let mut tape = Tape::new(store);
    let out = model.forward_on(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64 },
}

/// Next-token distribution from the last row of `z_final`.
pub fn next_token_probs<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    z_final: &Matrix<T>,
) -> Result<Vec<T>> {
    if z_final.rows() == 0 {
        return Err(Error::Evaluation("empty embedding".into()));
    }
    let last = z_final.slice_rows(z_final.rows() - 1, 1);
    let logits = last.matmul(store.value(model.head))?;
    let lse = log_sum_exp(logits.data());
    Ok(logits.data().iter().map(|&l| (l - lse).exp()).collect())
}

/// Predicts the next token from the last row of `z_final`. Greedy ties go to
/// the lowest token id.
pub fn predict_next<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    z_final: &Matrix<T>,
    mode: DecodeMode,
) -> Result<u32> {
    let probs = next_token_probs(model, store, z_final)?;
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        DecodeMode::Sample { seed } => {
            let weights: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::Evaluation(format!("bad distribution: {e}")))?;
            let mut r = rng::rng(seed, "sample");
            Ok(dist.sample(&mut r) as u32)
        }
    }
}

/// Autoregressive decoding. Each step re-runs the (fused, when `context` is
/// given) forward pass over the whole sequence and appends one token; stops
/// after emitting `[eos]` or `max_new` tokens. The returned sequence includes
/// the prompt.
pub fn generate<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    prompt: &[u32],
    context: Option<&FusedContext<'_, T>>,
    max_new: usize,
    mode: DecodeMode,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Evaluation("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    for step in 0..max_new {
        // the sequence after this step's token must still fit
        model.check_len(seq.len() + 1)?;
        let mut tape = Tape::new(store);
        let z = match context {
            Some(ctx) => fused_forward_on(model, ctx, &mut tape, &seq)?,
            None => model.forward_on(&mut tape, &seq)?,
        };
        let step_mode = match mode {
            DecodeMode::Sample { seed } => DecodeMode::Sample {
                seed: rng::derive_seed(seed, &format!("step{step}")),
            },
            m => m,
        };
        let next = predict_next(model, store, tape.value(z), step_mode)?;
        seq.push(next);
        if next == Vocabulary::EOS {
            break;
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64, n_layers: usize) -> (LanguageModel<f64>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let config = ModelConfig {
            d_emb: 8,
            n_layers,
            max_seq: 8,
            seed,
            ..ModelConfig::default()
        };
        let lm = LanguageModel::new(config, &mut store).unwrap();
        (lm, store)
    }

    fn zero_layers(store: &mut ParamStore<f64>) {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm.l") || p.name.starts_with(LM_BIAS_PREFIX))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let (r, c) = store.value(id).shape();
            store.get_mut(id).value = Matrix::zeros(r, c);
        }
    }

    #[test]
    fn zero_layers_are_residual_identity() {
        let (lm, mut store) = tiny(1, 2);
        zero_layers(&mut store);
        let x = [3, 200, 17];
        let z = transformer_forward(&lm, &store, &x).unwrap();
        let emb = store.value(lm.init);
        let pos = store.value(lm.pos);
        for (i, &t) in x.iter().enumerate() {
            let want: Vec<f64> = emb.row(t as usize).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
            assert_eq!(z.row(i), &want[..]);
        }
        let block = block_forward(&lm, &store, 0, &z).unwrap();
        assert!(block.bit_eq(&z));
    }

    #[test]
    fn single_token_block() {
        let (lm, store) = tiny(2, 1);
        let z = rng::uniform(&mut rng::rng(2, "z"), 1, 8, 1.0);
        let out = block_forward(&lm, &store, 0, &z).unwrap();
        let lp = &lm.layers[0];
        let want = z
            .add(&z.matmul(store.value(lp.wv)).unwrap().matmul(store.value(lp.wo)).unwrap())
            .unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let config = ModelConfig {
            d_emb: 2,
            n_layers: 1,
            max_seq: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let lm = LanguageModel::new(config, &mut store).unwrap();
        zero_layers(&mut store);
        let lp = lm.layers[0].clone();
        for id in [lp.wq, lp.wk, lp.wv, lp.wo] {
            store.get_mut(id).value = Matrix::identity(2);
        }
        store.get_mut(lm.init).value = Matrix::from_fn(Vocabulary::SIZE, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        store.get_mut(lm.pos).value = Matrix::zeros(2, 2);
        let z = transformer_forward(&lm, &store, &[0, 1]).unwrap();
        // row 1 attends to [e0, e1] with scores [0, 1/sqrt(2)]
        let a = (0.5f64).sqrt();
        let p1 = a.exp() / (1.0 + a.exp());
        let want = Matrix::from_rows(&[&[2.0, 0.0], &[1.0 - p1, 1.0 + p1]]);
        assert!(z.max_abs_diff(&want) < 1e-15, "{z:?}");
    }

    #[test]
    fn causal_prefix_rows_are_exact() {
        let (lm, store) = tiny(3, 2);
        let short = transformer_forward(&lm, &store, &[5, 6, 7]).unwrap();
        let long = transformer_forward(&lm, &store, &[5, 6, 7, 8]).unwrap();
        assert!(long.slice_rows(0, 3).bit_eq(&short));
    }

    #[test]
    fn capacity_and_vocabulary_errors() {
        let (lm, store) = tiny(4, 1);
        assert!(matches!(
            transformer_forward(&lm, &store, &[1; 9]),
            Err(Error::Capacity { len: 9, max_seq: 8 })
        ));
        assert!(matches!(transformer_forward(&lm, &store, &[300]), Err(Error::Vocabulary(300))));
    }

    #[test]
    fn prediction_head() {
        let (lm, mut store) = tiny(5, 1);
        let z = transformer_forward(&lm, &store, &[1, 2]).unwrap();
        let probs = next_token_probs(&lm, &store, &z).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        store.get_mut(lm.head).value = Matrix::zeros(8, Vocabulary::SIZE);
        assert_eq!(predict_next(&lm, &store, &z, DecodeMode::Greedy).unwrap(), 0);

        let last: Vec<f64> = z.row(1).to_vec();
        let norm = last.iter().map(|v| v * v).sum::<f64>().sqrt();
        let head = Matrix::from_fn(8, Vocabulary::SIZE, |i, j| if j == 42 { 10.0 * last[i] / norm } else { 0.0 });
        store.get_mut(lm.head).value = head;
        assert_eq!(predict_next(&lm, &store, &z, DecodeMode::Greedy).unwrap(), 42);

        let (lm, store) = tiny(6, 1);
        let z = transformer_forward(&lm, &store, &[1, 2]).unwrap();
        let mode = DecodeMode::Sample { seed: 9 };
        let a: Vec<u32> = (0..5).map(|_| predict_next(&lm, &store, &z, mode).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn generation() {
        let (lm, mut store) = tiny(7, 2);
        let prompt = [Vocabulary::BOS, 104, 105];
        assert_eq!(generate(&lm, &store, &prompt, None, 0, DecodeMode::Greedy).unwrap(), prompt);
        let a = generate(&lm, &store, &prompt, None, 4, DecodeMode::Greedy).unwrap();
        assert_eq!(a, generate(&lm, &store, &prompt, None, 4, DecodeMode::Greedy).unwrap());
        assert!(a.len() <= 7);
        assert!(matches!(
            generate(&lm, &store, &prompt, None, 6, DecodeMode::Greedy),
            Err(Error::Capacity { .. })
        ));

        // a head whose only nonzero column is [eos], fed by a constant embedding
        zero_layers(&mut store);
        store.get_mut(lm.init).value = Matrix::filled(Vocabulary::SIZE, 8, 1.0);
        store.get_mut(lm.pos).value = Matrix::zeros(8, 8);
        let eos = Vocabulary::EOS as usize;
        store.get_mut(lm.head).value = Matrix::from_fn(8, Vocabulary::SIZE, |_, j| if j == eos { 1.0 } else { 0.0 });
        let out = generate(&lm, &store, &prompt, None, 4, DecodeMode::Greedy).unwrap();
        assert_eq!(out, [&prompt[..], &[Vocabulary::EOS]].concat());
    }
}
