//! Zero-gated fusion of expert queries into the decoder stack.
//!
//! For every layer and modality a cross-attention maps the expert query
//! (`M × d_emb`) onto the text positions (`N × d_emb`); the result is scaled by
//! a scalar gate that starts at exactly zero and added to the block output.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::numerics::{Matrix, NodeId, ParamId, ParamStore, Scalar, Tape};
use crate::transformer::LanguageModel;

pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Percept,
    Detect,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Percept, Modality::Detect];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Percept => "percept",
            Modality::Detect => "detect",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Expert-derived tokens injected into every decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertQuery<T> {
    pub modality: Modality,
    pub tokens: Matrix<T>,
}

impl<T: Scalar> ExpertQuery<T> {
    pub fn new(modality: Modality, tokens: Matrix<T>) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::FusionShape(format!("{modality} query has no rows")));
        }
        if !tokens.is_finite() {
            return Err(Error::FusionShape(format!("{modality} query is not finite")));
        }
        Ok(Self { modality, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Cross-attention weights and gate for one (layer, modality) pair.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `1×1` zero-initialized gate.
    pub gate: ParamId,
}

impl CrossAttention {
    pub fn ids(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.gate]
    }
}

/// Per-layer adapters, indexed `[layer][modality]`.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub d_emb: usize,
    pub layers: Vec<[CrossAttention; 2]>,
}

fn adapter_name(layer: usize, m: Modality, field: &str) -> String {
    format!("{ADAPTER_PREFIX}l{layer}.{m}.{field}")
}

/// Name of the gate parameter for `(layer, modality)`.
pub fn gate_name(layer: usize, m: Modality) -> String {
    adapter_name(layer, m, "gate")
}

impl AdapterSet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        n_layers: usize,
        d_emb: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::rng(seed, "adapters");
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut make = |m: Modality| -> Result<CrossAttention> {
                let mut w = |f: &str| store.add(adapter_name(l, m, f), rng::fan_in_init(&mut r, d_emb, d_emb));
                let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
                let gate = store.add(adapter_name(l, m, "gate"), Matrix::zeros(1, 1))?;
                Ok(CrossAttention {
                    wq,
                    wk,
                    wv,
                    wo,
                    gate,
                })
            };
            layers.push([make(Modality::Percept)?, make(Modality::Detect)?]);
        }
        Ok(Self { d_emb, layers })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, n_layers: usize, d_emb: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let get = |m: Modality| -> Result<CrossAttention> {
                    Ok(CrossAttention {
                        wq: store.id(&adapter_name(l, m, "wq"))?,
                        wk: store.id(&adapter_name(l, m, "wk"))?,
                        wv: store.id(&adapter_name(l, m, "wv"))?,
                        wo: store.id(&adapter_name(l, m, "wo"))?,
                        gate: store.id(&adapter_name(l, m, "gate"))?,
                    })
                };
                Ok([get(Modality::Percept)?, get(Modality::Detect)?])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d_emb, layers })
    }

    pub fn get(&self, layer: usize, m: Modality) -> &CrossAttention {
        &self.layers[layer][m as usize]
    }

    pub fn gate<T: Scalar>(&self, store: &ParamStore<T>, layer: usize, m: Modality) -> T {
        store.value(self.get(layer, m).gate).data()[0]
    }

    pub fn set_gate<T: Scalar>(&self, store: &mut ParamStore<T>, layer: usize, m: Modality, g: T) {
        store.get_mut(self.get(layer, m).gate).value = Matrix::scalar(g);
    }
}

/// `Tok = W_o(normalize(W_q(z) W_k(Q)ᵀ) W_v(Q))`, no mask, no residual.
pub fn query_to_tok_on<T: Scalar>(
    tape: &mut Tape<'_, T>,
    ca: &CrossAttention,
    d_emb: usize,
    z: NodeId,
    q: NodeId,
) -> Result<NodeId> {
    let (zs, qs) = (tape.value(z).shape(), tape.value(q).shape());
    if zs.1 != d_emb || qs.1 != d_emb {
        return Err(Error::FusionShape(format!(
            "text {zs:?} and expert query {qs:?} must both have {d_emb} columns"
        )));
    }
    let wq = tape.param(ca.wq);
    let wk = tape.param(ca.wk);
    let wv = tape.param(ca.wv);
    let wo = tape.param(ca.wo);
    let qz = tape.matmul(z, wq)?;
    let kq = tape.matmul(q, wk)?;
    let vq = tape.matmul(q, wv)?;
    let scores = tape.matmul_t(qz, kq)?;
    let attn = tape.attention_normalize(scores, d_emb, false);
    let mixed = tape.matmul(attn, vq)?;
    tape.matmul(mixed, wo)
}

pub fn query_to_tok<T: Scalar>(
    store: &ParamStore<T>,
    ca: &CrossAttention,
    z: &Matrix<T>,
    q: &ExpertQuery<T>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new(store);
    let zn = tape.input(z.clone());
    let qn = tape.input(q.tokens.clone());
    let out = query_to_tok_on(&mut tape, ca, z.cols(), zn, qn)?;
    Ok(tape.value(out).clone())
}

/// `block_out + g_p·tok_p + g_d·tok_d`; a zero gate leaves its term out
/// entirely so the identity is exact.
pub fn merge_layer<T: Scalar>(
    block_out: &Matrix<T>,
    tok_p: &Matrix<T>,
    tok_d: &Matrix<T>,
    g_p: T,
    g_d: T,
) -> Result<Matrix<T>> {
    for t in [tok_p, tok_d] {
        if t.shape() != block_out.shape() {
            return Err(Error::FusionShape(format!(
                "token block {:?} does not match layer output {:?}",
                t.shape(),
                block_out.shape()
            )));
        }
    }
    let mut out = block_out.clone();
    if g_p != T::zero() {
        out.axpy(g_p, tok_p)?;
    }
    if g_d != T::zero() {
        out.axpy(g_d, tok_d)?;
    }
    Ok(out)
}

/// Runs the decoder stack with per-layer gated merges. `qp` and `qd` are the
/// expert query nodes shared by all layers.
pub fn fused_layers_on<T: Scalar>(
    model: &LanguageModel<T>,
    adapters: &AdapterSet,
    tape: &mut Tape<'_, T>,
    x: &[u32],
    qp: NodeId,
    qd: NodeId,
) -> Result<NodeId> {
    if adapters.layers.len() != model.layers.len() {
        return Err(Error::FusionShape(format!(
            "{} adapter layers for {} decoder layers",
            adapters.layers.len(),
            model.layers.len()
        )));
    }
    let d = model.config.d_emb;
    let mut z = model.embed_on(tape, x)?;
    for l in 0..model.layers.len() {
        let block = model.block_on(tape, l, z)?;
        let mut terms = Vec::with_capacity(2);
        for (m, q) in [(Modality::Percept, qp), (Modality::Detect, qd)] {
            let ca = adapters.get(l, m);
            let tok = query_to_tok_on(tape, ca, d, z, q)?;
            let gate = tape.param(ca.gate);
            terms.push((tok, gate));
        }
        z = tape.gated_merge(block, &terms)?;
    }
    Ok(z)
}

/// Adapters plus precomputed expert queries: everything generation needs
/// beyond the language model itself.
#[derive(Debug, Clone, Copy)]
pub struct FusedContext<'a, T> {
    pub adapters: &'a AdapterSet,
    pub percept: &'a ExpertQuery<T>,
    pub detect: &'a ExpertQuery<T>,
}

pub fn fused_forward_on<T: Scalar>(
    model: &LanguageModel<T>,
    ctx: &FusedContext<'_, T>,
    tape: &mut Tape<'_, T>,
    x: &[u32],
) -> Result<NodeId> {
    let qp = tape.input(ctx.percept.tokens.clone());
    let qd = tape.input(ctx.detect.tokens.clone());
    fused_layers_on(model, ctx.adapters, tape, x, qp, qd)
}

/// Final merged embedding `Tok_merged^(L)`, shape `len(x) × d_emb`.
pub fn fused_forward<T: Scalar>(
    model: &LanguageModel<T>,
    store: &ParamStore<T>,
    adapters: &AdapterSet,
    q_p: &ExpertQuery<T>,
    q_d: &ExpertQuery<T>,
    x: &[u32],
) -> Result<Matrix<T>> {
    let ctx = FusedContext {
        adapters,
        percept: q_p,
        detect: q_d,
    };
    let mut tape = Tape::new(store);
    let out = fused_forward_on(model, &ctx, &mut tape, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{transformer_forward, ModelConfig, LM_BIAS_PREFIX};

    fn setup(seed: u64, n_layers: usize) -> (LanguageModel<f64>, AdapterSet, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let config = ModelConfig {
            d_emb: 8,
            n_layers,
            max_seq: 8,
            seed,
            ..ModelConfig::default()
        };
        let lm = LanguageModel::new(config, &mut store).unwrap();
        let adapters = AdapterSet::new(&mut store, n_layers, 8, seed).unwrap();
        (lm, adapters, store)
    }

    fn query(seed: u64, m: Modality, rows: usize) -> ExpertQuery<f64> {
        ExpertQuery::new(m, rng::uniform(&mut rng::rng(seed, "q"), rows, 8, 1.0)).unwrap()
    }

    #[test]
    fn gates_start_at_zero() {
        let (_, adapters, store) = setup(1, 3);
        for l in 0..3 {
            for m in Modality::ALL {
                assert_eq!(adapters.gate(&store, l, m), 0.0);
            }
        }
    }

    #[test]
    fn single_row_query_broadcasts() {
        let (_, adapters, store) = setup(2, 1);
        let ca = adapters.get(0, Modality::Percept);
        let z = rng::uniform(&mut rng::rng(2, "z"), 3, 8, 1.0);
        let q = query(2, Modality::Percept, 1);
        let tok = query_to_tok(&store, ca, &z, &q).unwrap();
        let want = q.tokens.matmul(store.value(ca.wv)).unwrap().matmul(store.value(ca.wo)).unwrap();
        for i in 0..3 {
            for (a, b) in tok.row(i).iter().zip(want.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_and_shape_errors() {
        let (_, adapters, mut store) = setup(3, 1);
        let ca = adapters.get(0, Modality::Detect).clone();
        store.get_mut(ca.wo).value = Matrix::zeros(8, 8);
        let z = rng::uniform(&mut rng::rng(3, "z"), 3, 8, 1.0);
        let tok = query_to_tok(&store, &ca, &z, &query(3, Modality::Detect, 4)).unwrap();
        assert_eq!(tok, Matrix::zeros(3, 8));
        let narrow = ExpertQuery::new(Modality::Detect, Matrix::zeros(2, 4)).unwrap();
        assert!(matches!(query_to_tok(&store, &ca, &z, &narrow), Err(Error::FusionShape(_))));
        assert!(ExpertQuery::new(Modality::Detect, Matrix::<f64>::zeros(0, 8)).is_err());
        assert!(ExpertQuery::new(Modality::Detect, Matrix::filled(1, 8, f64::NAN)).is_err());
    }

    #[test]
    fn merge_examples() {
        let mut r = rng::rng(4, "merge");
        let b = rng::uniform::<f64>(&mut r, 2, 3, 1.0);
        let p = rng::uniform::<f64>(&mut r, 2, 3, 1.0);
        let zero = Matrix::zeros(2, 3);
        assert!(merge_layer(&b, &p, &p, 0.0, 0.0).unwrap().bit_eq(&b));
        assert!(merge_layer(&b, &p, &zero, 1.0, 0.0).unwrap().bit_eq(&b.add(&p).unwrap()));
        assert!(matches!(
            merge_layer(&b, &Matrix::zeros(3, 3), &zero, 1.0, 0.0),
            Err(Error::FusionShape(_))
        ));
    }

    #[test]
    fn hand_set_single_layer() {
        let (lm, adapters, mut store) = setup(5, 1);
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm.l") || p.name.starts_with(LM_BIAS_PREFIX))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let (r, c) = store.value(id).shape();
            store.get_mut(id).value = Matrix::zeros(r, c);
        }
        let ca = adapters.get(0, Modality::Detect).clone();
        for id in [ca.wq, ca.wk, ca.wv, ca.wo] {
            store.get_mut(id).value = Matrix::identity(8);
        }
        adapters.set_gate(&mut store, 0, Modality::Detect, 0.5);
        // zero decoder weights make the block an identity; a one-row query
        // passes through identity cross-attention unchanged
        let qd = query(5, Modality::Detect, 1);
        let qp = query(6, Modality::Percept, 3);
        let x = [10, 20];
        let out = fused_forward(&lm, &store, &adapters, &qp, &qd, &x).unwrap();
        let z = transformer_forward(&lm, &store, &x).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                let want = z.row(i)[j] + 0.5 * qd.tokens.row(0)[j];
                assert!((out.row(i)[j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn detect_query_only_matters_through_its_gate() {
        let (lm, adapters, mut store) = setup(7, 2);
        let x = [1, 2, 3];
        let qp = query(7, Modality::Percept, 4);
        let (qd, qd2) = (query(8, Modality::Detect, 5), query(9, Modality::Detect, 5));
        adapters.set_gate(&mut store, 0, Modality::Percept, 0.3);
        let a = fused_forward(&lm, &store, &adapters, &qp, &qd, &x).unwrap();
        let b = fused_forward(&lm, &store, &adapters, &qp, &qd2, &x).unwrap();
        assert!(a.bit_eq(&b));
        adapters.set_gate(&mut store, 1, Modality::Detect, 0.3);
        let a = fused_forward(&lm, &store, &adapters, &qp, &qd, &x).unwrap();
        let b = fused_forward(&lm, &store, &adapters, &qp, &qd2, &x).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn last_layer_gate_scales_contribution_linearly() {
        let (lm, adapters, mut store) = setup(10, 1);
        let x = [4, 5, 6];
        let qp = query(10, Modality::Percept, 2);
        let qd = query(11, Modality::Detect, 3);
        let base = transformer_forward(&lm, &store, &x).unwrap();
        let z0 = {
            let mut t = Tape::new(&store);
            let e = lm.embed_on(&mut t, &x).unwrap();
            t.value(e).clone()
        };
        let contribution = query_to_tok(&store, adapters.get(0, Modality::Detect), &z0, &qd).unwrap();
        for g in [0.25, -1.5, 3.0] {
            adapters.set_gate(&mut store, 0, Modality::Detect, g);
            let out = fused_forward(&lm, &store, &adapters, &qp, &qd, &x).unwrap();
            let diff = out.sub(&base).unwrap().frobenius_norm();
            let want = g.abs() * contribution.frobenius_norm();
            assert!((diff - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn every_adapter_parameter_gets_gradient() {
        let (lm, adapters, mut store) = setup(12, 2);
        for l in 0..2 {
            for m in Modality::ALL {
                adapters.set_gate(&mut store, l, m, 0.4);
            }
        }
        store.set_all_trainable(true);
        let qp = query(12, Modality::Percept, 3);
        let qd = query(13, Modality::Detect, 4);
        let ctx = FusedContext {
            adapters: &adapters,
            percept: &qp,
            detect: &qd,
        };
        let mut tape = Tape::new(&store);
        let z = fused_forward_on(&lm, &ctx, &mut tape, &[7, 8, 9]).unwrap();
        let logits = lm.logits_on(&mut tape, z).unwrap();
        let loss = tape.cross_entropy(logits, &[Some(8), Some(9), Some(10)]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for layer in &adapters.layers {
            for ca in layer {
                for id in ca.ids() {
                    let g = grads.get(id).expect("gradient recorded");
                    assert!(g.frobenius_norm() > 0.0, "{}", store.get(id).name);
                }
            }
        }
    }
}
