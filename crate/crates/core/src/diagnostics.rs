//! Finite-difference gradient suite over every differentiable tape op and
//! over whole models.

use rand::Rng;

use crate::error::Result;
use crate::experts::{CameraFeatureSet, ExpertConfig, CAMERAS};
use crate::finetune::answer_loss_on;
use crate::fusion::Modality;
use crate::model::{FusionConfig, FusionModel};
use crate::numerics::rng::{self, SeededRng};
use crate::numerics::{grad_check, GradCheckReport, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::transformer::ModelConfig;
use crate::vocab::Vocabulary;

/// Worst relative error over all trials of one op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_relative_error: f64,
}

pub const OPS: [&str; 14] = [
    "matmul",
    "matmul_t",
    "add",
    "add_row",
    "scale",
    "softmax",
    "causal_softmax",
    "attention_normalize",
    "gated_merge",
    "gather_rows",
    "slice_rows",
    "concat_rows",
    "cross_entropy",
    "sum",
];

fn dim(r: &mut SeededRng) -> usize {
    r.gen_range(1..=5)
}

/// Reduces `out` to a scalar through a fixed random readout so that every
/// output coordinate carries a distinct weight.
fn readout(tape: &mut Tape<'_, f64>, out: NodeId, w: &Matrix<f64>) -> Result<NodeId> {
    let w = tape.input(w.clone());
    let prod = tape.matmul(out, w)?;
    Ok(tape.sum(prod))
}

fn one_trial(op: &str, r: &mut SeededRng) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let add = |store: &mut ParamStore<f64>, name: &str, rows: usize, cols: usize, r: &mut SeededRng| -> Result<ParamId> {
        store.add(name, rng::uniform(r, rows, cols, 1.0))
    };
    let (n, k, m) = (dim(r), dim(r), dim(r));
    let w_out = |cols: usize, r: &mut SeededRng| rng::uniform::<f64>(r, cols, 1, 1.0);
    match op {
        "matmul" => {
            let a = add(&mut store, "a", n, k, r)?;
            let b = add(&mut store, "b", k, m, r)?;
            let w = w_out(m, r);
            grad_check(&mut store, move |t| {
                let (a, b) = (t.param(a), t.param(b));
                let o = t.matmul(a, b)?;
                readout(t, o, &w)
            })
        }
        "matmul_t" => {
            let a = add(&mut store, "a", n, k, r)?;
            let b = add(&mut store, "b", m, k, r)?;
            let w = w_out(m, r);
            grad_check(&mut store, move |t| {
                let (a, b) = (t.param(a), t.param(b));
                let o = t.matmul_t(a, b)?;
                readout(t, o, &w)
            })
        }
        "add" => {
            let a = add(&mut store, "a", n, k, r)?;
            let b = add(&mut store, "b", n, k, r)?;
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let (a, b) = (t.param(a), t.param(b));
                let o = t.add(a, b)?;
                readout(t, o, &w)
            })
        }
        "add_row" => {
            let a = add(&mut store, "a", n, k, r)?;
            let b = add(&mut store, "b", 1, k, r)?;
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let (a, b) = (t.param(a), t.param(b));
                let o = t.add_row(a, b)?;
                readout(t, o, &w)
            })
        }
        "scale" => {
            let a = add(&mut store, "a", n, k, r)?;
            let s = r.gen_range(-2.0..2.0);
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let a = t.param(a);
                let o = t.scale(a, s);
                readout(t, o, &w)
            })
        }
        "softmax" | "causal_softmax" | "attention_normalize" => {
            let causal = op == "causal_softmax";
            let cols = if causal { n } else { k };
            let a = add(&mut store, "a", n, cols, r)?;
            let d_emb = dim(r);
            let w = w_out(cols, r);
            let op = op.to_string();
            grad_check(&mut store, move |t| {
                let a = t.param(a);
                let o = if op == "attention_normalize" {
                    t.attention_normalize(a, d_emb, false)
                } else {
                    t.softmax(a, 1.0, causal)
                };
                readout(t, o, &w)
            })
        }
        "gated_merge" => {
            let base = add(&mut store, "base", n, k, r)?;
            let t1 = add(&mut store, "t1", n, k, r)?;
            let t2 = add(&mut store, "t2", n, k, r)?;
            let g1 = add(&mut store, "g1", 1, 1, r)?;
            let g2 = store.add("g2", Matrix::zeros(1, 1))?;
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let (b, x1, x2, h1, h2) = (t.param(base), t.param(t1), t.param(t2), t.param(g1), t.param(g2));
                let o = t.gated_merge(b, &[(x1, h1), (x2, h2)])?;
                readout(t, o, &w)
            })
        }
        "gather_rows" => {
            let table = add(&mut store, "table", n, k, r)?;
            let rows: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let a = t.param(table);
                let o = t.gather_rows(a, &rows)?;
                readout(t, o, &w)
            })
        }
        "slice_rows" => {
            let a = add(&mut store, "a", n + 1, k, r)?;
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n + 1 - start);
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let a = t.param(a);
                let o = t.slice_rows(a, start, len)?;
                readout(t, o, &w)
            })
        }
        "concat_rows" => {
            let a = add(&mut store, "a", n, k, r)?;
            let b = add(&mut store, "b", m, k, r)?;
            let w = w_out(k, r);
            grad_check(&mut store, move |t| {
                let (a, b) = (t.param(a), t.param(b));
                let o = t.concat_rows(&[a, b, a])?;
                readout(t, o, &w)
            })
        }
        "cross_entropy" => {
            let a = add(&mut store, "a", n, k + 1, r)?;
            let targets: Vec<Option<usize>> = (0..n)
                .map(|i| (i == 0 || r.gen_bool(0.7)).then(|| r.gen_range(0..=k)))
                .collect();
            grad_check(&mut store, move |t| {
                let a = t.param(a);
                t.cross_entropy(a, &targets)
            })
        }
        "sum" => {
            let a = add(&mut store, "a", n, k, r)?;
            grad_check(&mut store, move |t| {
                let a = t.param(a);
                Ok(t.sum(a))
            })
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// `trials` random checks per op, inputs uniform in `[-1, 1]`.
pub fn op_gradient_suite(seed: u64, trials: usize) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .map(|&op| {
            let mut r = rng::rng(seed, &format!("gradcheck.{op}"));
            let mut worst = 0f64;
            for _ in 0..trials {
                worst = worst.max(one_trial(op, &mut r)?.max_relative_error);
            }
            Ok(OpCheck {
                op,
                trials,
                max_relative_error: worst,
            })
        })
        .collect()
}

/// Random features of the right shapes for `config`.
pub fn random_features(seed: u64, config: &ExpertConfig) -> CameraFeatureSet<f64> {
    let mut r = rng::rng(seed, "gradcheck.features");
    CameraFeatureSet {
        cameras: (0..CAMERAS)
            .map(|_| rng::uniform(&mut r, config.n_det, config.d_yolos, 1.0))
            .collect(),
        perception: rng::uniform(&mut r, config.n_percept_feats, config.d_clip, 1.0),
    }
}

/// Toy fused model with every gate set to a nonzero value so that gradients
/// reach all adapter and expert-path parameters.
pub fn toy_fused_model(seed: u64, d_emb: usize, n_layers: usize, max_seq: usize, experts: ExpertConfig) -> Result<FusionModel<f64>> {
    let mut model = FusionModel::<f64>::new(FusionConfig {
        model: ModelConfig {
            d_emb,
            n_layers,
            max_seq,
            seed,
            ..ModelConfig::default()
        },
        experts,
    })?;
    let mut r = rng::rng(seed, "gradcheck.gates");
    for l in 0..n_layers {
        for m in Modality::ALL {
            let g = r.gen_range(0.3..0.8);
            let ca = model.adapters.get(l, m).clone();
            model.store.get_mut(ca.gate).value = Matrix::scalar(g);
        }
    }
    model.store.set_all_trainable(true);
    Ok(model)
}

/// Answer loss of a toy fused model checked over all of its parameters. The
/// question/answer pair is chosen so the input has exactly `seq_len` tokens.
pub fn fused_gradient_check(seed: u64, d_emb: usize, seq_len: usize, n_det: usize) -> Result<GradCheckReport> {
    let experts = ExpertConfig {
        n_det,
        ..ExpertConfig::default()
    };
    let mut model = toy_fused_model(seed, d_emb, 2, seq_len.max(4), experts.clone())?;
    let feats = random_features(seed, &experts);
    // input = [bos] question answer; the answer takes the last two slots
    let question: String = "where?".chars().cycle().take(seq_len.saturating_sub(3)).collect();
    let answer = "<1";
    let mut store = std::mem::take(&mut model.store);
    let model = &model;
    grad_check(&mut store, move |t| answer_loss_on(model, t, &question, answer, &feats))
}

/// Next-token loss of a one-layer language model on a 4-token sequence.
pub fn transformer_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let config = ModelConfig {
        d_emb: 8,
        n_layers: 1,
        max_seq: 4,
        seed,
        ..ModelConfig::default()
    };
    let lm = crate::transformer::LanguageModel::new(config, &mut store)?;
    let mut r = rng::rng(seed, "gradcheck.biases");
    for layer in &lm.layers {
        for id in [layer.bq, layer.bk, layer.bv, layer.bo] {
            store.get_mut(id).value = rng::uniform(&mut r, 1, 8, 0.5);
        }
    }
    store.set_all_trainable(true);
    let x = [Vocabulary::BOS, 104, 105, 33];
    let targets = [Some(104), Some(105), Some(33), Some(Vocabulary::EOS as usize)];
    let lm = &lm;
    grad_check(&mut store, move |t| {
        let z = lm.forward_on(t, &x)?;
        let logits = lm.logits_on(t, z)?;
        t.cross_entropy(logits, &targets)
    })
}
