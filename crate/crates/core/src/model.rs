//! The complete trainable system: language model, adapters and both expert
//! paths over one shared parameter store, plus its checkpoint container.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{CameraFeatureSet, DetectionPath, ExpertConfig, PerceptionPath};
use crate::fusion::{fused_layers_on, AdapterSet, ExpertQuery, FusedContext, Modality};
use crate::numerics::{Matrix, NodeId, ParamStore, Scalar, Tape};
use crate::transformer::{generate, DecodeMode, LanguageModel, ModelConfig};
use crate::vocab::Vocabulary;

pub const CKPT_MAGIC: &str = "ADAPTERFUSE-CKPT-v1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub model: ModelConfig,
    pub experts: ExpertConfig,
}

#[derive(Debug, Clone)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub store: ParamStore<T>,
    pub lm: LanguageModel<T>,
    pub adapters: AdapterSet,
    pub detect: DetectionPath,
    pub percept: PerceptionPath,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.experts.validate()?;
        let mut store = ParamStore::new();
        let seed = config.model.seed;
        let d = config.model.d_emb;
        let lm = LanguageModel::new(config.model.clone(), &mut store)?;
        let adapters = AdapterSet::new(&mut store, config.model.n_layers, d, seed)?;
        let detect = DetectionPath::new(&mut store, &config.experts, d, seed)?;
        let percept = PerceptionPath::new(&mut store, &config.experts, d, seed)?;
        Ok(Self {
            config,
            store,
            lm,
            adapters,
            detect,
            percept,
        })
    }

    fn bind(config: FusionConfig, store: ParamStore<T>) -> Result<Self> {
        let d = config.model.d_emb;
        Ok(Self {
            lm: LanguageModel::bind(config.model.clone(), &store)?,
            adapters: AdapterSet::bind(&store, config.model.n_layers, d)?,
            detect: DetectionPath::bind(&store, &config.experts, d)?,
            percept: PerceptionPath::bind(&store, &config.experts, d)?,
            config,
            store,
        })
    }

    /// Fused forward pass on `tape`, with both expert queries built on the same
    /// tape so their parameters receive gradients.
    pub fn forward_on(&self, tape: &mut Tape<'_, T>, x: &[u32], feats: &CameraFeatureSet<T>) -> Result<NodeId> {
        let qp = self.percept.forward_on(tape, feats)?;
        let qd = self.detect.forward_on(tape, feats)?;
        fused_layers_on(&self.lm, &self.adapters, tape, x, qp, qd)
    }

    pub fn expert_queries(&self, feats: &CameraFeatureSet<T>) -> Result<(ExpertQuery<T>, ExpertQuery<T>)> {
        let p = crate::experts::build_percept_query(&self.store, &self.percept, feats)?;
        let d = crate::experts::build_detect_query(&self.store, &self.detect, feats)?;
        Ok((p, d))
    }

    /// Token sequence fed to the model for a question: `[bos]` then its bytes.
    pub fn prompt(&self, question: &str) -> Vec<u32> {
        let mut ids = vec![Vocabulary::BOS];
        ids.extend(self.lm.vocab.encode(question));
        ids
    }

    /// Greedy answer for `question`, at most as long as the context allows.
    pub fn answer(&self, question: &str, feats: &CameraFeatureSet<T>, max_new: usize) -> Result<String> {
        let (qp, qd) = self.expert_queries(feats)?;
        let ctx = FusedContext {
            adapters: &self.adapters,
            percept: &qp,
            detect: &qd,
        };
        let prompt = self.prompt(question);
        let room = self.config.model.max_seq.saturating_sub(prompt.len());
        let out = generate(&self.lm, &self.store, &prompt, Some(&ctx), max_new.min(room), DecodeMode::Greedy)?;
        self.lm.vocab.decode(&out[prompt.len()..])
    }

    pub fn gate(&self, layer: usize, m: Modality) -> T {
        self.adapters.gate(&self.store, layer, m)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let m = &self.config.model;
        let e = &self.config.experts;
        let _ = writeln!(out, "{CKPT_MAGIC}");
        let _ = writeln!(out, "scalar {}", std::any::type_name::<T>());
        let _ = writeln!(
            out,
            "model d_seq={} d_emb={} d_vocab={} n_layers={} max_seq={} seed={}",
            m.d_seq, m.d_emb, m.d_vocab, m.n_layers, m.max_seq, m.seed
        );
        let _ = writeln!(
            out,
            "experts d_yolos={} d_clip={} n_det={} prefix_len={} n_percept_feats={}",
            e.d_yolos, e.d_clip, e.n_det, e.prefix_len, e.n_percept_feats
        );
        let _ = writeln!(out, "params {}", self.store.len());
        for (_, p) in self.store.iter() {
            let _ = writeln!(
                out,
                "param {} {} {} {}",
                p.name,
                p.value.rows(),
                p.value.cols(),
                u8::from(p.trainable)
            );
            for i in 0..p.value.rows() {
                let row: Vec<String> = p
                    .value
                    .row(i)
                    .iter()
                    .map(|v| format!("{:016x}", v.as_f64().to_bits()))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ckpt_err = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(CKPT_MAGIC) {
            return Err(ckpt_err(format!("missing {CKPT_MAGIC} header")));
        }
        let scalar = lines.next().unwrap_or_default();
        if scalar != format!("scalar {}", std::any::type_name::<T>()) {
            return Err(ckpt_err(format!("scalar line {scalar:?} does not match {}", std::any::type_name::<T>())));
        }
        let model_kv = parse_kv(lines.next(), "model")?;
        let experts_kv = parse_kv(lines.next(), "experts")?;
        let get = |kv: &BTreeMap<String, String>, k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ckpt_err(format!("missing or bad key {k}")))
        };
        let config = FusionConfig {
            model: ModelConfig {
                d_seq: get(&model_kv, "d_seq")? as usize,
                d_emb: get(&model_kv, "d_emb")? as usize,
                d_vocab: get(&model_kv, "d_vocab")? as usize,
                n_layers: get(&model_kv, "n_layers")? as usize,
                max_seq: get(&model_kv, "max_seq")? as usize,
                seed: get(&model_kv, "seed")?,
            },
            experts: ExpertConfig {
                d_yolos: get(&experts_kv, "d_yolos")? as usize,
                d_clip: get(&experts_kv, "d_clip")? as usize,
                n_det: get(&experts_kv, "n_det")? as usize,
                prefix_len: get(&experts_kv, "prefix_len")? as usize,
                n_percept_feats: get(&experts_kv, "n_percept_feats")? as usize,
            },
        };
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| ckpt_err("missing params count".into()))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = lines.next().ok_or_else(|| ckpt_err("truncated checkpoint".into()))?;
            let f: Vec<&str> = header.split_whitespace().collect();
            let ["param", name, rows, cols, trainable] = f.as_slice() else {
                return Err(ckpt_err(format!("bad param header {header:?}")));
            };
            let rows: usize = rows.parse().map_err(|_| ckpt_err(format!("bad rows in {header:?}")))?;
            let cols: usize = cols.parse().map_err(|_| ckpt_err(format!("bad cols in {header:?}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next().ok_or_else(|| ckpt_err(format!("truncated values for {name}")))?;
                for tok in line.split_whitespace() {
                    let bits = u64::from_str_radix(tok, 16).map_err(|_| ckpt_err(format!("bad value {tok:?} in {name}")))?;
                    data.push(T::lit(f64::from_bits(bits)));
                }
            }
            let id = store.add(*name, Matrix::from_vec(rows, cols, data)?)?;
            store.get_mut(id).trainable = *trainable == "1";
        }
        if lines.next() != Some("end") {
            return Err(ckpt_err("missing end marker".into()));
        }
        Self::bind(config, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

fn parse_kv(line: Option<&str>, tag: &str) -> Result<BTreeMap<String, String>> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing {tag} line")))?;
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| Error::Checkpoint(format!("expected {tag} line, got {line:?}")))?;
    Ok(rest
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Serialized value lines of every parameter in a checkpoint, keyed by name.
/// Two checkpoints agree on a parameter exactly when these strings match.
pub fn checkpoint_values(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let Some(rest) = line.strip_prefix("param ") else {
            continue;
        };
        let f: Vec<&str> = rest.split_whitespace().collect();
        let rows: usize = f.get(1).and_then(|r| r.parse().ok()).unwrap_or(0);
        let mut body = String::new();
        for _ in 0..rows {
            if let Some(l) = lines.next() {
                body.push_str(l);
                body.push('\n');
            }
        }
        out.insert(f[0].to_string(), body);
    }
    out
}
