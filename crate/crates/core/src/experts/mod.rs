//! Expert query generation.
//!
//! The detection path prefixes each camera's detector tokens with a trainable
//! ID-separator row, concatenates the six cameras, runs a bidirectional
//! adaptation encoder and projects to `d_emb`. The perception path prepends
//! learnable query rows to the image features and reads the query positions
//! back out after its own encoder.

mod features;
mod synth;

pub use features::{load_features, save_features, CameraFeatureSet, FEATURES_MAGIC};
pub use synth::{synth_encoder, ObjectClass, SceneDescriptor, SceneObject, DETECT_LAYOUT_DIMS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ExpertQuery, Modality};
use crate::numerics::rng;
use crate::numerics::{Matrix, NodeId, ParamId, ParamStore, Scalar, Tape};

pub const CAMERAS: usize = 6;
pub const DETECT_PREFIX: &str = "detect.";
pub const PERCEPT_PREFIX: &str = "percept.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub d_yolos: usize,
    pub d_clip: usize,
    /// Detector tokens per camera.
    pub n_det: usize,
    /// Learnable perception query rows.
    pub prefix_len: usize,
    /// Perception feature rows per sample.
    pub n_percept_feats: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d_yolos: 32,
            d_clip: 48,
            n_det: 8,
            prefix_len: 4,
            n_percept_feats: 10,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_yolos == 0
            || self.d_clip == 0
            || self.n_det == 0
            || self.prefix_len == 0
            || self.n_percept_feats == 0
        {
            return Err(Error::Config("expert dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Rows of the detector query: one separator plus `n_det` tokens per camera.
    pub fn detect_rows(&self) -> usize {
        CAMERAS + CAMERAS * self.n_det
    }
}

/// Single-head bidirectional self-attention block with a residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub width: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl EncoderBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, r: &mut rng::SeededRng) -> Result<Self> {
        let mut w = |f: &str, r: &mut rng::SeededRng| {
            store.add(format!("{prefix}enc.{f}"), rng::fan_in_init(r, width, width))
        };
        Ok(Self {
            width,
            wq: w("wq", r)?,
            wk: w("wk", r)?,
            wv: w("wv", r)?,
            wo: w("wo", r)?,
        })
    }

    fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        let id = |f: &str| store.id(&format!("{prefix}enc.{f}"));
        Ok(Self {
            width,
            wq: id("wq")?,
            wk: id("wk")?,
            wv: id("wv")?,
            wo: id("wo")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let wo = tape.param(self.wo);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scores = tape.matmul_t(q, k)?;
        let attn = tape.attention_normalize(scores, self.width, false);
        let mixed = tape.matmul(attn, v)?;
        let out = tape.matmul(mixed, wo)?;
        tape.add(x, out)
    }
}

#[derive(Debug, Clone)]
pub struct DetectionPath {
    pub config: ExpertConfig,
    pub d_emb: usize,
    pub separators: [ParamId; CAMERAS],
    pub encoder: EncoderBlock,
    /// d_yolos × d_emb
    pub projection: ParamId,
}

fn separator_name(camera: usize) -> String {
    format!("{DETECT_PREFIX}sep{}", camera + 1)
}

impl DetectionPath {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ExpertConfig, d_emb: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, "detect");
        let mut separators = Vec::with_capacity(CAMERAS);
        for c in 0..CAMERAS {
            separators.push(store.add(separator_name(c), rng::unit_rows(&mut r, 1, config.d_yolos))?);
        }
        let encoder = EncoderBlock::new(store, DETECT_PREFIX, config.d_yolos, &mut r)?;
        let projection = store.add(
            format!("{DETECT_PREFIX}proj"),
            rng::fan_in_init(&mut r, config.d_yolos, d_emb),
        )?;
        Ok(Self {
            config: config.clone(),
            d_emb,
            separators: separators.try_into().expect("six separators"),
            encoder,
            projection,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: &ExpertConfig, d_emb: usize) -> Result<Self> {
        let separators = (0..CAMERAS)
            .map(|c| store.id(&separator_name(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            d_emb,
            separators: separators.try_into().expect("six separators"),
            encoder: EncoderBlock::bind(store, DETECT_PREFIX, config.d_yolos)?,
            projection: store.id(&format!("{DETECT_PREFIX}proj"))?,
        })
    }

    /// `∥_{i=1..6} [sep_i ∥ tokens_i]`, the `M × d_yolos` encoder input.
    pub fn encoder_input_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, feats: &CameraFeatureSet<T>) -> Result<NodeId> {
        feats.validate(&self.config)?;
        let mut parts = Vec::with_capacity(2 * CAMERAS);
        for (c, tokens) in feats.cameras.iter().enumerate() {
            parts.push(tape.param(self.separators[c]));
            parts.push(tape.input(tokens.clone()));
        }
        tape.concat_rows(&parts)
    }

    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, feats: &CameraFeatureSet<T>) -> Result<NodeId> {
        let input = self.encoder_input_on(tape, feats)?;
        let encoded = self.encoder.forward_on(tape, input)?;
        let proj = tape.param(self.projection);
        tape.matmul(encoded, proj)
    }
}

#[derive(Debug, Clone)]
pub struct PerceptionPath {
    pub config: ExpertConfig,
    pub d_emb: usize,
    /// prefix_len × d_clip
    pub prefix: ParamId,
    pub encoder: EncoderBlock,
    /// d_clip × d_emb
    pub projection: ParamId,
}

impl PerceptionPath {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ExpertConfig, d_emb: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, "percept");
        let prefix = store.add(
            format!("{PERCEPT_PREFIX}prefix"),
            rng::unit_rows(&mut r, config.prefix_len, config.d_clip),
        )?;
        let encoder = EncoderBlock::new(store, PERCEPT_PREFIX, config.d_clip, &mut r)?;
        let projection = store.add(
            format!("{PERCEPT_PREFIX}proj"),
            rng::fan_in_init(&mut r, config.d_clip, d_emb),
        )?;
        Ok(Self {
            config: config.clone(),
            d_emb,
            prefix,
            encoder,
            projection,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: &ExpertConfig, d_emb: usize) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            d_emb,
            prefix: store.id(&format!("{PERCEPT_PREFIX}prefix"))?,
            encoder: EncoderBlock::bind(store, PERCEPT_PREFIX, config.d_clip)?,
            projection: store.id(&format!("{PERCEPT_PREFIX}proj"))?,
        })
    }

    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, feats: &CameraFeatureSet<T>) -> Result<NodeId> {
        let f = &feats.perception;
        if f.rows() == 0 {
            return Err(Error::features(None, "empty perception feature matrix"));
        }
        if f.cols() != self.config.d_clip {
            return Err(Error::features(
                None,
                format!("perception width {} != d_clip {}", f.cols(), self.config.d_clip),
            ));
        }
        let prefix = tape.param(self.prefix);
        let image = tape.input(f.clone());
        let joined = tape.concat_rows(&[prefix, image])?;
        let encoded = self.encoder.forward_on(tape, joined)?;
        let queries = tape.slice_rows(encoded, 0, self.config.prefix_len)?;
        let proj = tape.param(self.projection);
        tape.matmul(queries, proj)
    }
}

pub fn build_detect_query<T: Scalar>(
    store: &ParamStore<T>,
    path: &DetectionPath,
    feats: &CameraFeatureSet<T>,
) -> Result<ExpertQuery<T>> {
    let mut tape = Tape::new(store);
    let out = path.forward_on(&mut tape, feats)?;
    ExpertQuery::new(Modality::Detect, tape.value(out).clone())
}

pub fn build_percept_query<T: Scalar>(
    store: &ParamStore<T>,
    path: &PerceptionPath,
    feats: &CameraFeatureSet<T>,
) -> Result<ExpertQuery<T>> {
    let mut tape = Tape::new(store);
    let out = path.forward_on(&mut tape, feats)?;
    ExpertQuery::new(Modality::Percept, tape.value(out).clone())
}

/// The detection encoder input without running the encoder (for inspection).
pub fn detect_encoder_input<T: Scalar>(
    store: &ParamStore<T>,
    path: &DetectionPath,
    feats: &CameraFeatureSet<T>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new(store);
    let out = path.encoder_input_on(&mut tape, feats)?;
    Ok(tape.value(out).clone())
}
