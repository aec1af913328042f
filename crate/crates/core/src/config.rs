//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! dataset = "corpus/dataset.jsonl"   # relative to this file
//! out_dir = "runs/fused"
//! # init_ckpt = "base.ckpt"
//!
//! [model]      # d_seq, d_emb, d_vocab, n_layers, max_seq
//! [experts]    # d_yolos, d_clip, n_det, prefix_len, n_percept_feats
//! [train]      # learning_rate, weight_decay, batch_size, epochs, optimizer, momentum, max_steps
//! [freeze]     # train_perception, clamp_detect_gates, clamp
//! ```
//!
//! The `seed` fields of `[model]` and `[train]` are overwritten by values
//! derived from the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertConfig;
use crate::finetune::{FreezePlan, TrainConfig};
use crate::model::FusionConfig;
use crate::numerics::rng::derive_seed;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeSpec {
    pub train_perception: bool,
    /// Pins every detection gate at zero for the whole run.
    pub clamp_detect_gates: bool,
    /// Extra parameter names kept frozen.
    pub clamp: Vec<String>,
}

impl Default for FreezeSpec {
    fn default() -> Self {
        Self {
            train_perception: true,
            clamp_detect_gates: false,
            clamp: Vec::new(),
        }
    }
}

impl FreezeSpec {
    pub fn plan(&self, n_layers: usize) -> FreezePlan {
        let mut plan = FreezePlan::new(self.train_perception);
        if self.clamp_detect_gates {
            plan = plan.clamp_detect_gates(n_layers);
        }
        plan.clamp.extend(self.clamp.iter().cloned());
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub init_ckpt: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub experts: ExpertConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub freeze: FreezeSpec,
}

impl RunConfig {
    pub fn new(seed: u64, dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            dataset: dataset.into(),
            out_dir: out_dir.into(),
            init_ckpt: None,
            model: ModelConfig::default(),
            experts: ExpertConfig::default(),
            train: TrainConfig::default(),
            freeze: FreezeSpec::default(),
        }
    }

    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut cfg.dataset);
        abs(&mut cfg.out_dir);
        if let Some(p) = cfg.init_ckpt.as_mut() {
            abs(p);
        }
        cfg.reseed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML text; derived seeds are written as 0 since parsing recomputes them.
    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.model.seed = 0;
        c.train.seed = 0;
        toml::to_string(&c).expect("RunConfig serializes")
    }

    /// Fans the top-level seed out to the model and training subsystems.
    pub fn reseed(&mut self) {
        self.model.seed = derive_seed(self.seed, "model");
        self.train.seed = derive_seed(self.seed, "train");
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            model: self.model.clone(),
            experts: self.experts.clone(),
        }
    }

    pub fn freeze_plan(&self) -> FreezePlan {
        self.freeze.plan(self.model.n_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.experts.validate()?;
        self.train.validate()?;
        if !self.dataset.is_file() {
            return Err(Error::Config(format!("dataset {:?} does not exist", self.dataset)));
        }
        if let Some(p) = &self.init_ckpt {
            if !p.is_file() {
                return Err(Error::Config(format!("init_ckpt {p:?} does not exist")));
            }
        }
        Ok(())
    }
}
