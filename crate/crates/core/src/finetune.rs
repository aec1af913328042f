//! Answer-masked next-token training with staged parameter freezing.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{CameraFeatureSet, DETECT_PREFIX, PERCEPT_PREFIX};
use crate::fusion::{gate_name, Modality, ADAPTER_PREFIX};
use crate::model::FusionModel;
use crate::numerics::rng;
use crate::numerics::{Matrix, NodeId, ParamGrads, ParamId, ParamStore, Scalar, Tape};
use crate::transformer::{LM_BIAS_PREFIX, LM_PREFIX};
use crate::vocab::Vocabulary;

/// Update rule. Both variants apply decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam with β₁ = `momentum`, β₂ = 0.999, ε = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Optional hard cap on optimizer steps within a stage.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub stage: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            batch_size: 2,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            max_steps: None,
            seed: 0,
            stage: 1,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters used for the full-scale fine-tuning runs.
    pub fn reference() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.stage > 2 {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        Ok(())
    }
}

/// Trainable parameter-name prefixes per stage.
///
/// Stage 0 pretrains the base language model on its own. Stage 1 trains the
/// detection projection, ID separators, adapters and (optionally) the
/// perception adaptation; stage 2 trains only decoder bias vectors. Names in
/// `clamp` stay frozen regardless of stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePlan {
    pub stage0: Vec<String>,
    pub stage1: Vec<String>,
    pub stage2: Vec<String>,
    pub clamp: Vec<String>,
}

impl Default for FreezePlan {
    fn default() -> Self {
        Self::new(true)
    }
}

impl FreezePlan {
    pub fn new(train_perception: bool) -> Self {
        let mut stage1 = vec![DETECT_PREFIX.to_string(), ADAPTER_PREFIX.to_string()];
        if train_perception {
            stage1.push(PERCEPT_PREFIX.to_string());
        }
        Self {
            stage0: vec![LM_PREFIX.to_string()],
            stage1,
            stage2: vec![LM_BIAS_PREFIX.to_string()],
            clamp: Vec::new(),
        }
    }

    /// Keeps every detection gate pinned at its initial zero.
    pub fn clamp_detect_gates(mut self, n_layers: usize) -> Self {
        for l in 0..n_layers {
            self.clamp.push(gate_name(l, Modality::Detect));
        }
        self
    }

    pub fn prefixes(&self, stage: u8) -> &[String] {
        match stage {
            0 => &self.stage0,
            1 => &self.stage1,
            _ => &self.stage2,
        }
    }

    pub fn is_trainable(&self, stage: u8, name: &str) -> bool {
        self.prefixes(stage).iter().any(|p| name.starts_with(p.as_str()))
            && !self.clamp.iter().any(|c| c == name)
    }

    /// Sets the trainable flags of `store` for `stage`. Every prefix and clamp
    /// entry must name at least one parameter.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>, stage: u8) -> Result<()> {
        for pre in self.prefixes(stage) {
            if !store.iter().any(|(_, p)| p.name.starts_with(pre.as_str())) {
                return Err(Error::Config(format!("freeze prefix {pre:?} matches no parameter")));
            }
        }
        for c in &self.clamp {
            store.id(c)?;
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let trainable = self.is_trainable(stage, &store.get(id).name);
            store.get_mut(id).trainable = trainable;
        }
        Ok(())
    }
}

/// One training example with its expert features already loaded.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub question: String,
    pub answer: String,
    pub feats: CameraFeatureSet<T>,
}

/// Input ids and per-position targets: `[bos] question answer [eos]`, shifted
/// by one, with targets only where the next token belongs to the answer.
pub fn answer_tokens(question: &str, answer: &str) -> (Vec<u32>, Vec<Option<usize>>) {
    let vocab = Vocabulary::byte_level();
    let mut seq = vec![Vocabulary::BOS];
    seq.extend(vocab.encode(question));
    let answer_start = seq.len();
    seq.extend(vocab.encode(answer));
    seq.push(Vocabulary::EOS);
    let input = seq[..seq.len() - 1].to_vec();
    let targets = (0..input.len())
        .map(|i| (i + 1 >= answer_start).then(|| seq[i + 1] as usize))
        .collect();
    (input, targets)
}

/// Mean answer-token cross-entropy through the fused model.
pub fn answer_loss_on<T: Scalar>(
    model: &FusionModel<T>,
    tape: &mut Tape<'_, T>,
    question: &str,
    answer: &str,
    feats: &CameraFeatureSet<T>,
) -> Result<NodeId> {
    let (input, targets) = answer_tokens(question, answer);
    let z = model.forward_on(tape, &input, feats)?;
    let logits = model.lm.logits_on(tape, z)?;
    tape.cross_entropy(logits, &targets)
}

/// Same loss through the language model alone, without expert paths.
pub fn base_answer_loss_on<T: Scalar>(
    model: &FusionModel<T>,
    tape: &mut Tape<'_, T>,
    question: &str,
    answer: &str,
) -> Result<NodeId> {
    let (input, targets) = answer_tokens(question, answer);
    let z = model.lm.forward_on(tape, &input)?;
    let logits = model.lm.logits_on(tape, z)?;
    tape.cross_entropy(logits, &targets)
}

pub fn answer_loss<T: Scalar>(model: &FusionModel<T>, sample: &TrainSample<T>) -> Result<T> {
    let mut tape = Tape::new(&model.store);
    let loss = answer_loss_on(model, &mut tape, &sample.question, &sample.answer, &sample.feats)?;
    Ok(tape.scalar(loss))
}

pub fn base_answer_loss<T: Scalar>(model: &FusionModel<T>, sample: &TrainSample<T>) -> Result<T> {
    let mut tape = Tape::new(&model.store);
    let loss = base_answer_loss_on(model, &mut tape, &sample.question, &sample.answer)?;
    Ok(tape.scalar(loss))
}

/// Stateful optimizer over the trainable parameters of a store.
///
/// SGD: `v ← μ·v + grad`, `p ← p − lr·(v + wd·p)`; with μ = 0 this is
/// exactly `p ← p − lr·(grad + wd·p)`.
/// Adam: bias-corrected moments with β₁ = μ, then
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
#[derive(Debug, Clone, Default)]
pub struct Optimizer<T> {
    first: HashMap<ParamId, Matrix<T>>,
    second: HashMap<ParamId, Matrix<T>>,
    steps: i32,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new() -> Self {
        Self {
            first: HashMap::new(),
            second: HashMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, config: &TrainConfig) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::Divergence(p.name.clone()));
            }
        }
        self.steps += 1;
        let lr = T::lit(config.learning_rate);
        let wd = T::lit(config.weight_decay);
        let mu = T::lit(config.momentum);
        let b2 = T::lit(ADAM_BETA2);
        let eps = T::lit(ADAM_EPS);
        let c1 = T::one() - mu.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (r, c) = p.grad.shape();
            let direction = match config.optimizer {
                OptimizerKind::Sgd if config.momentum == 0.0 => p.grad.clone(),
                OptimizerKind::Sgd => {
                    let v = self.first.entry(id).or_insert_with(|| Matrix::zeros(r, c));
                    for (vi, &g) in v.data_mut().iter_mut().zip(p.grad.data()) {
                        *vi = mu * *vi + g;
                    }
                    v.clone()
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(id).or_insert_with(|| Matrix::zeros(r, c));
                    let v = self.second.entry(id).or_insert_with(|| Matrix::zeros(r, c));
                    let mut d = Matrix::zeros(r, c);
                    let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
                    for ((di, (mi, vi)), &g) in d.data_mut().iter_mut().zip(moments).zip(p.grad.data()) {
                        *mi = mu * *mi + (T::one() - mu) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        *di = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                    d
                }
            };
            for (w, &d) in p.value.data_mut().iter_mut().zip(direction.data()) {
                *w -= lr * (d + wd * *w);
            }
        }
        Ok(())
    }
}

/// `p ← p − lr·(grad + wd·p)` on trainable parameters only.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, config: &TrainConfig) -> Result<()> {
    let plain = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        momentum: 0.0,
        ..config.clone()
    };
    Optimizer::new().step(store, &plain)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Checkpoint text after the last step.
    pub checkpoint: String,
}

impl TrainingLog {
    /// `step,stage,loss` lines.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.step, e.stage, e.loss);
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

fn sample_grads<T: Scalar>(model: &FusionModel<T>, sample: &TrainSample<T>, stage: u8) -> Result<(T, ParamGrads<T>)> {
    let mut tape = Tape::new(&model.store);
    let loss = if stage == 0 {
        base_answer_loss_on(model, &mut tape, &sample.question, &sample.answer)?
    } else {
        answer_loss_on(model, &mut tape, &sample.question, &sample.answer, &sample.feats)?
    };
    let value = tape.scalar(loss);
    Ok((value, tape.backward(loss)?))
}

/// Trains one stage over `dataset` in seeded shuffled batches.
pub fn run_stage<T: Scalar>(
    model: &mut FusionModel<T>,
    dataset: &[TrainSample<T>],
    config: &TrainConfig,
    plan: &FreezePlan,
) -> Result<TrainingLog> {
    run_stage_with(model, dataset, config, plan, |_| {})
}

/// [`run_stage`] with a callback after every optimizer step.
pub fn run_stage_with<T: Scalar>(
    model: &mut FusionModel<T>,
    dataset: &[TrainSample<T>],
    config: &TrainConfig,
    plan: &FreezePlan,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainingLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    plan.apply(&mut model.store, config.stage)?;
    let mut opt = Optimizer::new();
    let mut entries = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut r = rng::rng(config.seed, &format!("shuffle.stage{}.epoch{epoch}", config.stage));
        order.shuffle(&mut r);
        for batch in order.chunks(config.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            model.store.zero_grads();
            let results: Vec<Result<(T, ParamGrads<T>)>> = batch
                .par_iter()
                .map(|&i| sample_grads(model, &dataset[i], config.stage))
                .collect();
            let scale = T::one() / T::lit(batch.len() as f64);
            let mut total = T::zero();
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                model.store.accumulate(&grads, scale)?;
            }
            opt.step(&mut model.store, config)?;
            let entry = LogEntry {
                step,
                stage: config.stage,
                loss: (total * scale).as_f64(),
            };
            on_step(&entry);
            entries.push(entry);
            step += 1;
        }
    }
    Ok(TrainingLog {
        entries,
        checkpoint: model.to_checkpoint(),
    })
}
