//! Run-level orchestration: staged training with on-disk checkpoints,
//! greedy generation over a dataset and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{load_dataset, load_samples, QAPair};
use crate::error::{Error, Result};
use crate::finetune::{run_stage, TrainSample, TrainingLog};
use crate::metrics::{evaluate, Judge, MatchOptions, MetricReport, PredictionPair};
use crate::model::FusionModel;

/// Upper bound on generated answer length, in tokens.
pub const MAX_ANSWER_TOKENS: usize = 32;

pub fn stage_checkpoint(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

pub fn stage_log(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.log"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSource {
    PreviousStage(PathBuf),
    Checkpoint(PathBuf),
    Fresh,
}

/// Starting point for `stage`: the previous stage's checkpoint in `out_dir`,
/// else `init_ckpt`, else a freshly initialised model.
pub fn initial_model(cfg: &RunConfig, stage: u8) -> Result<(FusionModel<f64>, InitSource)> {
    if stage > 0 {
        let prev = stage_checkpoint(&cfg.out_dir, stage - 1);
        if prev.is_file() {
            return Ok((FusionModel::load(&prev)?, InitSource::PreviousStage(prev)));
        }
    }
    if let Some(p) = &cfg.init_ckpt {
        return Ok((FusionModel::load(p)?, InitSource::Checkpoint(p.clone())));
    }
    Ok((FusionModel::new(cfg.fusion_config())?, InitSource::Fresh))
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub init: InitSource,
    pub log: TrainingLog,
    pub checkpoint_path: PathBuf,
}

/// Trains `stage` and writes `stage{N}.ckpt` and `stage{N}.log` to `out_dir`.
pub fn train_stage(cfg: &RunConfig, stage: u8) -> Result<StageOutcome> {
    cfg.validate()?;
    let pairs = load_dataset(&cfg.dataset)?;
    let samples = load_samples::<f64>(&cfg.dataset, &pairs)?;
    let (mut model, init) = initial_model(cfg, stage)?;
    let mut train = cfg.train.clone();
    train.stage = stage;
    let log = run_stage(&mut model, &samples, &train, &cfg.freeze_plan())?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let checkpoint_path = stage_checkpoint(&cfg.out_dir, stage);
    fs::write(&checkpoint_path, &log.checkpoint).map_err(|e| Error::io(&checkpoint_path, e))?;
    let log_path = stage_log(&cfg.out_dir, stage);
    fs::write(&log_path, format!("step,stage,loss\n{}", log.to_lines())).map_err(|e| Error::io(&log_path, e))?;
    Ok(StageOutcome {
        init,
        log,
        checkpoint_path,
    })
}

/// Greedy answers for every record, in dataset order.
pub fn predict(model: &FusionModel<f64>, pairs: &[QAPair], samples: &[TrainSample<f64>]) -> Result<Vec<PredictionPair>> {
    pairs
        .par_iter()
        .zip(samples)
        .map(|(qa, s)| {
            Ok(PredictionPair {
                id: qa.id.clone(),
                output: model.answer(&qa.question, &s.feats, MAX_ANSWER_TOKENS)?,
                ground_truth: qa.answer.clone(),
                tag: qa.tag,
            })
        })
        .collect()
}

pub fn generate_predictions(ckpt: &Path, dataset: &Path) -> Result<Vec<PredictionPair>> {
    let model = FusionModel::<f64>::load(ckpt)?;
    let pairs = load_dataset(dataset)?;
    let samples = load_samples(dataset, &pairs)?;
    predict(&model, &pairs, &samples)
}

/// Evaluates `pairs`, issuing judge requests up to four at a time.
pub fn evaluate_predictions(pairs: &[PredictionPair], judge: &dyn Judge) -> Result<MetricReport> {
    evaluate(pairs, judge, 4, &MatchOptions::default())
}
