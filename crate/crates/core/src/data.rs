//! JSON-lines QA datasets and the synthetic coordinate corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{load_features, save_features, synth_encoder, ExpertConfig, ObjectClass, SceneDescriptor, SceneObject, CAMERAS};
use crate::finetune::TrainSample;
use crate::numerics::rng;
use crate::numerics::Scalar;

pub const DATASET_HEADER: &str = "# adapterfuse dataset v1";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub tag: i64,
    /// Feature file path relative to the dataset file's directory.
    pub feature_ref: PathBuf,
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Records in file order. Blank lines and `#` comments are skipped; line
/// numbers in errors are 1-based physical lines.
pub fn load_dataset(path: &Path) -> Result<Vec<QAPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let qa: QAPair = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if qa.question.is_empty() || qa.answer.is_empty() {
            return Err(Error::Parse {
                line,
                message: "question and answer must be nonempty".into(),
            });
        }
        if !base.join(&qa.feature_ref).is_file() {
            return Err(Error::Reference {
                line,
                path: qa.feature_ref,
            });
        }
        out.push(qa);
    }
    Ok(out)
}

pub fn dataset_to_text(pairs: &[QAPair]) -> String {
    let mut s = format!("{DATASET_HEADER}\n");
    for qa in pairs {
        let _ = writeln!(s, "{}", serde_json::to_string(qa).expect("QAPair serializes"));
    }
    s
}

pub fn save_dataset(path: &Path, pairs: &[QAPair]) -> Result<()> {
    fs::write(path, dataset_to_text(pairs)).map_err(|e| Error::io(path, e))
}

/// Loads every record's features, resolving references against the dataset
/// file's directory.
pub fn load_samples<T: Scalar>(path: &Path, pairs: &[QAPair]) -> Result<Vec<TrainSample<T>>> {
    let base = base_dir(path);
    pairs
        .iter()
        .map(|qa| {
            Ok(TrainSample {
                question: qa.question.clone(),
                answer: qa.answer.clone(),
                feats: load_features(base.join(&qa.feature_ref))?,
            })
        })
        .collect()
}

/// Integer coordinates are drawn from `coord_min..=coord_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub objects_per_scene: usize,
    pub coord_min: u32,
    pub coord_max: u32,
    pub experts: ExpertConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            objects_per_scene: 1,
            coord_min: 10,
            coord_max: 89,
            experts: ExpertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<QAPair>,
    pub scenes: Vec<SceneDescriptor>,
    pub dataset_path: PathBuf,
}

pub fn coordinate_question(class: ObjectClass) -> String {
    format!("where is the {}?", class.name())
}

pub fn coordinate_answer(x: f64, y: f64) -> String {
    format!("<{x:.1},{y:.1}>")
}

fn synth_scene(r: &mut rng::SeededRng, opts: &SynthOptions) -> SceneDescriptor {
    let mut classes = ObjectClass::ALL.to_vec();
    classes.shuffle(r);
    let objects = classes
        .into_iter()
        .take(opts.objects_per_scene)
        .map(|class| SceneObject {
            class,
            camera: r.gen_range(1..=CAMERAS),
            x: f64::from(r.gen_range(opts.coord_min..=opts.coord_max)),
            y: f64::from(r.gen_range(opts.coord_min..=opts.coord_max)),
        })
        .collect();
    SceneDescriptor { objects }
}

/// Writes `dataset.jsonl`, `scenes.jsonl` and `features/NNNN.feat` under
/// `dir`. Each record asks for the position of one object in its scene; the
/// same seed always produces byte-identical files.
pub fn synth_corpus(seed: u64, size: usize, dir: &Path, opts: &SynthOptions) -> Result<SynthCorpus> {
    if size == 0 {
        return Err(Error::Config("corpus size must be >= 1".into()));
    }
    if !(1..=ObjectClass::ALL.len()).contains(&opts.objects_per_scene) {
        return Err(Error::Config(format!(
            "objects_per_scene must be in 1..={}",
            ObjectClass::ALL.len()
        )));
    }
    if opts.coord_min > opts.coord_max {
        return Err(Error::Config("coord_min > coord_max".into()));
    }
    opts.experts.validate()?;
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut pairs = Vec::with_capacity(size);
    let mut scenes = Vec::with_capacity(size);
    let mut scene_text = String::new();
    for i in 0..size {
        let mut r = rng::rng(seed, &format!("corpus.scene{i}"));
        let scene = synth_scene(&mut r, opts);
        let target = &scene.objects[r.gen_range(0..scene.objects.len())];
        let feats = synth_encoder::<f64>(seed, &scene, &opts.experts);
        let id = format!("{i:04}");
        let feature_ref = PathBuf::from(FEATURES_DIR).join(format!("{id}.feat"));
        save_features(dir.join(&feature_ref), &feats)?;
        pairs.push(QAPair {
            id,
            question: coordinate_question(target.class),
            answer: coordinate_answer(target.x, target.y),
            tag: 0,
            feature_ref,
        });
        let _ = writeln!(scene_text, "{}", serde_json::to_string(&scene).expect("scene serializes"));
        scenes.push(scene);
    }
    let dataset_path = dir.join(DATASET_FILE);
    save_dataset(&dataset_path, &pairs)?;
    let scenes_path = dir.join(SCENES_FILE);
    fs::write(&scenes_path, scene_text).map_err(|e| Error::io(&scenes_path, e))?;
    Ok(SynthCorpus {
        pairs,
        scenes,
        dataset_path,
    })
}
