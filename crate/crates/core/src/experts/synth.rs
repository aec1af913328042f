//! Deterministic stand-in for the frozen vision experts.
//!
//! Detector token layout (columns beyond `d_yolos` are dropped):
//!
//! | cols    | meaning                                           |
//! |---------|---------------------------------------------------|
//! | 0       | objectness (1 for an object row)                  |
//! | 1       | no-object flag (1 for a null row)                 |
//! | 2..6    | class one-hot                                     |
//! | 6..16   | x coordinate, Gaussian bumps centred 5, 15, .. 95 |
//! | 16..26  | y coordinate, same bumps                          |
//! | 26..    | seeded per-class appearance signature             |
//!
//! A null row is exactly the unit vector on column 1. Perception rows carry a
//! camera one-hot and per-class object counts but no positions, mirroring a
//! global image encoder that knows what is in view but not where.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CameraFeatureSet, ExpertConfig, CAMERAS};
use crate::numerics::rng;
use crate::numerics::{Matrix, Scalar};

const NULL_FLAG: usize = 1;
const CLASS_OFFSET: usize = 2;
const X_OFFSET: usize = 6;
const Y_OFFSET: usize = 16;
const BINS: usize = 10;
pub const DETECT_LAYOUT_DIMS: usize = 26;
const BUMP_WIDTH: f64 = 5.0;
const SIGNATURE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ObjectClass,
    /// 1-based camera index.
    pub camera: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub objects: Vec<SceneObject>,
}

fn bump(v: f64, bin: usize) -> f64 {
    let centre = 5.0 + 10.0 * bin as f64;
    (-(v - centre).powi(2) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
}

fn put<T: Scalar>(row: &mut [T], col: usize, v: f64) {
    if let Some(slot) = row.get_mut(col) {
        *slot = T::lit(v);
    }
}

/// Features for `scene`. Camera `i`'s detector rows depend only on the objects
/// seen by camera `i`; objects beyond `n_det` per camera are not detected.
pub fn synth_encoder<T: Scalar>(seed: u64, scene: &SceneDescriptor, config: &ExpertConfig) -> CameraFeatureSet<T> {
    let signatures: Vec<Vec<f64>> = ObjectClass::ALL
        .iter()
        .map(|c| {
            let mut r = rng::rng(seed, &format!("signature.{}", c.name()));
            (0..config.d_yolos.saturating_sub(DETECT_LAYOUT_DIMS))
                .map(|_| r.gen_range(-SIGNATURE_SCALE..=SIGNATURE_SCALE))
                .collect()
        })
        .collect();

    let mut cameras = Vec::with_capacity(CAMERAS);
    for cam in 1..=CAMERAS {
        let mut m = Matrix::<T>::zeros(config.n_det, config.d_yolos);
        let seen = scene.objects.iter().filter(|o| o.camera == cam);
        let mut used = 0;
        for (slot, obj) in seen.take(config.n_det).enumerate() {
            let row = m.row_mut(slot);
            put(row, 0, 1.0);
            put(row, CLASS_OFFSET + obj.class.index(), 1.0);
            for b in 0..BINS {
                put(row, X_OFFSET + b, bump(obj.x, b));
                put(row, Y_OFFSET + b, bump(obj.y, b));
            }
            for (k, &s) in signatures[obj.class.index()].iter().enumerate() {
                put(row, DETECT_LAYOUT_DIMS + k, s);
            }
            used = slot + 1;
        }
        for slot in used..config.n_det {
            put(m.row_mut(slot), NULL_FLAG, 1.0);
        }
        cameras.push(m);
    }

    let mut perception = Matrix::<T>::zeros(config.n_percept_feats, config.d_clip);
    for r in 0..config.n_percept_feats {
        let mut noise = rng::rng(seed, &format!("background.{r}"));
        let row = perception.row_mut(r);
        for v in row.iter_mut() {
            *v = T::lit(noise.gen_range(-SIGNATURE_SCALE..=SIGNATURE_SCALE));
        }
        if r < CAMERAS {
            put(row, r, 1.0);
            for class in ObjectClass::ALL {
                let count = scene
                    .objects
                    .iter()
                    .filter(|o| o.camera == r + 1 && o.class == class)
                    .count();
                if count > 0 {
                    put(row, CAMERAS + class.index(), count as f64);
                }
            }
        }
    }

    CameraFeatureSet { cameras, perception }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(x: f64) -> SceneDescriptor {
        SceneDescriptor {
            objects: vec![
                SceneObject {
                    class: ObjectClass::Car,
                    camera: 1,
                    x: 20.0,
                    y: 40.0,
                },
                SceneObject {
                    class: ObjectClass::Pedestrian,
                    camera: 3,
                    x,
                    y: 71.0,
                },
            ],
        }
    }

    #[test]
    fn deterministic() {
        let c = ExpertConfig::default();
        assert_eq!(synth_encoder::<f64>(3, &scene(5.0), &c), synth_encoder::<f64>(3, &scene(5.0), &c));
    }

    #[test]
    fn change_in_camera_three_stays_in_camera_three() {
        let c = ExpertConfig::default();
        let a = synth_encoder::<f64>(3, &scene(5.0), &c);
        let b = synth_encoder::<f64>(3, &scene(55.0), &c);
        for cam in 0..CAMERAS {
            assert_eq!(a.cameras[cam] == b.cameras[cam], cam != 2, "camera {}", cam + 1);
        }
        assert_eq!(a.perception, b.perception);
    }

    #[test]
    fn empty_scene_gives_null_rows() {
        let c = ExpertConfig::default();
        let f = synth_encoder::<f64>(1, &SceneDescriptor::default(), &c);
        let mut null = Matrix::<f64>::zeros(1, c.d_yolos);
        null[(0, NULL_FLAG)] = 1.0;
        for cam in &f.cameras {
            for r in 0..cam.rows() {
                assert_eq!(cam.row(r), null.row(0));
            }
        }
        f.validate(&c).unwrap();
    }
}
