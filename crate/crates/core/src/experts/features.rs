//! Per-sample expert feature container and its text file format:
//!
//! ```text
//! ADAPTERFUSE-FEATURES-v1
//! camera 1 <rows> <cols>
//! <row of decimal floats>
//! ...
//! camera 6 <rows> <cols>
//! ...
//! perception <rows> <cols>
//! ...
//! ```
//!
//! Values are written in shortest round-trip decimal form, so save then load
//! reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use super::{ExpertConfig, CAMERAS};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

pub const FEATURES_MAGIC: &str = "ADAPTERFUSE-FEATURES-v1";

/// Frozen expert outputs for one scene: detector tokens per camera plus the
/// perception feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFeatureSet<T> {
    /// Camera `i` (0-based here, 1-based in files and errors): `n_det × d_yolos`.
    pub cameras: Vec<Matrix<T>>,
    /// `F × d_clip`
    pub perception: Matrix<T>,
}

impl<T: Scalar> CameraFeatureSet<T> {
    /// Internal consistency: six cameras of equal shape, nonempty finite data.
    pub fn check_consistent(&self) -> Result<()> {
        if self.cameras.len() != CAMERAS {
            let missing = self.cameras.len() + 1;
            return Err(Error::features(
                Some(missing.min(CAMERAS + 1)),
                format!("expected {CAMERAS} cameras, found {}", self.cameras.len()),
            ));
        }
        let shape = self.cameras[0].shape();
        for (i, cam) in self.cameras.iter().enumerate() {
            if cam.shape() != shape {
                return Err(Error::features(
                    Some(i + 1),
                    format!("shape {:?} differs from camera 1 shape {:?}", cam.shape(), shape),
                ));
            }
            if cam.rows() == 0 || cam.cols() == 0 {
                return Err(Error::features(Some(i + 1), "empty detector tokens"));
            }
            if !cam.is_finite() {
                return Err(Error::features(Some(i + 1), "non-finite value"));
            }
        }
        if self.perception.rows() == 0 {
            return Err(Error::features(None, "empty perception feature matrix"));
        }
        if !self.perception.is_finite() {
            return Err(Error::features(None, "non-finite perception value"));
        }
        Ok(())
    }

    /// Checks shapes against the configured expert dimensions.
    pub fn validate(&self, config: &ExpertConfig) -> Result<()> {
        self.check_consistent()?;
        for (i, cam) in self.cameras.iter().enumerate() {
            if cam.shape() != (config.n_det, config.d_yolos) {
                return Err(Error::features(
                    Some(i + 1),
                    format!(
                        "detector tokens {:?}, expected ({}, {})",
                        cam.shape(),
                        config.n_det,
                        config.d_yolos
                    ),
                ));
            }
        }
        if self.perception.cols() != config.d_clip {
            return Err(Error::features(
                None,
                format!("perception width {} != d_clip {}", self.perception.cols(), config.d_clip),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FEATURES_MAGIC);
        out.push('\n');
        let mut block = |header: String, m: &Matrix<T>| {
            let _ = writeln!(out, "{header} {} {}", m.rows(), m.cols());
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| v.as_f64().to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        };
        for (i, cam) in self.cameras.iter().enumerate() {
            block(format!("camera {}", i + 1), cam);
        }
        block("perception".to_string(), &self.perception);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(l) if l.trim() == FEATURES_MAGIC => {}
            other => {
                return Err(Error::features(
                    None,
                    format!("missing header {FEATURES_MAGIC:?}, found {other:?}"),
                ))
            }
        }
        let mut cameras: Vec<Option<Matrix<T>>> = vec![None; CAMERAS];
        let mut perception = None;
        while let Some(header) = lines.next() {
            let fields: Vec<&str> = header.split_whitespace().collect();
            let (camera, dims) = match fields.as_slice() {
                ["camera", idx, dims @ ..] => {
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| Error::features(None, format!("bad camera index {idx:?}")))?;
                    if !(1..=CAMERAS).contains(&idx) {
                        return Err(Error::features(Some(idx), "camera index out of range"));
                    }
                    (Some(idx), dims)
                }
                ["perception", dims @ ..] => (None, dims),
                _ => return Err(Error::features(None, format!("unexpected line {header:?}"))),
            };
            let [rows, cols] = dims else {
                return Err(Error::features(camera, "header needs <rows> <cols>"));
            };
            let parse_dim = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::features(camera, format!("bad dimension {s:?}")))
            };
            let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::features(camera, format!("missing row {}", r + 1)))?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::features(camera, format!("bad value {tok:?}")))?;
                    if !v.is_finite() {
                        return Err(Error::features(camera, format!("non-finite value {tok}")));
                    }
                    data.push(T::lit(v));
                }
                if data.len() - before != cols {
                    return Err(Error::features(
                        camera,
                        format!("row {} has {} values, expected {cols}", r + 1, data.len() - before),
                    ));
                }
            }
            let m = Matrix::from_vec(rows, cols, data)?;
            match camera {
                Some(idx) => {
                    if cameras[idx - 1].replace(m).is_some() {
                        return Err(Error::features(Some(idx), "duplicate camera"));
                    }
                }
                None => {
                    if perception.replace(m).is_some() {
                        return Err(Error::features(None, "duplicate perception block"));
                    }
                }
            }
        }
        let cameras = cameras
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::features(Some(i + 1), format!("missing camera {}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let perception = perception.ok_or_else(|| Error::features(None, "missing perception block"))?;
        let set = Self { cameras, perception };
        set.check_consistent()?;
        Ok(set)
    }
}

pub fn load_features<T: Scalar>(path: impl AsRef<Path>) -> Result<CameraFeatureSet<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CameraFeatureSet::parse(&text)
}

pub fn save_features<T: Scalar>(path: impl AsRef<Path>, feats: &CameraFeatureSet<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, feats.to_text()).map_err(|e| Error::io(path, e))
}
