//! Coordinate extraction and the Match score.

use serde::{Deserialize, Serialize};

use super::text::pair_regex;
use super::PredictionPair;

pub type Point = (f64, f64);

/// Ordered list of points found in a text.
pub type PointList = Vec<Point>;

/// All bracketed numeric pairs in `text`, in order of appearance.
pub fn extract_points(text: &str) -> PointList {
    pair_regex()
        .captures_iter(text)
        .filter_map(|c| {
            let x = c[1].parse::<f64>().ok()?;
            let y = c[2].parse::<f64>().ok()?;
            (x.is_finite() && y.is_finite()).then_some((x, y))
        })
        .collect()
}

pub fn l1(a: Point, b: Point) -> f64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

/// What to do with a pair whose ground truth contains no points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyTruthPolicy {
    /// Scores 100 when the output has no points either, otherwise the pair is
    /// left out of the mean.
    #[default]
    RewardAgreement,
    /// Always left out of the mean.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    /// A ground-truth point matches when some output point is strictly closer
    /// than this in L1 distance.
    pub threshold: f64,
    pub empty_truth: EmptyTruthPolicy,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            threshold: 16.0,
            empty_truth: EmptyTruthPolicy::default(),
        }
    }
}

/// Per-pair Match score, or `None` when the pair does not contribute.
pub fn pair_match(output: &str, ground_truth: &str, opts: &MatchOptions) -> Option<f64> {
    let truth = extract_points(ground_truth);
    let predicted = extract_points(output);
    if truth.is_empty() {
        return match opts.empty_truth {
            EmptyTruthPolicy::RewardAgreement if predicted.is_empty() => Some(100.0),
            _ => None,
        };
    }
    let hits = truth
        .iter()
        .filter(|&&g| predicted.iter().any(|&o| l1(g, o) < opts.threshold))
        .count();
    Some(100.0 * hits as f64 / truth.len() as f64)
}

/// Mean per-pair Match over contributing pairs, in `[0, 100]`; 0 when no pair
/// contributes.
pub fn match_score(pairs: &[PredictionPair], opts: &MatchOptions) -> f64 {
    let scores: Vec<f64> = pairs
        .iter()
        .filter_map(|p| pair_match(&p.output, &p.ground_truth, opts))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
