//! Evaluation metrics over (output, ground truth) pairs.

mod judge;
mod matching;
mod overlap;
mod report;
mod text;

use std::path::Path;

use rayon::prelude::*;

pub use judge::{
    judge_prompt, judge_score, parse_rating, token_f1, Judge, RemoteJudge, TokenF1Judge,
    ENV_ENDPOINT, ENV_KEY, ENV_MODEL, JUDGE_INSTRUCTION,
};
pub use matching::{
    extract_points, l1, match_score, pair_match, EmptyTruthPolicy, MatchOptions, Point, PointList,
};
pub use overlap::{
    bleu_n, cider, corpus_bleu_n, lcs_len, rouge_l, rouge_l_tokens, BLEU_EPSILON, ROUGE_BETA,
};
pub use report::{
    final_score, parse_component_table, render_table, ComponentRow, Components, MetricReport,
};
pub use text::tokenize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionPair {
    pub id: String,
    pub output: String,
    pub ground_truth: String,
    pub tag: i64,
}

pub const PREDICTIONS_HEADER: &str = "# adapterfuse predictions v1: id\toutput\tground_truth\ttag";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

/// Tab-separated prediction file text, one record per line after the header.
pub fn predictions_to_text(pairs: &[PredictionPair]) -> String {
    let mut s = String::from(PREDICTIONS_HEADER);
    s.push('\n');
    for p in pairs {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            escape(&p.id),
            escape(&p.output),
            escape(&p.ground_truth),
            p.tag
        ));
    }
    s
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionPair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let tag = fields[3].trim().parse::<i64>().map_err(|e| Error::Parse {
            line,
            message: format!("bad tag {:?}: {e}", fields[3]),
        })?;
        pairs.push(PredictionPair {
            id: unescape(fields[0], line)?,
            output: unescape(fields[1], line)?,
            ground_truth: unescape(fields[2], line)?,
            tag,
        });
    }
    Ok(pairs)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

pub fn save_predictions(path: &Path, pairs: &[PredictionPair]) -> Result<()> {
    std::fs::write(path, predictions_to_text(pairs)).map_err(|e| Error::io(path, e))
}

/// Fraction of pairs whose output equals the ground truth exactly.
pub fn accuracy(pairs: &[PredictionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("accuracy of an empty pair set".into()));
    }
    let hits = pairs.iter().filter(|p| p.output == p.ground_truth).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Corpus BLEU of orders 1..=4, each ground truth the single reference.
pub fn corpus_bleu(pairs: &[PredictionPair]) -> [f64; 4] {
    let toks: Vec<(Vec<String>, Vec<Vec<String>>)> = pairs
        .iter()
        .map(|p| (tokenize(&p.output), vec![tokenize(&p.ground_truth)]))
        .collect();
    [1, 2, 3, 4].map(|n| corpus_bleu_n(&toks, n))
}

/// Mean ROUGE-L over pairs; 0 for an empty set.
pub fn corpus_rouge_l(pairs: &[PredictionPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs.par_iter().map(|p| rouge_l(&p.output, &p.ground_truth)).sum();
    total / pairs.len() as f64
}

/// CIDEr with the ground truths as the IDF corpus.
pub fn corpus_cider(pairs: &[PredictionPair]) -> Result<f64> {
    let outs: Vec<&str> = pairs.iter().map(|p| p.output.as_str()).collect();
    let gts: Vec<&str> = pairs.iter().map(|p| p.ground_truth.as_str()).collect();
    cider(&outs, &gts, &gts)
}

/// Full metric report. Judge requests are issued at most `max_in_flight` at a
/// time.
pub fn evaluate(
    pairs: &[PredictionPair],
    judge: &dyn Judge,
    max_in_flight: usize,
    opts: &MatchOptions,
) -> Result<MetricReport> {
    let components = Components {
        accuracy: accuracy(pairs)?,
        chatgpt: judge_score(pairs, judge, max_in_flight)?,
        matching: match_score(pairs, opts),
        bleu: corpus_bleu(pairs),
        rouge_l: corpus_rouge_l(pairs),
        cider: corpus_cider(pairs)?,
    };
    MetricReport::new(components)
}
