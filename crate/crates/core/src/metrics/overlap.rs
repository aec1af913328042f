//! N-gram overlap scores: per-order BLEU, ROUGE-L and CIDEr.

use std::collections::{HashMap, HashSet};

use super::text::{ngrams, tokenize};
use crate::error::{Error, Result};

/// Precision used for an order with no candidate n-grams at all.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

/// Corpus BLEU for a single n-gram order: clipped n-gram precision pooled over
/// all pairs, times the corpus brevity penalty. Each candidate is clipped
/// against the per-n-gram maximum over its references; the reference length is
/// the one closest to the candidate length (shorter wins ties).
pub fn corpus_bleu_n(pairs: &[(Vec<String>, Vec<Vec<String>>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let (mut clipped, mut total) = (0usize, 0usize);
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in pairs {
        let counts = ngrams(cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in &counts {
            clipped += (*c).min(max_ref.get(g).copied().unwrap_or(0));
        }
        total += cand.len().saturating_sub(n - 1);
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
    }
    if cand_len == 0 {
        return 0.0;
    }
    let precision = if total == 0 {
        BLEU_EPSILON
    } else {
        clipped as f64 / total as f64
    };
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * precision
}

/// Per-order BLEU of one candidate against its references.
pub fn bleu_n(candidate: &str, references: &[&str], n: usize) -> f64 {
    let pair = (
        tokenize(candidate),
        references.iter().map(|r| tokenize(r)).collect(),
    );
    corpus_bleu_n(&[pair], n)
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    ((1.0 + b2) * p * r) / (r + b2 * p)
}

/// LCS-based F-measure with β = 1.2.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

fn tfidf(tokens: &[String], n: usize, df: &HashMap<Vec<String>, usize>, docs: f64) -> HashMap<Vec<String>, f64> {
    ngrams(tokens, n)
        .into_iter()
        .map(|(g, tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.to_vec(), tf as f64 * (docs / d).ln())
        })
        .collect()
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// CIDEr over orders 1..=4: TF-IDF n-gram vectors with document frequencies
/// from `corpus`, cosine similarity per pair, `10 × mean_n mean_pairs`.
pub fn cider(candidates: &[&str], references: &[&str], corpus: &[&str]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Evaluation("CIDEr needs a nonempty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Evaluation(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(d)).collect();
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let n_docs = docs.len() as f64;
    let mut per_order = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for d in &docs {
            let unique: HashSet<&[String]> = ngrams(d, n).into_keys().collect();
            for g in unique {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        let mean: f64 = cands
            .iter()
            .zip(&refs)
            .map(|(c, r)| cosine(&tfidf(c, n, &df, n_docs), &tfidf(r, n, &df, n_docs)))
            .sum::<f64>()
            / cands.len() as f64;
        per_order += mean;
    }
    Ok(10.0 * per_order / 4.0)
}
