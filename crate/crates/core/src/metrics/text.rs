use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

/// Bracketed numeric pair: `[x,y]`, `<x,y>`, `(x,y)` or `⟨x,y⟩`. Numbers may
/// carry a sign, a fractional part, or a bare trailing dot (`1.`).
pub(crate) fn pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)";
        Regex::new(&format!(r"[\[<(⟨]\s*({num})\s*,\s*({num})\s*[\]>)⟩]")).expect("valid regex")
    })
}

/// Lowercases, keeps numeric pairs as single tokens, replaces other
/// punctuation with spaces (a `.` between two digits survives) and splits on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut last = 0;
    for m in pair_regex().find_iter(&lower) {
        split_plain(&lower[last..m.start()], &mut tokens);
        tokens.push(m.as_str().chars().filter(|c| !c.is_whitespace()).collect());
        last = m.end();
    }
    split_plain(&lower[last..], &mut tokens);
    tokens
}

fn split_plain(segment: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = segment.chars().collect();
    let mut cleaned = String::with_capacity(segment.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || c.is_whitespace()
            || (c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()));
        cleaned.push(if keep { c } else { ' ' });
    }
    out.extend(cleaned.split_whitespace().map(str::to_string));
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}
