//! Pluggable answer rating on a 0–100 scale.
//!
//! [`TokenF1Judge`] is deterministic and used everywhere in tests.
//! [`RemoteJudge`] talks to an OpenAI-compatible chat-completions endpoint:
//!
//! ```text
//! POST $ADAPTERFUSE_JUDGE_ENDPOINT
//! Authorization: Bearer $ADAPTERFUSE_JUDGE_KEY
//! {"model": $ADAPTERFUSE_JUDGE_MODEL, "temperature": 0,
//!  "messages": [{"role": "user", "content": <prompt>}]}
//! ```
//!
//! The reply's `choices[0].message.content` must contain an integer in
//! `0..=100`; the first such integer is the rating.

use std::collections::HashMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::text::tokenize;
use super::PredictionPair;
use crate::error::{Error, Result};

pub trait Judge: Sync {
    /// Rating of `output` against `ground_truth`, in `[0, 100]`.
    fn rate(&self, ground_truth: &str, output: &str) -> Result<f64>;
}

/// Token-level F1 between two texts (multiset overlap). Two empty texts agree
/// perfectly.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in &ta {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / ta.len() as f64;
    let r = common as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

/// Deterministic judge: `round(100 × token F1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1Judge;

impl Judge for TokenF1Judge {
    fn rate(&self, ground_truth: &str, output: &str) -> Result<f64> {
        Ok((100.0 * token_f1(output, ground_truth)).round())
    }
}

pub const JUDGE_INSTRUCTION: &str = "rate the following answer based on the correct answer";

pub fn judge_prompt(ground_truth: &str, output: &str) -> String {
    format!(
        "{JUDGE_INSTRUCTION}. Reply with a single integer score from 0 to 100.\n\
         Correct answer: {ground_truth}\nAnswer: {output}"
    )
}

/// First integer in `0..=100` appearing in `reply`.
pub fn parse_rating(reply: &str) -> Result<f64> {
    let mut digits = String::new();
    let mut candidates = Vec::new();
    for c in reply.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            candidates.push(std::mem::take(&mut digits));
        }
    }
    candidates
        .iter()
        .filter_map(|d| d.parse::<u32>().ok())
        .find(|&v| v <= 100)
        .map(f64::from)
        .ok_or_else(|| Error::JudgeReply(reply.to_string()))
}

#[derive(Debug, Clone)]
pub struct RemoteJudge {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    pub max_retries: usize,
    pub timeout: Duration,
    /// Upper bound on concurrent requests issued by [`judge_score`].
    pub max_in_flight: usize,
}

pub const ENV_ENDPOINT: &str = "ADAPTERFUSE_JUDGE_ENDPOINT";
pub const ENV_KEY: &str = "ADAPTERFUSE_JUDGE_KEY";
pub const ENV_MODEL: &str = "ADAPTERFUSE_JUDGE_MODEL";

impl RemoteJudge {
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::Config(format!("{k} is not set")));
        Ok(Self {
            endpoint: var(ENV_ENDPOINT)?,
            api_key: var(ENV_KEY)?,
            model: var(ENV_MODEL)?,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
        })
    }

    pub fn request_body(&self, ground_truth: &str, output: &str) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": judge_prompt(ground_truth, output)}],
        })
    }

    pub fn reply_text(body: &Value) -> Result<&str> {
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::JudgeReply(body.to_string()))
    }

    fn post(&self, body: &Value) -> std::result::Result<Value, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| e.to_string())?;
        let resp = client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.json::<Value>().map_err(|e| e.to_string())
    }
}

impl Judge for RemoteJudge {
    fn rate(&self, ground_truth: &str, output: &str) -> Result<f64> {
        let body = self.request_body(ground_truth, output);
        let mut last = String::new();
        for _ in 0..=self.max_retries {
            match self.post(&body) {
                Ok(reply) => return parse_rating(Self::reply_text(&reply)?),
                Err(e) => last = e,
            }
        }
        Err(Error::Judge {
            index: 0,
            message: last,
        })
    }
}

/// Mean judge rating over `pairs`, issuing at most `max_in_flight` ratings at
/// a time. Errors carry the index of the failing pair.
pub fn judge_score(pairs: &[PredictionPair], judge: &dyn Judge, max_in_flight: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no prediction pairs".into()));
    }
    let width = max_in_flight.max(1);
    let mut total = 0.0;
    for (chunk_idx, chunk) in pairs.chunks(width).enumerate() {
        let ratings: Vec<Result<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|p| s.spawn(move || judge.rate(&p.ground_truth, &p.output)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Evaluation("judge thread panicked".into()))))
                .collect()
        });
        for (k, r) in ratings.into_iter().enumerate() {
            let index = chunk_idx * width + k;
            let v = r.map_err(|e| match e {
                Error::Judge { message, .. } => Error::Judge { index, message },
                other => other,
            })?;
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Judge {
                    index,
                    message: format!("rating {v} outside [0, 100]"),
                });
            }
            total += v;
        }
    }
    Ok(total / pairs.len() as f64)
}
