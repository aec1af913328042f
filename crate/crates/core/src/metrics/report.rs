use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "# adapterfuse metric report v1";

/// Weighted-sum inputs. `matching` is the Match score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub accuracy: f64,
    pub chatgpt: f64,
    pub matching: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

impl Components {
    pub fn check_ranges(&self) -> Result<()> {
        let check = |name: &'static str, value: f64, hi: f64| {
            if (0.0..=hi).contains(&value) {
                Ok(())
            } else {
                Err(Error::Range { name, value, lo: 0.0, hi })
            }
        };
        check("accuracy", self.accuracy, 1.0)?;
        check("chatgpt", self.chatgpt, 100.0)?;
        check("match", self.matching, 100.0)?;
        for (name, b) in ["bleu_1", "bleu_2", "bleu_3", "bleu_4"].into_iter().zip(self.bleu) {
            check(name, b, 1.0)?;
        }
        check("rouge_l", self.rouge_l, 1.0)?;
        check("cider", self.cider, 10.0)
    }
}

/// `0.4·C/100 + 0.2·M/100 + 0.2·acc + 0.2·((ΣBLEU/4 + ROUGE_L + CIDEr/10)/3)`.
pub fn final_score(c: &Components) -> Result<f64> {
    c.check_ranges()?;
    let language = (c.bleu.iter().sum::<f64>() / 4.0 + c.rouge_l + c.cider / 10.0) / 3.0;
    Ok(0.4 * c.chatgpt / 100.0 + 0.2 * c.matching / 100.0 + 0.2 * c.accuracy + 0.2 * language)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub chatgpt: f64,
    pub matching: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub final_score: f64,
}

const KEYS: [&str; 10] = [
    "accuracy", "chatgpt", "match", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "cider",
    "final_score",
];

impl MetricReport {
    pub fn new(c: Components) -> Result<Self> {
        let final_score = final_score(&c)?;
        Ok(Self {
            accuracy: c.accuracy,
            chatgpt: c.chatgpt,
            matching: c.matching,
            bleu: c.bleu,
            rouge_l: c.rouge_l,
            cider: c.cider,
            final_score,
        })
    }

    pub fn components(&self) -> Components {
        Components {
            accuracy: self.accuracy,
            chatgpt: self.chatgpt,
            matching: self.matching,
            bleu: self.bleu,
            rouge_l: self.rouge_l,
            cider: self.cider,
        }
    }

    fn values(&self) -> [f64; 10] {
        [
            self.accuracy,
            self.chatgpt,
            self.matching,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.cider,
            self.final_score,
        ]
    }

    /// `key=value` lines with shortest round-trip decimals.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for (k, v) in KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k}={v:?}");
        }
        s
    }

    /// Parses [`MetricReport::to_key_values`] output; the stored final score
    /// must agree with the recomputed one to within 1e-9.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut vals = [None; 10];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (k, v) = raw.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key=value, got {raw:?}"),
            })?;
            let slot = KEYS.iter().position(|&key| key == k.trim()).ok_or_else(|| Error::Parse {
                line,
                message: format!("unknown key {k:?}"),
            })?;
            vals[slot] = Some(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("{k}: {e}"),
            })?);
        }
        let mut out = [0.0; 10];
        for (i, v) in vals.iter().enumerate() {
            out[i] = v.ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key {}", KEYS[i]),
            })?;
        }
        let report = Self::new(Components {
            accuracy: out[0],
            chatgpt: out[1],
            matching: out[2],
            bleu: [out[3], out[4], out[5], out[6]],
            rouge_l: out[7],
            cider: out[8],
        })?;
        if (report.final_score - out[9]).abs() > 1e-9 {
            return Err(Error::Evaluation(format!(
                "stored final_score {} disagrees with components ({})",
                out[9], report.final_score
            )));
        }
        Ok(report)
    }
}

/// Fixed-width table in the column order Accuracy, ChatGPT, Match,
/// BLEU_1..4, ROUGE_L, CIDEr, Final_score.
pub fn render_table(rows: &[(&str, MetricReport)]) -> String {
    let headers = [
        "Experiment", "Accuracy", "ChatGPT", "Match", "Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4",
        "ROUGE_l", "CIDEr", "Final_score",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let v = r.values();
            vec![
                name.to_string(),
                format!("{:.2}", v[0]),
                format!("{:.2}", v[1]),
                format!("{:.2}", v[2]),
                format!("{:.3}", v[3]),
                format!("{:.4}", v[4]),
                format!("{:.6}", v[5]),
                format!("{:.6}", v[6]),
                format!("{:.2}", v[7]),
                format!("{:.2}", v[8]),
                format!("{:.4}", v[9]),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    s.push_str(line(headers.to_vec()).trim_end());
    s.push('\n');
    for r in &body {
        s.push_str(line(r.iter().map(String::as_str).collect()).trim_end());
        s.push('\n');
    }
    s
}

/// One row of a component table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRow {
    pub name: String,
    pub components: Components,
    /// Optional `final_score` column carried alongside the components.
    pub reported: Option<f64>,
}

/// Tab-separated component table. The first non-comment line is a header
/// naming the columns `experiment accuracy chatgpt match bleu_1 bleu_2
/// bleu_3 bleu_4 rouge_l cider` (any order), optionally plus `final_score`.
pub fn parse_component_table(text: &str) -> Result<Vec<ComponentRow>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 0,
        message: "empty component table".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter().position(|&c| c.eq_ignore_ascii_case(name)).ok_or_else(|| Error::Parse {
            line: hline,
            message: format!("missing column {name:?}"),
        })
    };
    let name_col = find("experiment")?;
    let idx: Vec<usize> = KEYS[..9].iter().map(|k| find(k)).collect::<Result<_>>()?;
    let reported_col = find("final_score").ok();
    let mut rows = Vec::new();
    for (line, raw) in lines {
        let cells: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", cols.len(), cells.len()),
            });
        }
        let num = |c: usize| {
            cells[c].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("column {:?}: {e}", cols[c]),
            })
        };
        let v: Vec<f64> = idx.iter().map(|&c| num(c)).collect::<Result<_>>()?;
        rows.push(ComponentRow {
            name: cells[name_col].to_string(),
            components: Components {
                accuracy: v[0],
                chatgpt: v[1],
                matching: v[2],
                bleu: [v[3], v[4], v[5], v[6]],
                rouge_l: v[7],
                cider: v[8],
            },
            reported: reported_col.map(num).transpose()?,
        });
    }
    Ok(rows)
}
