use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{rouge_l, AnalysisError};
use crate::prompt::{BUILTIN_NAMES, RCG, ROG};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub query: String,
    pub label: String,
}

/// JSON lines of `{"query": .., "label": ..}`; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<EvalPair>, AnalysisError> {
    let err = |message: String| AnalysisError::Dataset {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: EvalPair = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        if p.query.trim().is_empty() || p.label.trim().is_empty() {
            return Err(err(format!("line {}: query and label must be nonempty", i + 1)));
        }
        pairs.push(p);
    }
    if pairs.is_empty() {
        return Err(err("dataset is empty".into()));
    }
    Ok(pairs)
}

/// One configuration under evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub tag: String,
    pub prompt_set: String,
    /// `None` keeps the configured default.
    pub epw_weight: Option<u8>,
}

impl Approach {
    pub fn named(name: &str) -> Self {
        let tag = if BUILTIN_NAMES.contains(&name) {
            name.to_ascii_uppercase()
        } else {
            name.to_string()
        };
        Approach {
            tag,
            prompt_set: name.to_string(),
            epw_weight: None,
        }
    }

    pub fn epw(weight: u8) -> Self {
        Approach {
            tag: format!("RCG-EPW-{weight}"),
            prompt_set: RCG.to_string(),
            epw_weight: Some(weight),
        }
    }

    /// Retrieval is disabled only for the `rog` set.
    pub fn uses_retrieval(&self) -> bool {
        self.prompt_set != ROG
    }
}

pub fn parse_approaches(list: &str) -> Result<Vec<Approach>, AnalysisError> {
    let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(AnalysisError::Approach("no approaches given".into()));
    }
    Ok(names.into_iter().map(Approach::named).collect())
}

/// `start:end:step`, inclusive, e.g. `10:90:10`.
pub fn parse_sweep(spec: &str) -> Result<Vec<u8>, AnalysisError> {
    let bad = || AnalysisError::Approach(format!("EPW sweep '{spec}' must be start:end:step within 0..=100"));
    let parts: Vec<u32> = spec
        .split(':')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if step == 0 || start > end || end > 100 {
        return Err(bad());
    }
    Ok((start..=end).step_by(step as usize).map(|w| w as u8).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query: String,
    pub label: String,
    pub response: String,
    pub rouge_l: f64,
    pub time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub approach: String,
    pub rows: Vec<EvalRow>,
    pub mean_rouge_l: f64,
    pub mean_time_per_query_s: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Run every pair through `answer` for each approach, sequentially.
///
/// A failed answer scores 0 and keeps its error message; the run continues.
pub fn run_eval(
    dataset: &[EvalPair],
    approaches: &[Approach],
    answer: &mut dyn FnMut(&Approach, &str) -> Result<String, String>,
) -> Vec<EvalReport> {
    approaches
        .iter()
        .map(|approach| {
            let rows: Vec<EvalRow> = dataset
                .iter()
                .map(|pair| {
                    let t = Instant::now();
                    let result = answer(approach, &pair.query);
                    let time_s = t.elapsed().as_secs_f64();
                    let (response, error) = match result {
                        Ok(r) => (r, None),
                        Err(e) => (String::new(), Some(e)),
                    };
                    let score = if error.is_some() {
                        0.0
                    } else {
                        rouge_l(&response, &pair.label).f1
                    };
                    EvalRow {
                        query: pair.query.clone(),
                        label: pair.label.clone(),
                        response,
                        rouge_l: score,
                        time_s,
                        error,
                    }
                })
                .collect();
            EvalReport {
                approach: approach.tag.clone(),
                mean_rouge_l: mean(rows.iter().map(|r| r.rouge_l)),
                mean_time_per_query_s: mean(rows.iter().map(|r| r.time_s)),
                rows,
            }
        })
        .collect()
}

fn time_cell(t: f64, omit_timing: bool) -> String {
    if omit_timing {
        "-".into()
    } else {
        format!("{t:.3}")
    }
}

/// Per-pair rows of one report as an aligned text table.
pub fn format_report(report: &EvalReport, omit_timing: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "== {} ==", report.approach);
    let _ = writeln!(s, "{:>4}  {:>8}  {:>9}  query", "#", "rouge_l", "time_s");
    for (i, r) in report.rows.iter().enumerate() {
        let _ = write!(
            s,
            "{:>4}  {:>8.4}  {:>9}  {}",
            i + 1,
            r.rouge_l,
            time_cell(r.time_s, omit_timing),
            r.query
        );
        if let Some(e) = &r.error {
            let _ = write!(s, "  [error: {e}]");
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "{:>4}  {:>8.4}  {:>9}",
        "mean",
        report.mean_rouge_l,
        time_cell(report.mean_time_per_query_s, omit_timing)
    );
    s
}

/// `Approach | Rouge-L | time/query(s)` summary, one line per report.
pub fn format_summary(reports: &[&EvalReport], omit_timing: bool) -> String {
    let width = reports.iter().map(|r| r.approach.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>8}  {:>13}", "Approach", "Rouge-L", "time/query(s)");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.3}  {:>13}",
            r.approach,
            r.mean_rouge_l,
            if omit_timing {
                "-".to_string()
            } else {
                format!("{:.2}", r.mean_time_per_query_s)
            }
        );
    }
    s
}
