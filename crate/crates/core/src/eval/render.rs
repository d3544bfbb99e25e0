use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::corpus::{COLLEGE_CONFIDENTIAL, COMPSENT19};
use crate::label::EvalClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    AlignedText,
    DelimitedTable,
    RecordLines,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aligned-text" | "text" => Ok(ReportFormat::AlignedText),
            "delimited-table" | "csv" => Ok(ReportFormat::DelimitedTable),
            "record-lines" | "jsonl" => Ok(ReportFormat::RecordLines),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDescriptor {
    pub model: String,
    pub prompt: String,
    pub train_mode: String,
}

impl ConfigDescriptor {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>, train_mode: impl Into<String>) -> Self {
        ConfigDescriptor {
            model: model.into(),
            prompt: prompt.into(),
            train_mode: train_mode.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_na: f64,
    pub f1_a_pref: f64,
    pub f1_b_pref: f64,
}

impl Scores {
    fn columns(&self) -> [f64; 5] {
        [
            self.f1_micro,
            self.f1_macro,
            self.f1_na,
            self.f1_a_pref,
            self.f1_b_pref,
        ]
    }
}

impl From<&EvalReport> for Scores {
    fn from(r: &EvalReport) -> Self {
        Scores {
            f1_micro: r.f1_micro,
            f1_macro: r.f1_macro,
            f1_na: r.class_f1(EvalClass::NA),
            f1_a_pref: r.class_f1(EvalClass::APref),
            f1_b_pref: r.class_f1(EvalClass::BPref),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub descriptor: ConfigDescriptor,
    pub scores: Scores,
    /// `None` for static rows that were not produced by a run.
    pub n_unparsable: Option<usize>,
}

impl ReportRow {
    pub fn from_report(descriptor: ConfigDescriptor, report: &EvalReport) -> Self {
        ReportRow {
            descriptor,
            scores: Scores::from(report),
            n_unparsable: Some(report.n_unparsable),
        }
    }
}

/// Best published non-LLM results: MultiSentPref / SimCSE-XGBoost for
/// College Confidential and ED-GAT for Compsent-19.
pub fn baseline_rows(dataset_tag: &str) -> Vec<ReportRow> {
    let scores = match dataset_tag {
        COLLEGE_CONFIDENTIAL => Scores {
            f1_micro: 0.67,
            f1_macro: 0.57,
            f1_na: 0.79,
            f1_a_pref: 0.60,
            f1_b_pref: 0.42,
        },
        COMPSENT19 => Scores {
            f1_micro: 0.8743,
            f1_macro: 0.7578,
            f1_na: 0.9298,
            f1_a_pref: 0.7821,
            f1_b_pref: 0.5872,
        },
        _ => return Vec::new(),
    };
    vec![ReportRow {
        descriptor: ConfigDescriptor::new("Best SotA", "-", "-"),
        scores,
        n_unparsable: None,
    }]
}

/// Column-wise maximum over `rows`, labelled `name`.
pub fn best_of(name: &str, rows: &[ReportRow]) -> Option<ReportRow> {
    let first = rows.first()?;
    let mut best = first.scores;
    for r in &rows[1..] {
        let s = r.scores;
        best.f1_micro = best.f1_micro.max(s.f1_micro);
        best.f1_macro = best.f1_macro.max(s.f1_macro);
        best.f1_na = best.f1_na.max(s.f1_na);
        best.f1_a_pref = best.f1_a_pref.max(s.f1_a_pref);
        best.f1_b_pref = best.f1_b_pref.max(s.f1_b_pref);
    }
    Some(ReportRow {
        descriptor: ConfigDescriptor::new(name, "-", "-"),
        scores: best,
        n_unparsable: None,
    })
}

const HEADERS: [&str; 9] = [
    "Model",
    "Prompt",
    "Train Mode",
    "F1 Micro",
    "F1 Macro",
    "F1[N/A]",
    "F1[A>B]",
    "F1[A<B]",
    "Unparsable",
];
const SCORE_KEYS: [&str; 5] = ["f1_micro", "f1_macro", "f1_na", "f1_a_pref", "f1_b_pref"];

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// For each score column, which rows hold the (rounded) maximum.
fn best_flags(rows: &[ReportRow]) -> Vec<[bool; 5]> {
    let mut max = [f64::NEG_INFINITY; 5];
    for r in rows {
        for (m, v) in max.iter_mut().zip(r.scores.columns()) {
            *m = m.max(round4(v));
        }
    }
    rows.iter()
        .map(|r| {
            let cols = r.scores.columns();
            std::array::from_fn(|i| round4(cols[i]) == max[i])
        })
        .collect()
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let best = best_flags(rows);
    match format {
        ReportFormat::AlignedText => render_text(rows, &best),
        ReportFormat::DelimitedTable => render_csv(rows, &best),
        ReportFormat::RecordLines => render_jsonl(rows, &best),
    }
}

fn unparsable_cell(r: &ReportRow) -> String {
    r.n_unparsable
        .map(|n| n.to_string())
        .unwrap_or_else(|| "-".into())
}

fn render_text(rows: &[ReportRow], best: &[[bool; 5]]) -> String {
    let mut table: Vec<Vec<String>> = vec![HEADERS.iter().map(|h| h.to_string()).collect()];
    for (r, flags) in rows.iter().zip(best) {
        let mut line = vec![
            r.descriptor.model.clone(),
            r.descriptor.prompt.clone(),
            r.descriptor.train_mode.clone(),
        ];
        for (v, is_best) in r.scores.columns().iter().zip(flags) {
            line.push(format!("{:.4}{}", v, if *is_best { "*" } else { "" }));
        }
        line.push(unparsable_cell(r));
        table.push(line);
    }
    let widths: Vec<usize> = (0..HEADERS.len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c < 3 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(rule));
            out.push('\n');
        }
    }
    out
}

fn best_list(flags: &[bool; 5]) -> Vec<&'static str> {
    SCORE_KEYS
        .iter()
        .zip(flags)
        .filter(|(_, b)| **b)
        .map(|(k, _)| *k)
        .collect()
}

fn render_csv(rows: &[ReportRow], best: &[[bool; 5]]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = HEADERS.to_vec();
    header.push("Best");
    w.write_record(&header).expect("in-memory write");
    for (r, flags) in rows.iter().zip(best) {
        let mut rec = vec![
            r.descriptor.model.clone(),
            r.descriptor.prompt.clone(),
            r.descriptor.train_mode.clone(),
        ];
        rec.extend(r.scores.columns().iter().map(|v| format!("{v:.4}")));
        rec.push(r.n_unparsable.map(|n| n.to_string()).unwrap_or_default());
        rec.push(best_list(flags).join(";"));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn render_jsonl(rows: &[ReportRow], best: &[[bool; 5]]) -> String {
    let mut out = String::new();
    for (r, flags) in rows.iter().zip(best) {
        let s = r.scores;
        let line = serde_json::json!({
            "model": r.descriptor.model,
            "prompt": r.descriptor.prompt,
            "train_mode": r.descriptor.train_mode,
            "f1_micro": round4(s.f1_micro),
            "f1_macro": round4(s.f1_macro),
            "f1_na": round4(s.f1_na),
            "f1_a_pref": round4(s.f1_a_pref),
            "f1_b_pref": round4(s.f1_b_pref),
            "n_unparsable": r.n_unparsable,
            "best": best_list(flags),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
