//! Accuracy, macro-F1, aggregation across runs, and report files.
//!
//! Precision, recall and F1 are 0 wherever their denominator is 0. Macro-F1
//! averages over the full declared label set, so classes that never occur and
//! are never predicted still count (as 0). Multichoice tasks report accuracy
//! only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::inference::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub method: String,
    pub model_id: String,
    pub k: usize,
    pub polarity: String,
    pub seed: u64,
    /// Absent for multichoice tasks.
    pub macro_f1: Option<f64>,
    pub accuracy: f64,
    pub n_test: usize,
    #[serde(default)]
    pub per_class: BTreeMap<String, ClassScores>,
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone)]
pub struct RunInfo<'a> {
    pub method: &'a str,
    pub model_id: &'a str,
    pub k: usize,
    pub polarity: &'a str,
    pub seed: u64,
}

impl EvaluationReport {
    pub fn from_records(
        task: &TaskSpec,
        info: RunInfo<'_>,
        records: &[PredictionRecord],
    ) -> Result<Self> {
        let acc = accuracy(records)?;
        let (macro_f1, per_class) = match task.kind {
            TaskKind::Classification => {
                let per = per_class_scores(records, &task.label_set)?;
                (Some(mean_f1(&per)), per.into_iter().collect())
            }
            TaskKind::Multichoice => (None, BTreeMap::new()),
        };
        Ok(EvaluationReport {
            task: task.name.clone(),
            method: info.method.to_string(),
            model_id: info.model_id.to_string(),
            k: info.k,
            polarity: info.polarity.to_string(),
            seed: info.seed,
            macro_f1,
            accuracy: acc,
            n_test: records.len(),
            per_class,
        })
    }

    pub fn field(&self, name: &str) -> Option<String> {
        Some(match name {
            "task" => self.task.clone(),
            "method" => self.method.clone(),
            "model_id" => self.model_id.clone(),
            "k" => self.k.to_string(),
            "polarity" => self.polarity.clone(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }
}

fn gold(r: &PredictionRecord) -> Result<&Label> {
    r.gold
        .as_ref()
        .ok_or_else(|| Error::MissingLabel(format!("record {:?} has no gold label", r.test_id)))
}

/// Fraction of records whose prediction equals the gold label.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no records to score".into()));
    }
    let mut correct = 0usize;
    for r in records {
        if *gold(r)? == r.predicted {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Per-class precision/recall/F1 in label-set order.
pub fn per_class_scores(
    records: &[PredictionRecord],
    label_set: &[String],
) -> Result<Vec<(String, ClassScores)>> {
    if records.is_empty() {
        return Err(Error::Empty("no records to score".into()));
    }
    let position = |l: &Label| -> Result<usize> {
        l.as_class()
            .and_then(|c| label_set.iter().position(|x| x == c))
            .ok_or_else(|| Error::OutOfRange(format!("label {l} outside the label set")))
    };
    let n = label_set.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for r in records {
        let g = position(gold(r)?)?;
        let p = position(&r.predicted)?;
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..n)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (
                label_set[c].clone(),
                ClassScores {
                    precision,
                    recall,
                    f1,
                },
            )
        })
        .collect())
}

fn mean_f1(per: &[(String, ClassScores)]) -> f64 {
    per.iter().map(|(_, s)| s.f1).sum::<f64>() / per.len() as f64
}

/// Unweighted mean of per-class F1 over `label_set`.
pub fn macro_f1(records: &[PredictionRecord], label_set: &[String]) -> Result<f64> {
    Ok(mean_f1(&per_class_scores(records, label_set)?))
}

pub const GROUP_FIELDS: [&str; 6] = ["task", "method", "model_id", "k", "polarity", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group_by: Vec<String>,
    pub key: Vec<String>,
    pub macro_f1: Option<f64>,
    pub accuracy: f64,
    pub n_reports: usize,
}

impl AggregateRow {
    pub fn label(&self) -> String {
        self.key.join("/")
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::MacroF1 => self.macro_f1,
            Metric::Accuracy => Some(self.accuracy),
        }
    }

    pub fn get(&self, field: &str) -> Option<&str> {
        self.group_by
            .iter()
            .position(|f| f == field)
            .map(|i| self.key[i].as_str())
    }
}

/// Unweighted means of both metrics per group, rows sorted by group key.
///
/// Reports without a macro-F1 (multichoice) are left out of that mean; a
/// group with none at all has no macro-F1.
pub fn aggregate(reports: &[EvaluationReport], group_by: &[&str]) -> Result<Vec<AggregateRow>> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate".into()));
    }
    if let Some(f) = group_by.iter().find(|f| !GROUP_FIELDS.contains(f)) {
        return Err(Error::Config(format!("cannot group by {f:?}")));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&EvaluationReport>> = BTreeMap::new();
    for r in reports {
        let key = group_by
            .iter()
            .map(|f| r.field(f).expect("field validated"))
            .collect();
        groups.entry(key).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(key, rs)| {
            let f1s: Vec<f64> = rs.iter().filter_map(|r| r.macro_f1).collect();
            AggregateRow {
                group_by: group_by.iter().map(|s| s.to_string()).collect(),
                key,
                macro_f1: (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64),
                accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / rs.len() as f64,
                n_reports: rs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    Accuracy,
}

impl Metric {
    pub fn other(self) -> Metric {
        match self {
            Metric::MacroF1 => Metric::Accuracy,
            Metric::Accuracy => Metric::MacroF1,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro_f1" | "f1" => Ok(Metric::MacroF1),
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::MacroF1 => "macro_f1",
            Metric::Accuracy => "accuracy",
        })
    }
}

/// Row labels sorted by `metric`, best first; ties by label. Rows without the
/// metric go last.
pub fn rank_methods(rows: &[AggregateRow], metric: Metric) -> Result<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        if !seen.insert(r.label()) {
            return Err(Error::Config(format!(
                "duplicate method row {:?}",
                r.label()
            )));
        }
    }
    let mut scored: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r.label(), r.metric(metric).unwrap_or(f64::NEG_INFINITY)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(l, _)| l).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub by_macro_f1: Vec<String>,
    pub by_accuracy: Vec<String>,
    pub disagree: bool,
}

/// Ranks under both metrics and flags whether the orders differ.
pub fn rank_both(rows: &[AggregateRow]) -> Result<Ranking> {
    let by_macro_f1 = rank_methods(rows, Metric::MacroF1)?;
    let by_accuracy = rank_methods(rows, Metric::Accuracy)?;
    let disagree = rows.iter().all(|r| r.macro_f1.is_some()) && by_macro_f1 != by_accuracy;
    Ok(Ranking {
        by_macro_f1,
        by_accuracy,
        disagree,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

pub const CSV_HEADER: [&str; 9] = [
    "task", "method", "model_id", "k", "polarity", "seed", "macro_f1", "accuracy", "n_test",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: String,
    pub macro_f1: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: String,
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_field: String,
    pub series: Vec<PlotSeries>,
}

/// One series per method (with polarity suffix for `least`), one point per
/// model id, averaging over tasks and seeds.
pub fn plot_data(reports: &[EvaluationReport]) -> Result<PlotData> {
    let rows = aggregate(reports, &["method", "polarity", "model_id"])?;
    let mut series: BTreeMap<String, Vec<PlotPoint>> = BTreeMap::new();
    for r in rows {
        let name = match r.key[1].as_str() {
            "most" => r.key[0].clone(),
            p => format!("{}-{p}", r.key[0]),
        };
        series.entry(name).or_default().push(PlotPoint {
            x: r.key[2].clone(),
            macro_f1: r.macro_f1,
            accuracy: r.accuracy,
        });
    }
    Ok(PlotData {
        x_field: "model_id".into(),
        series: series
            .into_iter()
            .map(|(method, points)| PlotSeries { method, points })
            .collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn reports_to_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.task.clone(),
            r.method.clone(),
            r.model_id.clone(),
            r.k.to_string(),
            r.polarity.clone(),
            r.seed.to_string(),
            fmt_opt(r.macro_f1),
            r.accuracy.to_string(),
            r.n_test.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    if let Some(first) = rows.first() {
        let mut header = first.group_by.clone();
        header.extend(["macro_f1", "accuracy", "n_reports"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
    }
    for r in rows {
        let mut rec = r.key.clone();
        rec.extend([
            fmt_opt(r.macro_f1),
            r.accuracy.to_string(),
            r.n_reports.to_string(),
        ]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

/// Serializes reports in the requested format.
pub fn render_report(reports: &[EvaluationReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to emit".into()));
    }
    match format {
        ReportFormat::Json => {
            Ok(serde_json::to_string_pretty(reports).expect("reports serialize") + "\n")
        }
        ReportFormat::Csv => reports_to_csv(reports),
        ReportFormat::Plotdata => Ok(serde_json::to_string_pretty(&plot_data(reports)?)
            .expect("plot data serializes")
            + "\n"),
    }
}

/// Writes `contents` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn emit_report(path: &Path, reports: &[EvaluationReport], format: ReportFormat) -> Result<()> {
    write_atomic(path, render_report(reports, format)?.as_bytes())
}
