//! Benchmark diagnostics from three-pass correctness logs, instance-density
//! averages, and stage compression tables.
//!
//! With `S_V` the instances answered correctly with vision, `S_-V` without
//! vision, `S_T` by the text-only base model, and `F_V` the failures with
//! vision:
//!
//! ```text
//! MG  = (|S_V| - |S_-V|) / N
//! ML  = max(0, (|S_-V| - |S_T|) / N)
//! VNR = |S_V \ S_-V| / |S_V|        (0 when S_V is empty)
//! VIF = |F_V ∩ S_-V| / |F_V|        (0 when F_V is empty)
//! ```
//!
//! All metrics are kept as exact rationals, so `MG·N = VNR·|S_V| - VIF·|F_V|`
//! holds without rounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::corpus::{round_one_decimal, CorpusError};
use crate::error::{Error, Result};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub correct_with_vision: bool,
    pub correct_without_vision: bool,
    pub correct_text_base: bool,
    /// Subtask or scenario tag for per-group breakdowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl EvalRecord {
    pub fn new(
        id: impl Into<String>,
        with_vision: bool,
        without_vision: bool,
        text_base: bool,
    ) -> Self {
        EvalRecord {
            instance_id: id.into(),
            correct_with_vision: with_vision,
            correct_without_vision: without_vision,
            correct_text_base: text_base,
            group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorrectnessSets {
    pub all: BTreeSet<String>,
    pub s_v: BTreeSet<String>,
    pub s_nov: BTreeSet<String>,
    pub s_t: BTreeSet<String>,
    pub f_v: BTreeSet<String>,
}

pub fn correctness_sets(records: &[EvalRecord]) -> Result<CorrectnessSets> {
    let mut sets = CorrectnessSets::default();
    for r in records {
        if !sets.all.insert(r.instance_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate instance id `{}`",
                r.instance_id
            )));
        }
        if r.correct_with_vision {
            sets.s_v.insert(r.instance_id.clone());
        } else {
            sets.f_v.insert(r.instance_id.clone());
        }
        if r.correct_without_vision {
            sets.s_nov.insert(r.instance_id.clone());
        }
        if r.correct_text_base {
            sets.s_t.insert(r.instance_id.clone());
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub n: usize,
    pub s_v: usize,
    pub s_nov: usize,
    pub s_t: usize,
    pub f_v: usize,
    pub acc_v: Rational,
    pub acc_nov: Rational,
    pub acc_t: Rational,
    pub mg: Rational,
    pub ml: Rational,
    pub vnr: Rational,
    pub vif: Rational,
    pub per_group: BTreeMap<String, DiagnosticReport>,
}

fn ratio(num: usize, den: usize) -> Rational {
    if den == 0 {
        Rational::from_integer(0)
    } else {
        Rational::new(num as i64, den as i64)
    }
}

fn to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Float view of a report row, for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n: usize,
    pub acc_v: f64,
    pub acc_nov: f64,
    pub acc_t: f64,
    pub vnr: f64,
    pub vif: f64,
    pub mg: f64,
    pub ml: f64,
}

impl DiagnosticReport {
    pub fn row(&self) -> MetricRow {
        MetricRow {
            n: self.n,
            acc_v: to_f64(self.acc_v),
            acc_nov: to_f64(self.acc_nov),
            acc_t: to_f64(self.acc_t),
            vnr: to_f64(self.vnr),
            vif: to_f64(self.vif),
            mg: to_f64(self.mg),
            ml: to_f64(self.ml),
        }
    }

    /// `MG·N == VNR·|S_V| - VIF·|F_V|`, checked exactly.
    pub fn identity_holds(&self) -> bool {
        self.mg * Rational::from_integer(self.n as i64)
            == self.vnr * Rational::from_integer(self.s_v as i64)
                - self.vif * Rational::from_integer(self.f_v as i64)
    }

    pub fn render(&self) -> String {
        let mut rows = vec![("all".to_string(), self.row())];
        rows.extend(self.per_group.iter().map(|(g, r)| (g.clone(), r.row())));
        let width = rows.iter().map(|(g, _)| g.len()).max().unwrap_or(3).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}",
            "group", "N", "VNR", "VIF", "MG", "ML", "Acc_V", "Acc_-V", "Acc_T"
        );
        for (g, r) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
                g, r.n, r.vnr, r.vif, r.mg, r.ml, r.acc_v, r.acc_nov, r.acc_t
            );
        }
        out.push_str("VNR is 0 when no instance is solved with vision; VIF is 0 when none fails with vision.\n");
        out
    }
}

fn report_from_sets(sets: &CorrectnessSets) -> DiagnosticReport {
    let n = sets.all.len();
    let (s_v, s_nov, s_t, f_v) = (
        sets.s_v.len(),
        sets.s_nov.len(),
        sets.s_t.len(),
        sets.f_v.len(),
    );
    let needs_vision = sets.s_v.difference(&sets.s_nov).count();
    let induced = sets.f_v.intersection(&sets.s_nov).count();
    let ml = Rational::new(s_nov as i64 - s_t as i64, n as i64);
    DiagnosticReport {
        n,
        s_v,
        s_nov,
        s_t,
        f_v,
        acc_v: ratio(s_v, n),
        acc_nov: ratio(s_nov, n),
        acc_t: ratio(s_t, n),
        mg: Rational::new(s_v as i64 - s_nov as i64, n as i64),
        ml: ml.max(Rational::from_integer(0)),
        vnr: ratio(needs_vision, s_v),
        vif: ratio(induced, f_v),
        per_group: BTreeMap::new(),
    }
}

pub fn compute_report(records: &[EvalRecord]) -> Result<DiagnosticReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "diagnostics need at least one record".into(),
        ));
    }
    let mut report = report_from_sets(&correctness_sets(records)?);
    let mut groups: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(g) = &r.group {
            groups.entry(g).or_default().push(r.clone());
        }
    }
    for (g, recs) in groups {
        report
            .per_group
            .insert(g.to_string(), report_from_sets(&correctness_sets(&recs)?));
    }
    Ok(report)
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                field: None,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Mean object instances per image.
pub fn ins_per_img(counts: &[u64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("instance counts are empty".into()));
    }
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    Ok(total as f64 / counts.len() as f64)
}

pub fn render_one_decimal(x: f64) -> String {
    format!("{:.1}", round_one_decimal(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub stage: String,
    pub count: f64,
    /// `raw / count`, rounded half-up to one decimal.
    pub ratio: f64,
}

pub fn compression_report(stages: &[(String, f64)], raw: f64) -> Result<Vec<CompressionRow>> {
    if !(raw.is_finite() && raw > 0.0) {
        return Err(Error::InvalidInput(format!(
            "raw count must be positive, got {raw}"
        )));
    }
    stages
        .iter()
        .map(|(stage, count)| {
            if !(count.is_finite() && *count > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "stage `{stage}` has count {count}; ratios need a positive count"
                )));
            }
            Ok(CompressionRow {
                stage: stage.clone(),
                count: *count,
                ratio: round_one_decimal(raw / count),
            })
        })
        .collect()
}

pub fn render_compression(rows: &[CompressionRow], raw: f64) -> String {
    let width = rows.iter().map(|r| r.stage.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>14}  {:>6}\n", "stage", "count", "ratio");
    let _ = writeln!(out, "{:<width$}  {:>14}  {:>6}", "raw", raw, "1.0");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>6.1}",
            r.stage, r.count, r.ratio
        );
    }
    out
}
