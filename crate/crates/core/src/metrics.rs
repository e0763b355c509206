//! Precision, recall, F1 at a fixed threshold, and rank-based ROC AUC.
//!
//! The positive class is illicit (`true`). A ratio with a zero denominator
//! is reported as 0 and flagged rather than NaN.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when computed without scores or with a single class present.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Thresholded confusion counts and the derived ratios; `auc` is left unset.
pub fn classification_metrics(probs: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    if probs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Argument("metrics need at least one prediction".into()));
    }
    let mut r = EvalReport::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => r.tp += 1,
            (true, false) => r.fp += 1,
            (false, false) => r.tn += 1,
            (false, true) => r.fn_ += 1,
        }
    }
    (r.precision, r.precision_undefined) = ratio(r.tp, r.tp + r.fp);
    (r.recall, r.recall_undefined) = ratio(r.tp, r.tp + r.fn_);
    r.f1 = if r.precision + r.recall > 0.0 {
        2.0 * r.precision * r.recall / (r.precision + r.recall)
    } else {
        0.0
    };
    Ok(r)
}

/// Mann-Whitney AUC from average ranks; tied pairs count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("AUC scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group shares its mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Thresholded metrics plus AUC when both classes are present.
pub fn evaluate(probs: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    let mut r = classification_metrics(probs, labels, threshold)?;
    let has_both = labels.iter().any(|&y| y) && labels.iter().any(|&y| !y);
    r.auc = if has_both { Some(auc(probs, labels)?) } else { None };
    Ok(r)
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "precision,recall,f1,auc,tp,fp,tn,fn,precision_undefined,recall_undefined";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.precision,
            self.recall,
            self.f1,
            self.auc.map(|a| a.to_string()).unwrap_or_default(),
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.precision_undefined,
            self.recall_undefined
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}\n{}", Self::CSV_HEADER, self.csv_row()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |u: bool| if u { " (undefined)" } else { "" };
        writeln!(f, "precision  {:.4}{}", self.precision, flag(self.precision_undefined))?;
        writeln!(f, "recall     {:.4}{}", self.recall, flag(self.recall_undefined))?;
        writeln!(f, "f1         {:.4}", self.f1)?;
        match self.auc {
            Some(a) => writeln!(f, "auc        {a:.4}")?,
            None => writeln!(f, "auc        n/a (single class)")?,
        }
        write!(f, "tp {}  fp {}  tn {}  fn {}", self.tp, self.fp, self.tn, self.fn_)
    }
}
