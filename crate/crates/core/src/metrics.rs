//! Evaluation metrics and the report type written by the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::protein::TaskKind;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} targets",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let (mp, mt) = (mean(pred), mean(truth));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let (dx, dy) = (p - mp, t - mt);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("correlation of a constant vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Step-wise area under the precision-recall curve. Items are taken in
/// descending score order; all items sharing a score form one step.
pub fn aucpr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "aucpr" });
    }
    let positives = labels.iter().filter(|l| **l != 0).count();
    if positives == 0 {
        return Err(Error::DegenerateInput(
            "AUCPR needs at least one positive label",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut area = 0.0;
    let (mut tp, mut seen, mut prev_recall) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < order.len() {
        let score = scores[order[k]];
        while k < order.len() && scores[order[k]] == score {
            tp += usize::from(labels[order[k]] != 0);
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Named metric values for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub n_examples: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, n_examples: usize) -> Self {
        MetricReport {
            task: task.into(),
            n_examples,
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// One `name=value` line per entry, starting with `task` and `n`.
    pub fn to_text(&self) -> String {
        let mut out = format!("task={}\nn={}\n", self.task, self.n_examples);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Raw predictions gathered over a split.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub scalar: Vec<f64>,
    pub scalar_truth: Vec<f64>,
    pub classes: Vec<usize>,
    pub class_truth: Vec<usize>,
    pub residue_scores: Vec<f64>,
    pub residue_truth: Vec<u8>,
}

/// Task-appropriate metrics for `p`: RMSE/MSE/Pearson/Spearman, accuracy, or
/// AUCPR. Correlations that are undefined on the split are omitted.
pub fn report_for(
    task: &str,
    kind: TaskKind,
    n_examples: usize,
    loss: f64,
    p: &Predictions,
) -> Result<MetricReport> {
    if n_examples == 0 {
        return Err(Error::DegenerateInput("empty evaluation split"));
    }
    let mut r = MetricReport::new(task, n_examples);
    r.insert("loss", loss);
    match kind {
        TaskKind::Regression => {
            r.insert("mse", mse(&p.scalar, &p.scalar_truth)?);
            r.insert("rmse", rmse(&p.scalar, &p.scalar_truth)?);
            if let Ok(v) = pearson(&p.scalar, &p.scalar_truth) {
                r.insert("pearson", v);
            }
            if let Ok(v) = spearman(&p.scalar, &p.scalar_truth) {
                r.insert("spearman", v);
            }
        }
        TaskKind::Classification => r.insert("accuracy", accuracy(&p.classes, &p.class_truth)?),
        TaskKind::PerResidue => {
            if let Ok(v) = aucpr(&p.residue_scores, &p.residue_truth) {
                r.insert("aucpr", v);
            }
            let hits = p
                .residue_scores
                .iter()
                .zip(&p.residue_truth)
                .filter(|(s, t)| u8::from(**s > 0.0) == **t)
                .count();
            r.insert(
                "residue_accuracy",
                hits as f64 / p.residue_truth.len().max(1) as f64,
            );
        }
    }
    Ok(r)
}
