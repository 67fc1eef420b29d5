use std::collections::BTreeMap;

use serde::Serialize;

use super::{AnnotateError, BackendPrediction, Label, TaskKind};

/// Spread of backend means at which continuous confidence reaches zero.
pub const COHERENCE_SPREAD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    /// Self-agreement of each backend across its runs.
    pub intrinsic: BTreeMap<String, f64>,
    /// Agreement across backends.
    pub extrinsic: f64,
    /// Modal label (categorical) or mean score (continuous) of each backend.
    pub backend_labels: BTreeMap<String, Label>,
    pub consensus_label: Label,
    pub aggregated_confidence: f64,
}

/// Most frequent label and its count; ties go to the lexicographically smallest.
fn mode<'a>(labels: impl IntoIterator<Item = &'a str>) -> Option<(&'a str, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (label, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((label, n));
        }
    }
    best
}

fn categories<'a>(preds: &[&'a BackendPrediction]) -> Result<Vec<&'a str>, AnnotateError> {
    preds
        .iter()
        .map(|p| match &p.label {
            Label::Category(c) => Ok(c.as_str()),
            Label::Score(_) => Err(AnnotateError::Consensus(format!(
                "backend '{}' returned a score for a categorical task",
                p.backend_id
            ))),
        })
        .collect()
}

fn scores(preds: &[&BackendPrediction]) -> Result<Vec<f64>, AnnotateError> {
    preds
        .iter()
        .map(|p| match &p.label {
            Label::Score(s) => Ok(*s),
            Label::Category(_) => Err(AnnotateError::Consensus(format!(
                "backend '{}' returned a category for a continuous task",
                p.backend_id
            ))),
        })
        .collect()
}

fn same_backend(preds: &[&BackendPrediction]) -> Result<(), AnnotateError> {
    match preds.first() {
        None => Err(AnnotateError::Consensus("no predictions".into())),
        Some(first) if preds.iter().any(|p| p.backend_id != first.backend_id) => Err(AnnotateError::Consensus(
            "predictions from more than one backend".into(),
        )),
        Some(_) => Ok(()),
    }
}

/// Fraction of runs agreeing with the modal label; 1.0 for a single run.
pub fn intrinsic_uncertainty(preds: &[&BackendPrediction]) -> Result<f64, AnnotateError> {
    same_backend(preds)?;
    let labels = categories(preds)?;
    let (_, n) = mode(labels.iter().copied()).expect("non-empty");
    Ok(n as f64 / labels.len() as f64)
}

/// Fraction of backends whose modal label equals the overall modal label.
pub fn extrinsic_uncertainty(modal_labels: &[&str]) -> f64 {
    match mode(modal_labels.iter().copied()) {
        Some((_, n)) => n as f64 / modal_labels.len() as f64,
        None => 0.0,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn stdev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn spread_confidence(xs: &[f64]) -> f64 {
    (1.0 - stdev(xs) / COHERENCE_SPREAD).max(0.0)
}

/// Combines every prediction of every backend for one task.
///
/// Predictions are grouped by backend id, so the result does not depend on
/// the order of `preds`.
pub fn consensus(kind: TaskKind, preds: &[BackendPrediction]) -> Result<UncertaintyReport, AnnotateError> {
    if preds.is_empty() {
        return Err(AnnotateError::Consensus("no predictions".into()));
    }
    let mut by_backend: BTreeMap<&str, Vec<&BackendPrediction>> = BTreeMap::new();
    for p in preds {
        by_backend.entry(p.backend_id.as_str()).or_default().push(p);
    }

    let mut intrinsic = BTreeMap::new();
    let mut backend_labels = BTreeMap::new();
    if kind.is_categorical() {
        let mut votes: BTreeMap<&str, f64> = BTreeMap::new();
        let mut modal = Vec::with_capacity(by_backend.len());
        for (id, group) in &by_backend {
            let labels = categories(group)?;
            let (label, n) = mode(labels.iter().copied()).expect("non-empty group");
            let agreement = n as f64 / labels.len() as f64;
            // Sorting first keeps the sum independent of run order.
            let mut confs: Vec<f64> = group.iter().map(|p| p.confidence).collect();
            confs.sort_by(f64::total_cmp);
            *votes.entry(label).or_default() += agreement * mean(&confs);
            intrinsic.insert(id.to_string(), agreement);
            backend_labels.insert(id.to_string(), Label::Category(label.to_string()));
            modal.push(label);
        }
        let mut winner: Option<(&str, f64)> = None;
        for (label, w) in votes {
            if winner.is_none_or(|(_, b)| w > b) {
                winner = Some((label, w));
            }
        }
        let extrinsic = extrinsic_uncertainty(&modal);
        let mean_intrinsic = mean(&intrinsic.values().copied().collect::<Vec<_>>());
        Ok(UncertaintyReport {
            intrinsic,
            extrinsic,
            backend_labels,
            consensus_label: Label::Category(winner.expect("at least one vote").0.to_string()),
            aggregated_confidence: mean_intrinsic * extrinsic,
        })
    } else {
        let mut means = Vec::with_capacity(by_backend.len());
        for (id, group) in &by_backend {
            let mut s = scores(group)?;
            s.sort_by(f64::total_cmp);
            let m = mean(&s);
            intrinsic.insert(id.to_string(), spread_confidence(&s));
            backend_labels.insert(id.to_string(), Label::Score(m));
            means.push(m);
        }
        let extrinsic = spread_confidence(&means);
        Ok(UncertaintyReport {
            intrinsic,
            extrinsic,
            backend_labels,
            consensus_label: Label::Score(median(&means)),
            aggregated_confidence: extrinsic,
        })
    }
}
