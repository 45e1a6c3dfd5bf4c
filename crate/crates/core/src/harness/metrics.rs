//! Accuracy bookkeeping and the long-form metrics CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// One evaluation pass: predictions and truths over all classes seen so
/// far, with the session each test sample originates from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionEval {
    pub predictions: Vec<usize>,
    pub truths: Vec<usize>,
    pub origins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    /// 1-based session indices this track was evaluated at.
    pub sessions: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    /// `per_origin[k][s - 1]`: accuracy at `sessions[k]` on test samples
    /// from session `s`; `None` where that session had no samples.
    pub per_origin: Vec<Vec<Option<f64>>>,
}

impl TrackMetrics {
    /// Accuracy at the last evaluation on samples from session `origin`.
    pub fn final_origin_accuracy(&self, origin: usize) -> Option<f64> {
        self.per_origin.last()?.get(origin.checked_sub(1)?).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sessions: usize,
    pub slow: TrackMetrics,
    /// Absent for single-session runs and when the fast learner is disabled.
    pub fast: Option<TrackMetrics>,
    pub aggregate: TrackMetrics,
}

/// Summarizes evaluations taken at sessions `first_session, first_session + 1, …`.
pub fn compute_metrics(evals: &[SessionEval], first_session: usize) -> Result<TrackMetrics> {
    contract!(!evals.is_empty(), "no evaluations to summarize");
    contract!(first_session >= 1, "sessions are 1-based");
    let mut accuracy = Vec::with_capacity(evals.len());
    let mut per_origin = Vec::with_capacity(evals.len());
    for (k, e) in evals.iter().enumerate() {
        let t = first_session + k;
        contract!(!e.truths.is_empty(), "session {t} has an empty prediction set");
        contract!(
            e.predictions.len() == e.truths.len() && e.origins.len() == e.truths.len(),
            "session {t}: {} predictions, {} truths, {} origins",
            e.predictions.len(),
            e.truths.len(),
            e.origins.len()
        );
        contract!(e.origins.iter().all(|&o| o >= 1 && o <= t), "session {t} has samples from a later session");
        let hits = e.predictions.iter().zip(&e.truths).filter(|(p, y)| p == y).count();
        accuracy.push(hits as f64 / e.truths.len() as f64);
        let mut hit = vec![0usize; t];
        let mut tot = vec![0usize; t];
        for ((p, y), o) in e.predictions.iter().zip(&e.truths).zip(&e.origins) {
            tot[o - 1] += 1;
            if p == y {
                hit[o - 1] += 1;
            }
        }
        per_origin.push(hit.iter().zip(&tot).map(|(h, n)| (*n > 0).then(|| *h as f64 / *n as f64)).collect());
    }
    let final_accuracy = *accuracy.last().expect("nonempty");
    let average_accuracy = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    Ok(TrackMetrics { sessions: (first_session..first_session + evals.len()).collect(), accuracy, final_accuracy, average_accuracy, per_origin })
}

impl MetricsRecord {
    pub fn tracks(&self) -> Vec<(&'static str, &TrackMetrics)> {
        let mut out = vec![("slow", &self.slow)];
        if let Some(f) = &self.fast {
            out.push(("fast", f));
        }
        out.push(("aggregate", &self.aggregate));
        out
    }

    /// Long-form CSV: `session,track,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,track,metric,value\n");
        for (name, tr) in self.tracks() {
            for (k, &t) in tr.sessions.iter().enumerate() {
                let _ = writeln!(out, "{t},{name},acc,{}", tr.accuracy[k]);
                for (s, v) in tr.per_origin[k].iter().enumerate() {
                    if let Some(v) = v {
                        let _ = writeln!(out, "{t},{name},acc_origin_{},{v}", s + 1);
                    }
                }
            }
            let _ = writeln!(out, "{},{name},acc_final,{}", self.sessions, tr.final_accuracy);
            let _ = writeln!(out, "{},{name},acc_avg,{}", self.sessions, tr.average_accuracy);
        }
        out
    }
}
