//! Accuracy on the cumulative test set and the summary metrics.

use rayon::prelude::*;

use crate::error::{G2gError, Result};
use crate::memory::V2vMetric;

use super::dataset::EmbeddingDataset;
use super::train::EngineState;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub session: usize,
    pub samples: usize,
    pub correct: usize,
    /// Correct under euclidean vector-to-vector retrieval, for comparison.
    pub correct_v2v: usize,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }

    pub fn accuracy_v2v(&self) -> f64 {
        self.correct_v2v as f64 / self.samples as f64
    }
}

/// Top-1 accuracy on `E^(t)`: the test samples of every class introduced in
/// sessions `1..=t`, retrieved against the prototypes of those classes.
pub fn evaluate(state: &EngineState, test: &EmbeddingDataset, t: usize) -> Result<EvalReport> {
    if t == 0 || t > state.completed() {
        return Err(G2gError::Config(format!(
            "cannot evaluate session {t}: {} sessions completed",
            state.completed()
        )));
    }
    let classes = state.classes_through(t);
    let memory = state.memory.subset(|y| classes.contains(&y));
    let samples: Vec<_> = test.records.iter().filter(|r| classes.contains(&r.label)).collect();
    if samples.is_empty() {
        return Err(G2gError::EmptyEvaluation(t));
    }
    let hits: Vec<(bool, bool)> = samples
        .par_iter()
        .map(|r| {
            let f = state.model.feature(&r.base)?;
            let g = memory.retrieve(&f)? == r.label;
            let v = memory.retrieve_v2v(&f.xi, V2vMetric::Euclidean)? == r.label;
            Ok((g, v))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        session: t,
        samples: samples.len(),
        correct: hits.iter().filter(|h| h.0).count(),
        correct_v2v: hits.iter().filter(|h| h.1).count(),
    })
}

/// Per-session accuracies and their summaries. Units follow the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracies: Vec<f64>,
    pub average: f64,
    /// First-session accuracy minus last-session accuracy.
    pub pd: f64,
    /// Wall time per session, when known.
    pub seconds: Vec<f64>,
}

pub fn compute_metrics(accuracies: &[f64]) -> Result<Metrics> {
    let (Some(first), Some(last)) = (accuracies.first(), accuracies.last()) else {
        return Err(G2gError::Config("metrics need at least one session".into()));
    };
    Ok(Metrics {
        accuracies: accuracies.to_vec(),
        average: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        pd: first - last,
        seconds: Vec::new(),
    })
}

impl Metrics {
    pub fn last(&self) -> f64 {
        *self.accuracies.last().expect("non-empty by construction")
    }

    /// Flat `key = value` text. Session keys are 0-based.
    pub fn to_text(&self) -> String {
        let mut o = format!("sessions = {}\n", self.accuracies.len());
        for (i, a) in self.accuracies.iter().enumerate() {
            o.push_str(&format!("acc.{i} = {a:.4}\n"));
        }
        o.push_str(&format!("average = {:.4}\npd = {:.4}\nfinal = {:.4}\n", self.average, self.pd, self.last()));
        if !self.seconds.is_empty() {
            o.push_str(&format!("seconds = {:.3}\n", self.seconds.iter().sum::<f64>()));
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracies_have_zero_drop() {
        let m = compute_metrics(&[70.0, 70.0, 70.0]).unwrap();
        assert_eq!(m.pd, 0.0);
        assert_eq!(m.average, 70.0);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn single_session() {
        let m = compute_metrics(&[42.5]).unwrap();
        assert_eq!((m.pd, m.average, m.last()), (0.0, 42.5, 42.5));
        assert!(m.to_text().contains("acc.0 = 42.5000"));
    }
}
