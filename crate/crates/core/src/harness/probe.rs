//! Node-to-class-centre distances of the learned `ξ` segments.

use std::collections::BTreeMap;

use crate::error::{G2gError, Result};
use crate::gnn::Variant;

use super::dataset::EmbeddingDataset;
use super::train::EngineState;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub variant: Variant,
    /// `None` for classes with fewer than two samples.
    pub per_class: Vec<(u32, Option<f64>)>,
}

impl ProbeRow {
    /// Mean over the classes that have a value.
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().filter_map(|c| c.1).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// One row per variant: `variant,class_<y>...,mean`, `n/a` where undefined.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let mut o = String::from("variant");
        if let Some(r) = self.rows.first() {
            for (y, _) in &r.per_class {
                o.push_str(&format!(",class_{y}"));
            }
        }
        o.push_str(",mean\n");
        for r in &self.rows {
            o.push_str(r.variant.name());
            for (_, d) in &r.per_class {
                o.push(',');
                o.push_str(&fmt(*d));
            }
            o.push(',');
            o.push_str(&fmt(r.mean()));
            o.push('\n');
        }
        o
    }
}

/// For each class: pool the `S` segments of every member's `ξ` as nodes,
/// take their mean as the class centre, and report the mean euclidean
/// distance of the nodes to it.
pub fn center_distances(samples: &[(u32, Vec<f64>)], segments: usize) -> Result<Vec<(u32, Option<f64>)>> {
    let mut by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for (y, xi) in samples {
        if segments == 0 || xi.len() % segments != 0 {
            return Err(G2gError::shape(
                "probe_centers",
                format!("xi of length {} into {segments} segments", xi.len()),
            ));
        }
        by_class.entry(*y).or_default().extend(xi.chunks(xi.len() / segments));
    }
    Ok(by_class
        .into_iter()
        .map(|(y, nodes)| {
            if nodes.len() < 2 * segments {
                return (y, None);
            }
            let w = nodes[0].len();
            let mut c = vec![0.0; w];
            for n in &nodes {
                c.iter_mut().zip(*n).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|v| *v /= nodes.len() as f64);
            let total: f64 = nodes
                .iter()
                .map(|n| n.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum();
            (y, Some(total / nodes.len() as f64))
        })
        .collect())
}

/// One row per trained state, over the samples of `data` whose class the
/// state has seen.
pub fn probe_centers(states: &[&EngineState], data: &EmbeddingDataset) -> Result<ProbeTable> {
    let mut rows = Vec::with_capacity(states.len());
    for st in states {
        let seen = st.classes_through(st.completed());
        let recs: Vec<_> = data.records.iter().filter(|r| seen.contains(&r.label)).collect();
        let hs: Vec<_> = recs.iter().map(|r| &r.base).collect();
        let feats = st.model.features(&hs)?;
        let samples: Vec<(u32, Vec<f64>)> = recs.iter().zip(feats).map(|(r, f)| (r.label, f.xi)).collect();
        rows.push(ProbeRow {
            variant: st.config.variant,
            per_class: center_distances(&samples, st.config.segments)?,
        });
    }
    Ok(ProbeTable { rows })
}
