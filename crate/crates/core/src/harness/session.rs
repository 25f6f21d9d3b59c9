//! Session plans and the one-exemplar-per-class rehearsal buffer.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{G2gError, Result};
use crate::matrix::Matrix;

use super::config::Config;
use super::dataset::EmbeddingDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Base,
    Incremental,
}

/// One training stage. `index` starts at 1 for the base session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSpec {
    pub index: usize,
    pub classes: Vec<u32>,
    /// Training samples per class; `None` takes every sample.
    pub shots: Option<usize>,
    pub epochs: usize,
    pub role: Role,
}

impl SessionSpec {
    /// Training record indices in file order, at most `shots` per class.
    pub fn sample_indices(&self, data: &EmbeddingDataset) -> Vec<usize> {
        let mut taken: BTreeMap<u32, usize> = self.classes.iter().map(|&c| (c, 0)).collect();
        let mut out = Vec::new();
        for (i, r) in data.records.iter().enumerate() {
            if let Some(n) = taken.get_mut(&r.label) {
                if self.shots.is_none_or(|k| *n < k) {
                    *n += 1;
                    out.push(i);
                }
            }
        }
        out
    }
}

/// Splits the ascending class list of `train` into a base session of
/// `base_classes` and `sessions` incremental sessions of `ways` classes.
pub fn plan_sessions(cfg: &Config, train: &EmbeddingDataset) -> Result<Vec<SessionSpec>> {
    let classes = train.classes();
    if classes.len() < cfg.total_classes() {
        return Err(G2gError::Config(format!(
            "protocol needs {} classes, training data has {}",
            cfg.total_classes(),
            classes.len()
        )));
    }
    let mut plan = vec![SessionSpec {
        index: 1,
        classes: classes[..cfg.base_classes].to_vec(),
        shots: cfg.base_shots,
        epochs: cfg.epochs,
        role: Role::Base,
    }];
    for t in 0..cfg.sessions {
        let start = cfg.base_classes + t * cfg.ways;
        plan.push(SessionSpec {
            index: t + 2,
            classes: classes[start..start + cfg.ways].to_vec(),
            shots: Some(cfg.shots),
            epochs: cfg.epochs,
            role: Role::Incremental,
        });
    }
    validate_sessions(&plan)?;
    Ok(plan)
}

/// Class sets must be pairwise disjoint, and only the first session is base.
pub fn validate_sessions(plan: &[SessionSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, s) in plan.iter().enumerate() {
        let want = if i == 0 { Role::Base } else { Role::Incremental };
        if s.role != want || s.index != i + 1 {
            return Err(G2gError::Config(format!(
                "session {} is listed at position {} as {:?}; the base session must come first",
                s.index,
                i + 1,
                s.role
            )));
        }
        if s.classes.is_empty() {
            return Err(G2gError::Config(format!("session {} has no classes", s.index)));
        }
        for &c in &s.classes {
            if !seen.insert(c) {
                return Err(G2gError::SessionOverlap { session: s.index, class: c });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub h: Matrix,
    pub augmented: Option<Matrix>,
}

/// At most one stored sample per class; entries never change once written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RehearsalBuffer {
    slots: BTreeMap<u32, Exemplar>,
}

impl RehearsalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: u32, ex: Exemplar) -> Result<()> {
        if self.slots.contains_key(&class) {
            return Err(G2gError::DuplicateClass(class));
        }
        self.slots.insert(class, ex);
        Ok(())
    }

    pub fn get(&self, class: u32) -> Option<&Exemplar> {
        self.slots.get(&class)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &Exemplar)> {
        self.slots.iter().map(|(&c, e)| (c, e))
    }
}
