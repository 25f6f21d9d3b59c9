//! Explicit memory of class prototypes, graph-level dissimilarity and
//! retrieval.
//!
//! A prototype `m` has the same length as `ξ` and is read as `S` segments,
//! so it carries its own local graph `A^m`. The dissimilarity is
//! `r(ξ, m) = ‖ξ - m‖₂ + ‖A^ξ - A^m‖_F`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{G2gError, Result};
use crate::gnn::InteractiveFeature;
use crate::matrix::{cosine, euclid, Matrix};
use crate::pipeline::{adjacency_var, LocalGraph};
use crate::tape::{Tape, Var};

/// Standard deviation of the random prototype initialisation.
pub const PROTOTYPE_INIT_STD: f64 = 0.02;

const MAGIC: &[u8; 7] = b"G2GMEM1";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub m: Vec<f64>,
    pub frozen: bool,
    pub session: u16,
}

/// `r` split into its vector and graph terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dissimilarity {
    pub total: f64,
    pub feature: f64,
    pub structure: f64,
}

/// Distance used by the vector-to-vector baseline retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum V2vMetric {
    Euclidean,
    /// `1 - cos`.
    Cosine,
}

impl FromStr for V2vMetric {
    type Err = G2gError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Ok(V2vMetric::Euclidean),
            "cosine" => Ok(V2vMetric::Cosine),
            other => Err(G2gError::Config(format!(
                "unknown retrieval metric {other:?}; expected euclidean or cosine"
            ))),
        }
    }
}

/// `r(ξ, m)` for two flat vectors read as `segments` nodes each.
pub fn dissimilarity(xi: &[f64], m: &[f64], segments: usize) -> Result<Dissimilarity> {
    if xi.len() != m.len() {
        return Err(G2gError::shape(
            "dissimilarity",
            format!("ξ has {} entries, prototype has {}", xi.len(), m.len()),
        ));
    }
    let gx = LocalGraph::from_vector(xi, segments)?;
    let gm = LocalGraph::from_vector(m, segments)?;
    Ok(graph_dissimilarity(xi, &gx.adjacency, m, &gm.adjacency))
}

fn graph_dissimilarity(xi: &[f64], axi: &Matrix, m: &[f64], am: &Matrix) -> Dissimilarity {
    let feature = euclid(xi, m);
    let structure = euclid(axi.data(), am.data());
    Dissimilarity {
        total: feature + structure,
        feature,
        structure,
    }
}

/// `r` on the tape: `xi` and `m` are `S x d` node matrices, `a_xi` is the
/// adjacency of `xi`.
pub fn dissimilarity_var(tape: &mut Tape, xi: Var, a_xi: Var, m: Var) -> Result<Var> {
    let a_m = adjacency_var(tape, m)?;
    let dv = tape.sub(xi, m)?;
    let feature = tape.norm(dv);
    let da = tape.sub(a_xi, a_m)?;
    let structure = tape.norm(da);
    tape.add(feature, structure)
}

/// Prototype memory keyed by class id. Iteration is in ascending class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitMemory {
    segments: usize,
    dim: usize,
    protos: BTreeMap<u32, Prototype>,
}

impl ExplicitMemory {
    pub fn new(segments: usize, dim: usize) -> Result<Self> {
        if segments == 0 || dim == 0 || dim % segments != 0 {
            return Err(G2gError::Config(format!(
                "memory dimension {dim} must be a positive multiple of S = {segments}"
            )));
        }
        if segments > u16::MAX as usize || dim > u32::MAX as usize {
            return Err(G2gError::Config("memory dimensions exceed the file format".into()));
        }
        Ok(ExplicitMemory {
            segments,
            dim,
            protos: BTreeMap::new(),
        })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn contains(&self, y: u32) -> bool {
        self.protos.contains_key(&y)
    }

    /// `Y_M` in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.protos.keys().copied().collect()
    }

    pub fn get(&self, y: u32) -> Result<&Prototype> {
        self.protos.get(&y).ok_or(G2gError::UnknownClass(y))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.protos.values()
    }

    /// A copy holding only the prototypes whose class satisfies `keep`.
    pub fn subset(&self, keep: impl Fn(u32) -> bool) -> ExplicitMemory {
        ExplicitMemory {
            segments: self.segments,
            dim: self.dim,
            protos: self.protos.iter().filter(|(&y, _)| keep(y)).map(|(&y, p)| (y, p.clone())).collect(),
        }
    }

    /// Adds an unfrozen prototype, initialised from `init_hint` or from
    /// `N(0, 0.02²)`.
    pub fn add_class(
        &mut self,
        y: u32,
        session: u16,
        init_hint: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<&Prototype> {
        if self.protos.contains_key(&y) {
            return Err(G2gError::DuplicateClass(y));
        }
        let m = match init_hint {
            Some(h) => {
                if h.len() != self.dim {
                    return Err(G2gError::shape(
                        "add_class",
                        format!("init hint has {} entries, expected {}", h.len(), self.dim),
                    ));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(G2gError::NonFinite("add_class"));
                }
                h.to_vec()
            }
            None => {
                let normal = Normal::new(0.0, PROTOTYPE_INIT_STD).expect("valid std");
                (0..self.dim).map(|_| normal.sample(rng)).collect()
            }
        };
        Ok(self.protos.entry(y).or_insert(Prototype {
            class_id: y,
            m,
            frozen: false,
            session,
        }))
    }

    /// Values of an unfrozen prototype; `Ok(None)` when it is frozen.
    pub fn trainable_mut(&mut self, y: u32) -> Result<Option<&mut Vec<f64>>> {
        let p = self.protos.get_mut(&y).ok_or(G2gError::UnknownClass(y))?;
        Ok(if p.frozen { None } else { Some(&mut p.m) })
    }

    /// Freezes the listed classes. Validates every id before changing any flag.
    pub fn freeze_session(&mut self, classes: &[u32]) -> Result<()> {
        if let Some(&y) = classes.iter().find(|y| !self.protos.contains_key(y)) {
            return Err(G2gError::UnknownClass(y));
        }
        for y in classes {
            self.protos.get_mut(y).expect("checked").frozen = true;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.protos.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn prototype_graph(&self, y: u32) -> Result<LocalGraph> {
        LocalGraph::from_vector(&self.get(y)?.m, self.segments)
    }

    pub fn dissimilarity(&self, xi: &InteractiveFeature, y: u32) -> Result<Dissimilarity> {
        self.check_query(&xi.xi)?;
        let p = self.get(y)?;
        let gm = LocalGraph::from_vector(&p.m, self.segments)?;
        Ok(graph_dissimilarity(&xi.xi, &xi.local_graph.adjacency, &p.m, &gm.adjacency))
    }

    /// `r(ξ, m^y)` for every class, ascending class id.
    pub fn scores(&self, xi: &InteractiveFeature) -> Result<Vec<(u32, Dissimilarity)>> {
        self.check_query(&xi.xi)?;
        if xi.local_graph.adjacency.shape() != (self.segments, self.segments) {
            return Err(G2gError::shape(
                "retrieve",
                format!("query adjacency {:?} for S = {}", xi.local_graph.adjacency.shape(), self.segments),
            ));
        }
        self.protos
            .values()
            .map(|p| {
                let gm = LocalGraph::from_vector(&p.m, self.segments)?;
                Ok((
                    p.class_id,
                    graph_dissimilarity(&xi.xi, &xi.local_graph.adjacency, &p.m, &gm.adjacency),
                ))
            })
            .collect()
    }

    /// `argmin_y r(ξ, m^y)`, ties to the smallest class id.
    pub fn retrieve(&self, xi: &InteractiveFeature) -> Result<u32> {
        if self.is_empty() {
            return Err(G2gError::EmptyMemory);
        }
        let scores = self.scores(xi)?;
        Ok(argmin(scores.iter().map(|(y, d)| (*y, d.total))))
    }

    /// `argmin_y d(ξ, m^y)` without graph structure.
    pub fn retrieve_v2v(&self, xi: &[f64], metric: V2vMetric) -> Result<u32> {
        if self.is_empty() {
            return Err(G2gError::EmptyMemory);
        }
        self.check_query(xi)?;
        Ok(argmin(self.protos.values().map(|p| {
            let d = match metric {
                V2vMetric::Euclidean => euclid(xi, &p.m),
                V2vMetric::Cosine => 1.0 - cosine(xi, &p.m),
            };
            (p.class_id, d)
        })))
    }

    /// `r(m^a, m^b)` for every unordered pair `a < b`.
    pub fn pairwise_dissimilarities(&self) -> Result<Vec<(u32, u32, Dissimilarity)>> {
        let graphs = self
            .protos
            .values()
            .map(|p| Ok((p, LocalGraph::from_vector(&p.m, self.segments)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for (i, (pa, ga)) in graphs.iter().enumerate() {
            for (pb, gb) in &graphs[i + 1..] {
                out.push((
                    pa.class_id,
                    pb.class_id,
                    graph_dissimilarity(&pa.m, &ga.adjacency, &pb.m, &gb.adjacency),
                ));
            }
        }
        Ok(out)
    }

    fn check_query(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(G2gError::shape(
                "retrieve",
                format!("query has {} entries, memory stores {}", xi.len(), self.dim),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u16(self.segments as u16);
        w.u32(self.dim as u32);
        w.u32(self.protos.len() as u32);
        for p in self.protos.values() {
            w.u32(p.class_id);
            w.u16(p.session);
            w.u8(p.frozen as u8);
            w.f64s(&p.m);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "memory file");
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(G2gError::Version {
                what: "memory file",
                found: version as u32,
                expected: VERSION as u32,
            });
        }
        let segments = r.u16("S")? as usize;
        let dim = r.u32("d_xi")? as usize;
        let count = r.u32("count")?;
        let mut mem = ExplicitMemory::new(segments, dim)?;
        for i in 0..count {
            let class_id = r.u32("class id")?;
            let session = r.u16("session")?;
            let frozen = match r.u8("frozen flag")? {
                0 => false,
                1 => true,
                other => {
                    return Err(G2gError::Truncated {
                        what: "memory file",
                        detail: format!("prototype {i} has frozen flag {other}"),
                    })
                }
            };
            let m = r.f64s(dim, "prototype values")?;
            if mem.protos.contains_key(&class_id) {
                return Err(G2gError::DuplicateClass(class_id));
            }
            mem.protos.insert(
                class_id,
                Prototype {
                    class_id,
                    m,
                    frozen,
                    session,
                },
            );
        }
        r.finish()?;
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Smallest score, ties to the smallest id. Input ids must be ascending.
fn argmin(scores: impl Iterator<Item = (u32, f64)>) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for (y, d) in scores {
        match best {
            Some((_, bd)) if !(d < bd) => {}
            _ => best = Some((y, d)),
        }
    }
    best.expect("non-empty").0
}
