//! Training losses and their gradients.
//!
//! Every loss is a mean of per-sample terms, so each sample is traced on its
//! own tape (in parallel) and the gradients are reduced in sample order.
//!
//! - `L_G`: per sample `r(ξ, m^y) + log Σ_{y'∈Y_B} exp(-r(ξ, m^{y'}))`.
//! - `L_D`: per sample, the sum of cosines over ordered pairs of distinct
//!   segments of `m^y`.
//! - `L_C`: `L_G` scored on the augmented views plus the alignment
//!   `‖ξ - ξ̃‖² + ‖A^ξ - A^ξ̃‖²_F`, where `ξ, ξ̃` are the two halves of one
//!   interactor pass over the `2S` nodes of both views.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{G2gError, Result};
use crate::gnn::{check_compatible, interact_nodes, local_graph_var, Interactor, XiVars};
use crate::matrix::Matrix;
use crate::memory::{dissimilarity_var, ExplicitMemory};
use crate::params::{ParamId, ParamStore, Trace};
use crate::pipeline::{adjacency_var, concat_views, Pipeline};
use crate::tape::{Tape, Var};

/// A labelled batch, optionally with one augmented view per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<Matrix>,
    pub labels: Vec<u32>,
    pub augmented: Option<Vec<Matrix>>,
}

impl Batch {
    pub fn new(features: Vec<Matrix>, labels: Vec<u32>, augmented: Option<Vec<Matrix>>) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(G2gError::shape(
                "batch",
                format!("{} features and {} labels", features.len(), labels.len()),
            ));
        }
        if let Some(aug) = &augmented {
            if aug.len() != features.len() {
                return Err(G2gError::shape(
                    "batch",
                    format!("{} augmented views for {} samples", aug.len(), features.len()),
                ));
            }
            if let Some(i) = (0..aug.len()).find(|&i| aug[i].shape() != features[i].shape()) {
                return Err(G2gError::shape(
                    "batch",
                    format!("augmented view {i} is {:?}, clean view is {:?}", aug[i].shape(), features[i].shape()),
                ));
            }
        }
        Ok(Batch {
            features,
            labels,
            augmented,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `Y_B`, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Component values of `L = L_G + λ L_D + η L_C`. `l_c` is `None` when it
/// was not evaluated (`η = 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_c: Option<f64>,
    pub lambda: f64,
    pub eta: f64,
}

/// Gradients of one loss evaluation. Parameters are indexed like the store;
/// prototype gradients are present only for unfrozen prototypes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub params: Vec<Option<Matrix>>,
    pub prototypes: BTreeMap<u32, Vec<f64>>,
}

impl Gradients {
    fn empty(n_params: usize) -> Self {
        Gradients {
            params: vec![None; n_params],
            prototypes: BTreeMap::new(),
        }
    }

    fn merge(&mut self, other: Gradients) {
        for (slot, g) in self.params.iter_mut().zip(other.params) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.axpy(1.0, &g),
                    None => *slot = Some(g),
                }
            }
        }
        for (y, g) in other.prototypes {
            match self.prototypes.get_mut(&y) {
                Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.prototypes.insert(y, g);
                }
            }
        }
    }

    /// Adds the parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                store.accumulate_grad(ParamId(i), g, 1.0);
            }
        }
    }
}

/// What a loss evaluation reads.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub store: &'a ParamStore,
    pub pipeline: &'a Pipeline,
    pub interactor: &'a Interactor,
    pub memory: &'a ExplicitMemory,
}

#[derive(Clone, Copy, Debug)]
struct Weights {
    g: f64,
    d: f64,
    c: f64,
    need_d: bool,
    need_c: bool,
}

#[derive(Default)]
struct SampleValues {
    l_g: f64,
    l_d: f64,
    l_c: f64,
}

/// `L_G` and its gradients.
pub fn proto_contrastive(ctx: LossContext, batch: &Batch) -> Result<(f64, Gradients)> {
    let w = Weights { g: 1.0, d: 0.0, c: 0.0, need_d: false, need_c: false };
    let (v, g) = evaluate(ctx, batch, w)?;
    Ok((v.l_g, g))
}

/// `L_C` and its gradients. Requires augmented views.
pub fn local_graph_contrastive(ctx: LossContext, batch: &Batch) -> Result<(f64, Gradients)> {
    let w = Weights { g: 0.0, d: 0.0, c: 1.0, need_d: false, need_c: true };
    let (v, g) = evaluate(ctx, batch, w)?;
    Ok((v.l_c, g))
}

/// `L_D` and its prototype gradients. Depends only on the memory.
pub fn local_decoupling(batch: &Batch, memory: &ExplicitMemory) -> Result<(f64, BTreeMap<u32, Vec<f64>>)> {
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut grads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &y in &batch.labels {
        let p = memory.get(y)?;
        let mut t = Tape::new();
        let m = t.leaf(proto_nodes(memory, &p.m)?);
        let ld = decoupling_term(&mut t, m)?;
        let obj = t.scale(ld, 1.0 / n);
        value += t.scalar_value(obj);
        if !p.frozen {
            let adj = t.backward(obj);
            if let Some(g) = adj.get(m) {
                let slot = grads.entry(y).or_insert_with(|| vec![0.0; memory.dim()]);
                slot.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((value, grads))
}

/// `L = L_G + λ L_D + η L_C` and its gradients. `L_C` is evaluated only
/// when `η > 0`.
pub fn total_loss(ctx: LossContext, batch: &Batch, lambda: f64, eta: f64) -> Result<(LossReport, Gradients)> {
    if !(lambda >= 0.0 && lambda.is_finite() && eta >= 0.0 && eta.is_finite()) {
        return Err(G2gError::Config(format!(
            "loss.lambda and loss.eta must be finite and >= 0, got {lambda} and {eta}"
        )));
    }
    let w = Weights {
        g: 1.0,
        d: lambda,
        c: eta,
        need_d: true,
        need_c: eta > 0.0,
    };
    let (v, g) = evaluate(ctx, batch, w)?;
    let l_c = w.need_c.then_some(v.l_c);
    let total = v.l_g + lambda * v.l_d + eta * l_c.unwrap_or(0.0);
    Ok((
        LossReport {
            total,
            l_g: v.l_g,
            l_d: v.l_d,
            l_c,
            lambda,
            eta,
        },
        g,
    ))
}

/// Splits a concatenated `2 d_ξ` vector into its clean and augmented halves.
pub fn slice_views(xi_cat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if xi_cat.len() % 2 != 0 {
        return Err(G2gError::shape(
            "slice_views",
            format!("odd length {}", xi_cat.len()),
        ));
    }
    let (a, b) = xi_cat.split_at(xi_cat.len() / 2);
    Ok((a.to_vec(), b.to_vec()))
}

/// `ξ_cat` for one sample: the interactor over the `2S` nodes of both views.
pub fn concatenated_features(ctx: LossContext, clean: &Matrix, augmented: &Matrix) -> Result<Vec<f64>> {
    check_compatible(ctx.pipeline, ctx.interactor)?;
    let mut tr = Trace::new(ctx.store);
    let (hv, av) = (tr.leaf(clean.clone()), tr.leaf(augmented.clone()));
    let gc = local_graph_var(&mut tr, ctx.pipeline, hv)?;
    let ga = local_graph_var(&mut tr, ctx.pipeline, av)?;
    let out = joint_pass(&mut tr, ctx.interactor, gc.nodes, ga.nodes)?;
    Ok(tr.value(out).data().to_vec())
}

fn evaluate(ctx: LossContext, batch: &Batch, w: Weights) -> Result<(SampleValues, Gradients)> {
    check_compatible(ctx.pipeline, ctx.interactor)?;
    if ctx.interactor.config().d_out_total != ctx.memory.dim() {
        return Err(G2gError::Config(format!(
            "interactor d_xi = {} but memory stores {}",
            ctx.interactor.config().d_out_total,
            ctx.memory.dim()
        )));
    }
    let yb = batch.classes();
    for &y in &yb {
        ctx.memory.get(y)?;
    }
    if w.need_c {
        if batch.augmented.is_none() {
            return Err(G2gError::MissingAugmentedView { index: 0 });
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let outs: Vec<Result<(SampleValues, Gradients)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let aug = batch.augmented.as_ref().map(|a| &a[i]);
            sample(ctx, &yb, &batch.features[i], batch.labels[i], aug, w, scale)
        })
        .collect();
    let mut total = SampleValues::default();
    let mut grads = Gradients::empty(ctx.store.len());
    for out in outs {
        let (v, g) = out?;
        total.l_g += v.l_g;
        total.l_d += v.l_d;
        total.l_c += v.l_c;
        grads.merge(g);
    }
    Ok((total, grads))
}

fn proto_nodes(memory: &ExplicitMemory, m: &[f64]) -> Result<Matrix> {
    let s = memory.segments();
    Matrix::from_vec(s, m.len() / s, m.to_vec())
}

fn sample(
    ctx: LossContext,
    yb: &[u32],
    h: &Matrix,
    y: u32,
    aug: Option<&Matrix>,
    w: Weights,
    scale: f64,
) -> Result<(SampleValues, Gradients)> {
    let mut tr = Trace::new(ctx.store);
    let mut protos = Vec::with_capacity(yb.len());
    for &c in yb {
        let p = ctx.memory.get(c)?;
        protos.push((c, tr.leaf(proto_nodes(ctx.memory, &p.m)?)));
    }
    let own = protos.iter().find(|(c, _)| *c == y).expect("label in Y_B").1;

    let hv = tr.leaf(h.clone());
    let g = local_graph_var(&mut tr, ctx.pipeline, hv)?;
    let xi = interact_nodes(&mut tr, ctx.interactor, g.nodes, g.adjacency)?;
    let l_g = contrastive_term(&mut tr, xi, &protos, own)?;
    let mut terms = vec![(l_g, w.g)];
    let mut values = SampleValues {
        l_g: tr.scalar_value(l_g) * scale,
        ..Default::default()
    };

    if w.need_d {
        let l_d = decoupling_term(&mut tr, own)?;
        values.l_d = tr.scalar_value(l_d) * scale;
        terms.push((l_d, w.d));
    }

    if w.need_c {
        let aug = aug.ok_or(G2gError::MissingAugmentedView { index: 0 })?;
        let av = tr.leaf(aug.clone());
        let ga = local_graph_var(&mut tr, ctx.pipeline, av)?;
        let xa = interact_nodes(&mut tr, ctx.interactor, ga.nodes, ga.adjacency)?;
        let l_ga = contrastive_term(&mut tr, xa, &protos, own)?;
        let s = ctx.memory.segments();
        let out = joint_pass(&mut tr, ctx.interactor, g.nodes, ga.nodes)?;
        let x1 = tr.slice_rows(out, 0, s)?;
        let x2 = tr.slice_rows(out, s, s)?;
        let a1 = adjacency_var(&mut tr, x1)?;
        let a2 = adjacency_var(&mut tr, x2)?;
        let dx = tr.sub(x1, x2)?;
        let da = tr.sub(a1, a2)?;
        let fx = sum_sq(&mut tr, dx)?;
        let fa = sum_sq(&mut tr, da)?;
        let align = tr.add(fx, fa)?;
        let l_c = tr.add(l_ga, align)?;
        values.l_c = tr.scalar_value(l_c) * scale;
        terms.push((l_c, w.c));
    }

    let mut obj: Option<Var> = None;
    for (t, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let part = tr.scale(t, weight * scale);
        obj = Some(match obj {
            Some(o) => tr.add(o, part)?,
            None => part,
        });
    }
    let mut grads = Gradients::empty(ctx.store.len());
    if let Some(obj) = obj {
        if !tr.value(obj).is_finite() {
            return Err(G2gError::NonFinite("loss"));
        }
        let mut adj = tr.backward(obj);
        for (id, gm) in tr.param_grads(&mut adj) {
            grads.params[id.0] = Some(gm);
        }
        for (c, v) in protos {
            if ctx.memory.get(c)?.frozen {
                continue;
            }
            if let Some(gm) = adj.take(v) {
                grads.prototypes.insert(c, gm.into_vec());
            }
        }
    }
    Ok((values, grads))
}

/// `r(ξ, m^y) + logsumexp_{y'}(-r(ξ, m^{y'}))`.
fn contrastive_term(tr: &mut Trace, xi: XiVars, protos: &[(u32, Var)], own: Var) -> Result<Var> {
    let mut neg = Vec::with_capacity(protos.len());
    let mut r_own = None;
    for &(_, m) in protos {
        let r = dissimilarity_var(tr, xi.nodes, xi.adjacency, m)?;
        if m == own {
            r_own = Some(r);
        }
        neg.push(tr.scale(r, -1.0));
    }
    let row = tr.hstack(&neg)?;
    let lse = tr.log_sum_exp(row);
    tr.add(r_own.expect("own prototype scored"), lse)
}

/// `Σ_{s≠j} cos(m_s, m_j)` over the rows of `m`.
fn decoupling_term(tape: &mut Tape, m: Var) -> Result<Var> {
    let n = tape.shape(m).0;
    let unit = tape.normalize_rows(m);
    let ut = tape.transpose(unit);
    let gram = tape.matmul(unit, ut)?;
    let mask = Matrix::filled(n, n, 1.0).sub(&Matrix::identity(n))?;
    let mask = tape.leaf(mask);
    let off = tape.mul(gram, mask)?;
    Ok(tape.sum(off))
}

fn sum_sq(tape: &mut Tape, a: Var) -> Result<Var> {
    let sq = tape.mul(a, a)?;
    Ok(tape.sum(sq))
}

/// Interactor output over the stacked nodes of both views, `2S x d_ξ/S`.
fn joint_pass(tr: &mut Trace, interactor: &Interactor, clean: Var, augmented: Var) -> Result<Var> {
    let cat = concat_views(tr, clean, Some(augmented))?;
    let a = adjacency_var(tr, cat)?;
    interactor.forward(tr, cat, a).map_err(|e| e.in_stage("interactor"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_views_contract() {
        let v: Vec<f64> = (0..8).map(f64::from).collect();
        let (a, b) = slice_views(&v).unwrap();
        assert_eq!(a, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b, vec![4.0, 5.0, 6.0, 7.0]);
        let cat: Vec<f64> = [1.5, -2.0].iter().chain(&[3.0, 4.0]).copied().collect();
        assert_eq!(slice_views(&cat).unwrap(), (vec![1.5, -2.0], vec![3.0, 4.0]));
        assert!(slice_views(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn batch_validation() {
        let f = vec![Matrix::zeros(2, 2); 3];
        assert!(Batch::new(f.clone(), vec![1, 2], None).is_err());
        assert!(Batch::new(f.clone(), vec![1, 2, 1], Some(vec![Matrix::zeros(2, 2); 2])).is_err());
        assert!(Batch::new(f.clone(), vec![1, 2, 1], Some(vec![Matrix::zeros(2, 3); 3])).is_err());
        let b = Batch::new(f, vec![4, 2, 4], None).unwrap();
        assert_eq!(b.classes(), vec![2, 4]);
    }

    #[test]
    fn decoupling_of_identical_and_orthogonal_segments() {
        let mut t = Tape::new();
        let same = t.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]));
        let v = decoupling_term(&mut t, same).unwrap();
        assert!((t.scalar_value(v) - 6.0).abs() < 1e-12);
        let orth = t.leaf(Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]));
        let v = decoupling_term(&mut t, orth).unwrap();
        assert_eq!(t.scalar_value(v), 0.0);
    }
}
