//! Attention interactors. Scores are masked multiplicatively by the
//! weighted adjacency after the softmax, and `K` heads are concatenated and
//! projected by a shared linear output head.

use rand::Rng;

use super::{linear, register_linear, Activation, InteractorConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::Var;

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    a1: ParamId,
    a2: ParamId,
}

/// Static attention: `e_ij = a1·W x_i + a2·W x_j`.
#[derive(Clone, Debug)]
pub(super) struct Gat {
    heads: Vec<Head>,
    out: (ParamId, Option<ParamId>),
}

impl Gat {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let hw = cfg.head_width;
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let name = format!("{p}.head{k}");
            let (w, _) = register_linear(store, &name, cfg.d_in, hw, false, rng)?;
            let a1 = store.register_uniform(format!("{name}.a1"), hw, 1, 2 * hw, rng)?;
            let a2 = store.register_uniform(format!("{name}.a2"), hw, 1, 2 * hw, rng)?;
            heads.push(Head { w, a1, a2 });
        }
        let out = register_linear(store, &format!("{p}.out"), cfg.heads * hw, cfg.d_out(), true, rng)?;
        Ok(Gat { heads, out })
    }

    fn head(&self, tr: &mut Trace, head: &Head, x: Var, a: Var) -> Result<(Var, Var)> {
        let z = linear(tr, x, head.w, None)?;
        let (a1, a2) = (tr.param(head.a1), tr.param(head.a2));
        let s1 = tr.matmul(z, a1)?;
        let s2 = tr.matmul(z, a2)?;
        let e = tr.outer_sum(s1, s2)?;
        let e = tr.leaky_relu(e);
        let sm = tr.softmax_rows(e)?;
        let alpha = tr.mul(a, sm)?;
        Ok((alpha, z))
    }

    pub(super) fn attention(&self, tr: &mut Trace, x: Var, a: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|h| Ok(self.head(tr, h, x, a)?.0)).collect()
    }

    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var, act: Activation) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (alpha, z) = self.head(tr, h, x, a)?;
            let agg = tr.matmul(alpha, z)?;
            outs.push(act.on_tape(tr, agg));
        }
        let cat = tr.hstack(&outs)?;
        linear(tr, cat, self.out.0, self.out.1)
    }
}

#[derive(Clone, Debug)]
struct Head2 {
    wl: ParamId,
    wr: ParamId,
    a: ParamId,
}

/// Dynamic attention: `e_ij = a · LeakyReLU(W_l x_i + W_r x_j)`, i.e. `W`
/// applied to `[x_i ‖ x_j]` with `W = [W_l W_r]`. Messages use `W_r x_j`.
#[derive(Clone, Debug)]
pub(super) struct Gatv2 {
    heads: Vec<Head2>,
    out: (ParamId, Option<ParamId>),
}

impl Gatv2 {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let hw = cfg.head_width;
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let name = format!("{p}.head{k}");
            let wl = store.register_uniform(format!("{name}.wl"), cfg.d_in, hw, 2 * cfg.d_in, rng)?;
            let wr = store.register_uniform(format!("{name}.wr"), cfg.d_in, hw, 2 * cfg.d_in, rng)?;
            let a = store.register_uniform(format!("{name}.a"), hw, 1, hw, rng)?;
            heads.push(Head2 { wl, wr, a });
        }
        let out = register_linear(store, &format!("{p}.out"), cfg.heads * hw, cfg.d_out(), true, rng)?;
        Ok(Gatv2 { heads, out })
    }

    fn head(&self, tr: &mut Trace, head: &Head2, x: Var, a: Var) -> Result<(Var, Var)> {
        let n = tr.shape(x).0;
        let p = linear(tr, x, head.wl, None)?;
        let q = linear(tr, x, head.wr, None)?;
        let pairs = tr.pair_rows(p, q)?;
        let pairs = tr.leaky_relu(pairs);
        let av = tr.param(head.a);
        let e = tr.matmul(pairs, av)?;
        let e = tr.reshape(e, n, n)?;
        let sm = tr.softmax_rows(e)?;
        let alpha = tr.mul(a, sm)?;
        Ok((alpha, q))
    }

    pub(super) fn attention(&self, tr: &mut Trace, x: Var, a: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|h| Ok(self.head(tr, h, x, a)?.0)).collect()
    }

    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var, act: Activation) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (alpha, q) = self.head(tr, h, x, a)?;
            let agg = tr.matmul(alpha, q)?;
            outs.push(act.on_tape(tr, agg));
        }
        let cat = tr.hstack(&outs)?;
        linear(tr, cat, self.out.0, self.out.1)
    }
}
