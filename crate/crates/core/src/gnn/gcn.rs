//! Two-layer graph convolution, plain (row softmax output) and with
//! PairNorm after each layer.

use rand::Rng;

use super::{linear, register_linear, InteractorConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::Var;

/// `softmax_rows(A · ReLU(A X W0) · W1)`, biasless.
#[derive(Clone, Debug)]
pub(super) struct Gcn {
    w0: ParamId,
    w1: ParamId,
}

impl Gcn {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let (w0, _) = register_linear(store, &format!("{p}.layer0"), cfg.d_in, cfg.hidden, false, rng)?;
        let (w1, _) = register_linear(store, &format!("{p}.layer1"), cfg.hidden, cfg.d_out(), false, rng)?;
        Ok(Gcn { w0, w1 })
    }

    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var) -> Result<Var> {
        let ax = tr.matmul(a, x)?;
        let h = linear(tr, ax, self.w0, None)?;
        let h = tr.relu(h);
        let ah = tr.matmul(a, h)?;
        let logits = linear(tr, ah, self.w1, None)?;
        tr.softmax_rows(logits)
    }
}

/// `H1 = ReLU(PN(A X W0))`, output `PN(A H1 W1)`.
#[derive(Clone, Debug)]
pub(super) struct PairNorm {
    w0: ParamId,
    w1: ParamId,
}

impl PairNorm {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let (w0, _) = register_linear(store, &format!("{p}.layer0"), cfg.d_in, cfg.hidden, false, rng)?;
        let (w1, _) = register_linear(store, &format!("{p}.layer1"), cfg.hidden, cfg.d_out(), false, rng)?;
        Ok(PairNorm { w0, w1 })
    }

    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var) -> Result<Var> {
        let ax = tr.matmul(a, x)?;
        let h = linear(tr, ax, self.w0, None)?;
        let h = pair_norm(tr, h)?;
        let h = tr.relu(h);
        let ah = tr.matmul(a, h)?;
        let out = linear(tr, ah, self.w1, None)?;
        pair_norm(tr, out)
    }
}

/// Centres columns, then scales so the mean squared row norm is 1.
/// A fully collapsed input (all rows equal) maps to zero.
pub fn pair_norm(tr: &mut Trace, h: Var) -> Result<Var> {
    let n = tr.shape(h).0 as f64;
    let mean = tr.col_means(h);
    let neg = tr.scale(mean, -1.0);
    let c = tr.add_row(h, neg)?;
    let sq = tr.mul(c, c)?;
    let total = tr.sum(sq);
    let msq = tr.scale(total, 1.0 / n);
    let inv = tr.inv_sqrt(msq)?;
    tr.scale_by(c, inv)
}
