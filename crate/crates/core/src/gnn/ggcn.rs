//! Convolution gated by signed cosine similarity between nodes.

use rand::Rng;

use super::{linear, register_linear, InteractorConfig};
use crate::error::Result;
use crate::matrix::{cosine, Matrix};
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::Var;

/// Initial values of `κ, μ0, μ1, μ2` in every layer.
pub const GGCN_INIT: [f64; 4] = [1.0, 1.0, 0.1, 0.1];

#[derive(Clone, Debug)]
struct Layer {
    kappa: ParamId,
    mu: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub(super) struct Ggcn {
    input: (ParamId, Option<ParamId>),
    layers: Vec<Layer>,
    out: (ParamId, Option<ParamId>),
}

impl Ggcn {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let input = register_linear(store, &format!("{p}.in"), cfg.d_in, cfg.hidden, true, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        let scalar = |v: f64| Matrix::filled(1, 1, v);
        for l in 0..cfg.layers {
            let kappa = store.register(format!("{p}.layer{l}.kappa"), scalar(GGCN_INIT[0]))?;
            let mu0 = store.register(format!("{p}.layer{l}.mu0"), scalar(GGCN_INIT[1]))?;
            let mu1 = store.register(format!("{p}.layer{l}.mu1"), scalar(GGCN_INIT[2]))?;
            let mu2 = store.register(format!("{p}.layer{l}.mu2"), scalar(GGCN_INIT[3]))?;
            layers.push(Layer { kappa, mu: [mu0, mu1, mu2] });
        }
        let out = register_linear(store, &format!("{p}.out"), cfg.hidden, cfg.d_out(), true, rng)?;
        Ok(Ggcn { input, layers, out })
    }

    /// `H ← Elu(κ(μ0 H + μ1 (S⁺⊙A) H + μ2 (S⁻⊙A) H))`.
    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var) -> Result<Var> {
        let mut h = linear(tr, x, self.input.0, self.input.1)?;
        for layer in &self.layers {
            let hn = tr.normalize_rows(h);
            let hnt = tr.transpose(hn);
            let cos = tr.matmul(hn, hnt)?;
            let pos = tr.relu(cos);
            let neg = tr.sub(cos, pos)?;
            let pos_a = tr.mul(pos, a)?;
            let neg_a = tr.mul(neg, a)?;
            let (kappa, mu0, mu1, mu2) = (
                tr.param(layer.kappa),
                tr.param(layer.mu[0]),
                tr.param(layer.mu[1]),
                tr.param(layer.mu[2]),
            );
            let t0 = tr.scale_by(h, mu0)?;
            let ph = tr.matmul(pos_a, h)?;
            let t1 = tr.scale_by(ph, mu1)?;
            let nh = tr.matmul(neg_a, h)?;
            let t2 = tr.scale_by(nh, mu2)?;
            let s = tr.add(t0, t1)?;
            let s = tr.add(s, t2)?;
            let s = tr.scale_by(s, kappa)?;
            h = tr.elu(s);
        }
        linear(tr, h, self.out.0, self.out.1)
    }
}

/// `(S⁺, S⁻)`: pairwise row cosines split into their positive and negative
/// parts. Rows with zero norm have similarity 0 to every row.
pub fn cosine_split(h: &Matrix) -> (Matrix, Matrix) {
    let n = h.rows();
    let mut pos = Matrix::zeros(n, n);
    let mut neg = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let c = cosine(h.row(i), h.row(j));
            pos.set(i, j, c.max(0.0));
            neg.set(i, j, c.min(0.0));
        }
    }
    (pos, neg)
}
