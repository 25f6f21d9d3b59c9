//! Deep convolution with initial residual and identity mapping.

use rand::Rng;

use super::{linear, register_linear, InteractorConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub(super) struct Gcnii {
    input: (ParamId, Option<ParamId>),
    layers: Vec<ParamId>,
    out: (ParamId, Option<ParamId>),
}

impl Gcnii {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let input = register_linear(store, &format!("{p}.in"), cfg.d_in, cfg.hidden, true, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                store.register_uniform(format!("{p}.layer{i}.w"), cfg.hidden, cfg.hidden, cfg.hidden, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = register_linear(store, &format!("{p}.out"), cfg.hidden, cfg.d_out(), true, rng)?;
        Ok(Gcnii { input, layers, out })
    }

    /// `H0 = X W_in + b`, then per layer
    /// `H ← σ(((1-γ) Â H + γ H0)((1-η) I + η W))`, then the output head.
    /// `Â = D^-1/2 A D^-1/2` keeps the propagation contractive over many layers.
    pub(super) fn forward(&self, tr: &mut Trace, x: Var, a: Var, cfg: &InteractorConfig) -> Result<Var> {
        let a_hat = sym_normalize(tr, a)?;
        let h0 = linear(tr, x, self.input.0, self.input.1)?;
        let mut h = h0;
        for (i, &w) in self.layers.iter().enumerate() {
            let (gamma, eta) = (cfg.gcnii_gamma[i], cfg.gcnii_eta[i]);
            let prop = tr.matmul(a_hat, h)?;
            let prop = tr.scale(prop, 1.0 - gamma);
            let res = tr.scale(h0, gamma);
            let m = tr.add(prop, res)?;
            let keep = tr.scale(m, 1.0 - eta);
            let mw = linear(tr, m, w, None)?;
            let mw = tr.scale(mw, eta);
            let pre = tr.add(keep, mw)?;
            h = cfg.activation.on_tape(tr, pre);
        }
        linear(tr, h, self.out.0, self.out.1)
    }
}

/// `D^-1/2 A D^-1/2` with `D` the row sums. The adjacency has a unit
/// diagonal, so every degree is at least 1.
pub(super) fn sym_normalize(tr: &mut Trace, a: Var) -> Result<Var> {
    let deg = tr.row_sums(a);
    let d = tr.powf(deg, -0.5);
    let dt = tr.transpose(d);
    let outer = tr.matmul(d, dt)?;
    tr.mul(a, outer)
}
