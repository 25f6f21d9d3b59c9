//! Mean-aggregation over all other nodes, concatenated with the node itself.

use rand::Rng;

use super::{linear, register_linear, Activation, InteractorConfig};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::Var;

#[derive(Clone, Debug)]
struct Layer {
    agg: (ParamId, Option<ParamId>),
    update: ParamId,
}

#[derive(Clone, Debug)]
pub(super) struct Sage {
    layers: Vec<Layer>,
    out: (ParamId, Option<ParamId>),
}

impl Sage {
    pub(super) fn new(cfg: &InteractorConfig, p: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut width = cfg.d_in;
        for k in 0..cfg.layers {
            let agg = register_linear(store, &format!("{p}.layer{k}.agg"), width, cfg.hidden, true, rng)?;
            let (update, _) =
                register_linear(store, &format!("{p}.layer{k}.update"), width + cfg.hidden, cfg.hidden, false, rng)?;
            layers.push(Layer { agg, update });
            width = cfg.hidden;
        }
        let out = register_linear(store, &format!("{p}.out"), cfg.hidden, cfg.d_out(), true, rng)?;
        Ok(Sage { layers, out })
    }

    /// Per layer: `agg_i = mean_{j≠i} σ(W h_j + b)`, `h_i ← σ(W_k [h_i ‖ agg_i])`.
    /// A single node has an all-zero aggregate.
    pub(super) fn forward(&self, tr: &mut Trace, x: Var, act: Activation) -> Result<Var> {
        let n = tr.shape(x).0;
        let mean = tr.leaf(neighbour_mean(n));
        let mut h = x;
        for layer in &self.layers {
            let m = linear(tr, h, layer.agg.0, layer.agg.1)?;
            let m = act.on_tape(tr, m);
            let agg = tr.matmul(mean, m)?;
            let cat = tr.hstack(&[h, agg])?;
            let u = linear(tr, cat, layer.update, None)?;
            h = act.on_tape(tr, u);
        }
        linear(tr, h, self.out.0, self.out.1)
    }
}

/// `(J - I) / (n - 1)`, or zeros for `n = 1`.
fn neighbour_mean(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    if n > 1 {
        let w = 1.0 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m.set(i, j, w);
                }
            }
        }
    }
    m
}
