//! Graph interactors over a local graph and the full map from a backbone
//! feature to the interactive feature `ξ`.
//!
//! Every interactor takes `n` node rows (`n x d_in`) and an `n x n` weighted
//! adjacency and returns `n x (d_ξ / S)`. Weights are shared across nodes, so
//! the same parameters serve a single view (`n = S`) and the concatenation of
//! a clean and an augmented view (`n = 2S`).

mod attention;
mod gcn;
mod gcnii;
mod ggcn;
mod sage;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{G2gError, Result};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore, Trace};
use crate::pipeline::{adjacency_var, build_local_graph, token_average, LocalGraph, Pipeline, RawFeature};
use crate::tape::Var;

pub use gcn::pair_norm;
pub use ggcn::{cosine_split, GGCN_INIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Gcn,
    Gat,
    PairNorm,
    Gcnii,
    Ggcn,
    GraphSage,
    Gatv2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Gcn,
        Variant::Gat,
        Variant::PairNorm,
        Variant::Gcnii,
        Variant::Ggcn,
        Variant::GraphSage,
        Variant::Gatv2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "GCN",
            Variant::Gat => "GAT",
            Variant::PairNorm => "PairNorm",
            Variant::Gcnii => "GCNII",
            Variant::Ggcn => "GGCN",
            Variant::GraphSage => "GraphSage",
            Variant::Gatv2 => "GATv2",
        }
    }

    pub fn default_layers(self) -> usize {
        match self {
            Variant::Gcnii => 16,
            Variant::Ggcn => 6,
            Variant::Gcn | Variant::PairNorm | Variant::GraphSage => 2,
            Variant::Gat | Variant::Gatv2 => 1,
        }
    }

    /// Whether the layer count may differ from the default.
    fn layers_configurable(self) -> bool {
        matches!(self, Variant::Gcnii | Variant::Ggcn | Variant::GraphSage)
    }

    fn prefix(self) -> &'static str {
        match self {
            Variant::Gcn => "interactor.gcn",
            Variant::Gat => "interactor.gat",
            Variant::PairNorm => "interactor.pairnorm",
            Variant::Gcnii => "interactor.gcnii",
            Variant::Ggcn => "interactor.ggcn",
            Variant::GraphSage => "interactor.sage",
            Variant::Gatv2 => "interactor.gatv2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = G2gError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| {
                G2gError::Config(format!(
                    "unknown interactor.variant {t:?}; expected one of GCN, GAT, PairNorm, GCNII, GGCN, GraphSage, GATv2"
                ))
            })
    }
}

/// The otherwise unnamed nonlinearity used by GAT, GATv2, GCNII and GraphSage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Elu,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => crate::matrix::elu(x),
            Activation::Relu => crate::matrix::relu(x),
            Activation::LeakyRelu => crate::matrix::leaky_relu(x),
        }
    }

    pub(crate) fn on_tape(self, tr: &mut Trace, x: Var) -> Var {
        match self {
            Activation::Elu => tr.elu(x),
            Activation::Relu => tr.relu(x),
            Activation::LeakyRelu => tr.leaky_relu(x),
        }
    }
}

impl FromStr for Activation {
    type Err = G2gError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            other => Err(G2gError::Config(format!(
                "unknown interactor.activation {other:?}; expected elu, relu or leaky_relu"
            ))),
        }
    }
}

/// Default value of every entry of the GCNII `γ` and `η` schedules.
pub const GCNII_SCHEDULE_DEFAULT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct InteractorConfig {
    pub variant: Variant,
    pub segments: usize,
    /// Per-node input width, `d_ζ / S`.
    pub d_in: usize,
    /// `d_ξ`.
    pub d_out_total: usize,
    pub heads: usize,
    /// Per-head width for GAT and GATv2.
    pub head_width: usize,
    /// Internal width of the multi-layer variants.
    pub hidden: usize,
    pub layers: usize,
    pub gcnii_gamma: Vec<f64>,
    pub gcnii_eta: Vec<f64>,
    pub activation: Activation,
}

impl InteractorConfig {
    /// Defaults: 4 heads of width `d_ξ/(S·4)`, hidden width `d_ξ/S`, the
    /// variant's layer count, constant GCNII schedules and ELU.
    pub fn new(variant: Variant, segments: usize, d_zeta: usize, d_xi: usize) -> Self {
        let s = segments.max(1);
        let d_out = d_xi / s;
        let heads = 4;
        let layers = variant.default_layers();
        InteractorConfig {
            variant,
            segments,
            d_in: d_zeta / s,
            d_out_total: d_xi,
            heads,
            head_width: (d_out / heads).max(1),
            hidden: d_out.max(1),
            layers,
            gcnii_gamma: vec![GCNII_SCHEDULE_DEFAULT; layers],
            gcnii_eta: vec![GCNII_SCHEDULE_DEFAULT; layers],
            activation: Activation::Elu,
        }
    }

    /// Overrides the layer count, resetting the GCNII schedules to their default.
    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self.gcnii_gamma = vec![GCNII_SCHEDULE_DEFAULT; layers];
        self.gcnii_eta = vec![GCNII_SCHEDULE_DEFAULT; layers];
        self
    }

    /// Sets the head count and re-derives the head width.
    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self.head_width = (self.d_out() / heads.max(1)).max(1);
        self
    }

    /// Per-node output width `d_ξ / S`.
    pub fn d_out(&self) -> usize {
        self.d_out_total / self.segments.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(G2gError::Config(m));
        if self.segments == 0 || self.d_in == 0 || self.d_out_total == 0 {
            return bad("interactor dimensions must be positive".into());
        }
        if self.d_out_total % self.segments != 0 {
            return bad(format!(
                "d_xi = {} is not divisible by S = {}",
                self.d_out_total, self.segments
            ));
        }
        if self.heads == 0 || self.head_width == 0 || self.hidden == 0 {
            return bad("interactor heads, head width and hidden width must be positive".into());
        }
        if self.layers == 0 {
            return bad("interactor.layers must be positive".into());
        }
        if !self.variant.layers_configurable() && self.layers != self.variant.default_layers() {
            return bad(format!(
                "{} has a fixed depth of {} layers, got {}",
                self.variant,
                self.variant.default_layers(),
                self.layers
            ));
        }
        if self.variant == Variant::Gcnii {
            if self.gcnii_gamma.len() != self.layers || self.gcnii_eta.len() != self.layers {
                return bad(format!(
                    "GCNII schedules have lengths {} and {}, expected {} layers",
                    self.gcnii_gamma.len(),
                    self.gcnii_eta.len(),
                    self.layers
                ));
            }
            if self.gcnii_gamma.iter().chain(&self.gcnii_eta).any(|v| !v.is_finite()) {
                return bad("GCNII schedules must be finite".into());
            }
        }
        Ok(())
    }
}

/// The output of `g_θ`: `ξ` and the local graph over its `S` segments.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractiveFeature {
    pub xi: Vec<f64>,
    pub local_graph: LocalGraph,
}

#[derive(Clone, Debug)]
enum Body {
    Gcn(gcn::Gcn),
    PairNorm(gcn::PairNorm),
    Gat(attention::Gat),
    Gatv2(attention::Gatv2),
    Gcnii(gcnii::Gcnii),
    Ggcn(ggcn::Ggcn),
    Sage(sage::Sage),
}

/// One configured interactor and its parameter handles.
#[derive(Clone, Debug)]
pub struct Interactor {
    cfg: InteractorConfig,
    body: Body,
}

impl Interactor {
    pub fn new(cfg: InteractorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.variant.prefix();
        let body = match cfg.variant {
            Variant::Gcn => Body::Gcn(gcn::Gcn::new(&cfg, p, store, rng)?),
            Variant::PairNorm => Body::PairNorm(gcn::PairNorm::new(&cfg, p, store, rng)?),
            Variant::Gat => Body::Gat(attention::Gat::new(&cfg, p, store, rng)?),
            Variant::Gatv2 => Body::Gatv2(attention::Gatv2::new(&cfg, p, store, rng)?),
            Variant::Gcnii => Body::Gcnii(gcnii::Gcnii::new(&cfg, p, store, rng)?),
            Variant::Ggcn => Body::Ggcn(ggcn::Ggcn::new(&cfg, p, store, rng)?),
            Variant::GraphSage => Body::Sage(sage::Sage::new(&cfg, p, store, rng)?),
        };
        Ok(Interactor { cfg, body })
    }

    pub fn config(&self) -> &InteractorConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// `n x d_in` nodes and `n x n` adjacency to `n x d_out` node outputs.
    pub fn forward(&self, tr: &mut Trace, nodes: Var, adjacency: Var) -> Result<Var> {
        let (n, d) = tr.shape(nodes);
        if d != self.cfg.d_in || n == 0 || tr.shape(adjacency) != (n, n) {
            return Err(G2gError::shape(
                "interactor",
                format!(
                    "nodes {:?} (expected n x {}), adjacency {:?}",
                    tr.shape(nodes),
                    self.cfg.d_in,
                    tr.shape(adjacency)
                ),
            ));
        }
        let out = match &self.body {
            Body::Gcn(b) => b.forward(tr, nodes, adjacency),
            Body::PairNorm(b) => b.forward(tr, nodes, adjacency),
            Body::Gat(b) => b.forward(tr, nodes, adjacency, self.cfg.activation),
            Body::Gatv2(b) => b.forward(tr, nodes, adjacency, self.cfg.activation),
            Body::Gcnii(b) => b.forward(tr, nodes, adjacency, &self.cfg),
            Body::Ggcn(b) => b.forward(tr, nodes, adjacency),
            Body::Sage(b) => b.forward(tr, nodes, self.cfg.activation),
        }?;
        debug_assert_eq!(tr.shape(out), (n, self.cfg.d_out()));
        Ok(out)
    }

    /// Forward pass on a concrete graph, outside of any training tape.
    pub fn forward_graph(&self, store: &ParamStore, g: &LocalGraph) -> Result<Matrix> {
        let mut tr = Trace::new(store);
        let x = tr.leaf(g.nodes.clone());
        let a = tr.leaf(g.adjacency.clone());
        let out = self.forward(&mut tr, x, a)?;
        let value = tr.value(out).clone();
        value.ensure_finite("interactor")?;
        Ok(value)
    }

    /// Per-head attention matrices `α` for GAT and GATv2; `None` otherwise.
    pub fn attention(&self, store: &ParamStore, g: &LocalGraph) -> Result<Option<Vec<Matrix>>> {
        let mut tr = Trace::new(store);
        let x = tr.leaf(g.nodes.clone());
        let a = tr.leaf(g.adjacency.clone());
        let alphas = match &self.body {
            Body::Gat(b) => b.attention(&mut tr, x, a)?,
            Body::Gatv2(b) => b.attention(&mut tr, x, a)?,
            _ => return Ok(None),
        };
        Ok(Some(alphas.into_iter().map(|v| tr.value(v).clone()).collect()))
    }
}

/// Tape handles for `ξ` (as `S x d_ξ/S` node rows) and its adjacency.
#[derive(Clone, Copy, Debug)]
pub struct XiVars {
    pub nodes: Var,
    pub adjacency: Var,
}

/// `ζ̄` as `S` node rows, from a `d_h x L` feature on the tape.
pub fn local_graph_var(tr: &mut Trace, pipeline: &Pipeline, h: Var) -> Result<crate::pipeline::GraphVars> {
    let zeta = pipeline.local_features(tr, h)?;
    let avg = token_average(tr, zeta);
    build_local_graph(tr, avg, pipeline.config().segments).map_err(|e| e.in_stage("build_local_graph"))
}

/// Runs the interactor on `n` node rows and builds the adjacency of the output.
pub fn interact_nodes(tr: &mut Trace, interactor: &Interactor, nodes: Var, adjacency: Var) -> Result<XiVars> {
    let out = interactor
        .forward(tr, nodes, adjacency)
        .map_err(|e| e.in_stage("interactor"))?;
    let adj = adjacency_var(tr, out).map_err(|e| e.in_stage("interactive_graph"))?;
    Ok(XiVars { nodes: out, adjacency: adj })
}

/// `g_θ = A ∘ Ave ∘ T ∘ L` on the tape.
pub fn interact_var(tr: &mut Trace, pipeline: &Pipeline, interactor: &Interactor, h: Var) -> Result<XiVars> {
    check_compatible(pipeline, interactor)?;
    let g = local_graph_var(tr, pipeline, h)?;
    interact_nodes(tr, interactor, g.nodes, g.adjacency)
}

/// `g_θ(h)` evaluated with the current parameter values.
pub fn interact(
    h: &RawFeature,
    pipeline: &Pipeline,
    interactor: &Interactor,
    store: &ParamStore,
) -> Result<InteractiveFeature> {
    let mut tr = Trace::new(store);
    let hv = tr.leaf(h.h.clone());
    let out = interact_var(&mut tr, pipeline, interactor, hv)?;
    let nodes = tr.value(out.nodes).clone();
    nodes.ensure_finite("interact")?;
    let adjacency = tr.value(out.adjacency).clone();
    Ok(InteractiveFeature {
        xi: nodes.data().to_vec(),
        local_graph: LocalGraph { nodes, adjacency },
    })
}

pub(crate) fn check_compatible(pipeline: &Pipeline, interactor: &Interactor) -> Result<()> {
    let p = pipeline.config();
    let c = interactor.config();
    if p.segments != c.segments || p.segment_out() != c.d_in {
        return Err(G2gError::Config(format!(
            "pipeline (S = {}, d_zeta/S = {}) and interactor (S = {}, d_in = {}) disagree",
            p.segments,
            p.segment_out(),
            c.segments,
            c.d_in
        )));
    }
    Ok(())
}

/// `x W (+ b)` with `x: n x in`, `W: in x out`, `b: 1 x out`.
pub(crate) fn linear(tr: &mut Trace, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let w = tr.param(w);
    let y = tr.matmul(x, w)?;
    match b {
        Some(b) => {
            let b = tr.param(b);
            tr.add_row(y, b)
        }
        None => Ok(y),
    }
}

/// Registers an `in x out` weight and optionally a zero `1 x out` bias.
pub(crate) fn register_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<(ParamId, Option<ParamId>)> {
    let w = store.register_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng)?;
    let b = if bias {
        Some(store.register(format!("{name}.b"), Matrix::zeros(1, fan_out))?)
    } else {
        None
    };
    Ok((w, b))
}
