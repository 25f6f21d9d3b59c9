//! Local feature pipeline: adjustment, per-segment MLPs, token averaging
//! and the weighted local graph over segments.
//!
//! A raw backbone feature `h` (`d_h x L`) is mapped by a learned
//! `d_h x d_h` adjustment, split row-wise into `S` equal segments, and each
//! segment is passed through its own two-layer MLP column by column. The
//! result is averaged over tokens and reshaped to `S` node vectors whose
//! adjacency is `exp(-‖ζ̄_i - ζ̄_j‖₂)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{G2gError, Result};
use crate::matrix::{pairwise_euclidean, Matrix};
use crate::params::{ParamId, ParamStore, Trace};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub d_h: usize,
    pub tokens: usize,
    pub segments: usize,
    pub d_zeta: usize,
    pub mlp_hidden: usize,
}

impl PipelineConfig {
    /// Config with the default per-segment hidden width `d_zeta / segments`.
    pub fn new(d_h: usize, tokens: usize, segments: usize, d_zeta: usize) -> Self {
        PipelineConfig {
            d_h,
            tokens,
            segments,
            d_zeta,
            mlp_hidden: (d_zeta / segments.max(1)).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.tokens == 0 || self.mlp_hidden == 0 {
            return Err(G2gError::Config(
                "pipeline.S, pipeline.L and pipeline.mlp_hidden must be positive".into(),
            ));
        }
        if self.d_h == 0 || self.d_h % self.segments != 0 {
            return Err(G2gError::Config(format!(
                "pipeline.d_h = {} is not divisible by pipeline.S = {}",
                self.d_h, self.segments
            )));
        }
        if self.d_zeta == 0 || self.d_zeta % self.segments != 0 {
            return Err(G2gError::Config(format!(
                "pipeline.d_zeta = {} is not divisible by pipeline.S = {}",
                self.d_zeta, self.segments
            )));
        }
        Ok(())
    }

    pub fn segment_in(&self) -> usize {
        self.d_h / self.segments
    }

    pub fn segment_out(&self) -> usize {
        self.d_zeta / self.segments
    }
}

/// A backbone feature `h` of shape `d_h x L`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeature {
    pub h: Matrix,
    pub label: Option<u32>,
}

impl RawFeature {
    pub fn new(h: Matrix, label: Option<u32>) -> Self {
        RawFeature { h, label }
    }
}

/// Node vectors (one per row) and their weighted adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGraph {
    pub nodes: Matrix,
    pub adjacency: Matrix,
}

impl LocalGraph {
    /// Splits `v` into `segments` equal nodes and builds their adjacency.
    pub fn from_vector(v: &[f64], segments: usize) -> Result<Self> {
        if segments == 0 || v.len() % segments != 0 {
            return Err(G2gError::shape(
                "build_local_graph",
                format!("length {} into {segments} segments", v.len()),
            ));
        }
        let nodes = Matrix::from_vec(segments, v.len() / segments, v.to_vec())?;
        let adjacency = adjacency_of(&nodes)?;
        Ok(LocalGraph { nodes, adjacency })
    }

    pub fn len(&self) -> usize {
        self.nodes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.rows() == 0
    }
}

/// `A[i][j] = exp(-‖x_i - x_j‖₂)` over the rows of `nodes`.
pub fn adjacency_of(nodes: &Matrix) -> Result<Matrix> {
    Ok(pairwise_euclidean(nodes)?.map(|d| (-d).exp()))
}

/// Tape handles for a local graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub nodes: Var,
    pub adjacency: Var,
}

impl GraphVars {
    pub fn to_local_graph(self, tape: &Tape) -> LocalGraph {
        LocalGraph {
            nodes: tape.value(self.nodes).clone(),
            adjacency: tape.value(self.adjacency).clone(),
        }
    }
}

/// Row means over the token axis: `d x L -> d x 1`.
pub fn token_average(tape: &mut Tape, zeta: Var) -> Var {
    tape.row_means(zeta)
}

/// Reshapes a `d x 1` (or `1 x d`) vector into `segments` nodes and builds the adjacency.
pub fn build_local_graph(tape: &mut Tape, v: Var, segments: usize) -> Result<GraphVars> {
    let (r, c) = tape.shape(v);
    let len = r * c;
    if segments == 0 || len % segments != 0 || (r != 1 && c != 1) {
        return Err(G2gError::shape(
            "build_local_graph",
            format!("{r}x{c} vector into {segments} segments"),
        ));
    }
    let nodes = tape.reshape(v, segments, len / segments)?;
    let adjacency = adjacency_var(tape, nodes)?;
    Ok(GraphVars { nodes, adjacency })
}

pub(crate) fn adjacency_var(tape: &mut Tape, nodes: Var) -> Result<Var> {
    let d = tape.pairwise_dist(nodes)?;
    let neg = tape.scale(d, -1.0);
    Ok(tape.exp(neg))
}

/// Stacks the clean view above the augmented view.
pub fn concat_views(tape: &mut Tape, clean: Var, augmented: Option<Var>) -> Result<Var> {
    let augmented = augmented.ok_or(G2gError::MissingAugmentedView { index: 0 })?;
    if tape.shape(clean) != tape.shape(augmented) {
        return Err(G2gError::shape(
            "concat_views",
            format!("{:?} vs {:?}", tape.shape(clean), tape.shape(augmented)),
        ));
    }
    tape.vstack(&[clean, augmented])
}

/// Additive Gaussian noise with standard deviation `factor * rms(h)`.
pub fn synthetic_augment(h: &Matrix, factor: f64, rng: &mut impl Rng) -> Matrix {
    let rms = (h.sum_sq() / h.len().max(1) as f64).sqrt();
    let sigma = factor * rms;
    if !(sigma > 0.0) {
        return h.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    h.map(|v| v + normal.sample(rng))
}

#[derive(Clone, Debug)]
struct SegmentMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles for the adjustment matrix and the segment MLPs.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    adjust: ParamId,
    mlps: Vec<SegmentMlp>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let adjust = store.register_uniform("pipeline.adjust", cfg.d_h, cfg.d_h, cfg.d_h, rng)?;
        let (din, hid, dout) = (cfg.segment_in(), cfg.mlp_hidden, cfg.segment_out());
        let mut mlps = Vec::with_capacity(cfg.segments);
        for s in 0..cfg.segments {
            let w1 = store.register_uniform(format!("pipeline.seg{s}.w1"), hid, din, din, rng)?;
            let b1 = store.register(format!("pipeline.seg{s}.b1"), Matrix::zeros(hid, 1))?;
            let w2 = store.register_uniform(format!("pipeline.seg{s}.w2"), dout, hid, hid, rng)?;
            let b2 = store.register(format!("pipeline.seg{s}.b2"), Matrix::zeros(dout, 1))?;
            mlps.push(SegmentMlp { w1, b1, w2, b2 });
        }
        Ok(Pipeline { cfg, adjust, mlps })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn adjust_id(&self) -> ParamId {
        self.adjust
    }

    /// `(w1, b1, w2, b2)` handles of segment `s`.
    pub fn segment_ids(&self, s: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let m = &self.mlps[s];
        (m.w1, m.b1, m.w2, m.b2)
    }

    /// `ħ = W h`.
    pub fn adjust(&self, tr: &mut Trace, h: Var) -> Result<Var> {
        let expected = (self.cfg.d_h, self.cfg.tokens);
        if tr.shape(h) != expected {
            return Err(G2gError::shape(
                "adjust",
                format!("feature {:?}, expected {expected:?}", tr.shape(h)),
            ));
        }
        let w = tr.param(self.adjust);
        tr.matmul(w, h)
    }

    /// Applies each segment's MLP to its row block of `ħ` and restacks.
    pub fn segment_transform(&self, tr: &mut Trace, hbar: Var) -> Result<Var> {
        let (rows, _) = tr.shape(hbar);
        if rows != self.cfg.d_h {
            return Err(G2gError::shape(
                "segment_transform",
                format!("{rows} rows, expected {}", self.cfg.d_h),
            ));
        }
        let step = self.cfg.segment_in();
        let mut outs = Vec::with_capacity(self.mlps.len());
        for (s, mlp) in self.mlps.iter().enumerate() {
            let part = tr.slice_rows(hbar, s * step, step)?;
            let (w1, b1, w2, b2) = (
                tr.param(mlp.w1),
                tr.param(mlp.b1),
                tr.param(mlp.w2),
                tr.param(mlp.b2),
            );
            let z = tr.matmul(w1, part)?;
            let z = tr.add_col(z, b1)?;
            let z = tr.relu(z);
            let z = tr.matmul(w2, z)?;
            outs.push(tr.add_col(z, b2)?);
        }
        tr.vstack(&outs)
    }

    /// `ζ = T(L(h))`, shape `d_zeta x L`.
    pub fn local_features(&self, tr: &mut Trace, h: Var) -> Result<Var> {
        let hbar = self.adjust(tr, h).map_err(|e| e.in_stage("adjust"))?;
        self.segment_transform(tr, hbar)
            .map_err(|e| e.in_stage("segment_transform"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn setup(cfg: PipelineConfig, seed: u64) -> (ParamStore, Pipeline) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = Pipeline::new(cfg, &mut store, &mut rng).unwrap();
        (store, p)
    }

    fn run_adjust(store: &ParamStore, p: &Pipeline, h: &Matrix) -> Matrix {
        let mut tr = Trace::new(store);
        let hv = tr.leaf(h.clone());
        let out = p.adjust(&mut tr, hv).unwrap();
        tr.value(out).clone()
    }

    fn run_segments(store: &ParamStore, p: &Pipeline, h: &Matrix) -> Matrix {
        let mut tr = Trace::new(store);
        let hv = tr.leaf(h.clone());
        let out = p.segment_transform(&mut tr, hv).unwrap();
        tr.value(out).clone()
    }

    #[test]
    fn adjust_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, p) = setup(PipelineConfig::new(4, 3, 2, 4), 1);
        let h = random(4, 3, &mut rng);
        *store.value_mut(p.adjust_id()) = Matrix::identity(4);
        assert_eq!(run_adjust(&store, &p, &h), h);
        *store.value_mut(p.adjust_id()) = Matrix::zeros(4, 4);
        assert_eq!(run_adjust(&store, &p, &h), Matrix::zeros(4, 3));
    }

    #[test]
    fn adjust_matches_reference_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, p) = setup(PipelineConfig::new(4, 3, 2, 4), 2);
        let h = random(4, 3, &mut rng);
        let w = store.value(p.adjust_id());
        let out = run_adjust(&store, &p, &h);
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w.get(i, k) * h.get(k, j);
                }
                assert!((out.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjust_rejects_wrong_shape() {
        let (store, p) = setup(PipelineConfig::new(4, 3, 2, 4), 2);
        let mut tr = Trace::new(&store);
        let hv = tr.leaf(Matrix::zeros(4, 2));
        assert!(matches!(p.adjust(&mut tr, hv), Err(G2gError::Shape { .. })));
    }

    #[test]
    fn zero_mlps_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, p) = setup(PipelineConfig::new(8, 3, 2, 6), 3);
        for (_, param) in store.iter_mut() {
            param.value.fill(0.0);
        }
        let h = random(8, 3, &mut rng);
        assert_eq!(run_segments(&store, &p, &h), Matrix::zeros(6, 3));
    }

    #[test]
    fn single_segment_identity_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = PipelineConfig::new(4, 2, 1, 4);
        cfg.mlp_hidden = 4;
        let (mut store, p) = setup(cfg, 4);
        let (w1, b1, w2, b2) = p.segment_ids(0);
        *store.value_mut(w1) = Matrix::identity(4);
        *store.value_mut(w2) = Matrix::identity(4);
        store.value_mut(b1).fill(0.0);
        store.value_mut(b2).fill(0.0);
        let h = random(4, 2, &mut rng).map(f64::abs);
        assert_eq!(run_segments(&store, &p, &h), h);
    }

    #[test]
    fn segments_match_per_block_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = PipelineConfig {
            mlp_hidden: 3,
            ..PipelineConfig::new(6, 4, 2, 4)
        };
        let (mut store, p) = setup(cfg, 5);
        for s in 0..2 {
            let (_, b1, _, b2) = p.segment_ids(s);
            *store.value_mut(b1) = random(3, 1, &mut rng);
            *store.value_mut(b2) = random(2, 1, &mut rng);
        }
        let h = random(6, 4, &mut rng);
        let out = run_segments(&store, &p, &h);
        for s in 0..2 {
            let (w1, b1, w2, b2) = p.segment_ids(s);
            let (w1, b1, w2, b2) = (store.value(w1), store.value(b1), store.value(w2), store.value(b2));
            for t in 0..4 {
                let x: Vec<f64> = (0..3).map(|r| h.get(s * 3 + r, t)).collect();
                let hidden: Vec<f64> = (0..3)
                    .map(|i| (b1.get(i, 0) + (0..3).map(|k| w1.get(i, k) * x[k]).sum::<f64>()).max(0.0))
                    .collect();
                for o in 0..2 {
                    let y = b2.get(o, 0) + (0..3).map(|k| w2.get(o, k) * hidden[k]).sum::<f64>();
                    assert!((out.get(s * 2 + o, t) - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn more_segments_means_fewer_mlp_parameters() {
        // The hidden width is split equally across segments (the default).
        for &(s_small, s_large) in &[(2usize, 4usize), (4, 8)] {
            let count = |s: usize| {
                let (store, _) = setup(PipelineConfig::new(64, 2, s, 64), 9);
                store.count_scalars("pipeline.seg")
            };
            assert!(count(s_large) < count(s_small));
        }
    }

    #[test]
    fn token_average_cases() {
        let mut t = Tape::new();
        let single = t.leaf(Matrix::col_vector(&[1.0, -2.0]));
        let avg = token_average(&mut t, single);
        assert_eq!(t.value(avg), &Matrix::col_vector(&[1.0, -2.0]));

        let pair = t.leaf(Matrix::from_rows(&[&[1.0, 3.0], &[1.0, 3.0]]));
        let avg = token_average(&mut t, pair);
        assert_eq!(t.value(avg), &Matrix::col_vector(&[2.0, 2.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random(6, 5, &mut rng);
        let zv = t.leaf(z.clone());
        let avg = token_average(&mut t, zv);
        for r in 0..6 {
            let mean = z.row(r).iter().sum::<f64>() / 5.0;
            assert!((t.value(avg).get(r, 0) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_of_identical_segments_is_all_ones() {
        let g = LocalGraph::from_vector(&[0.5, -1.0, 0.5, -1.0, 0.5, -1.0], 3).unwrap();
        assert_eq!(g.adjacency, Matrix::filled(3, 3, 1.0));
    }

    #[test]
    fn graph_at_distance_ln2_has_half_weight() {
        let l = 2f64.ln();
        let g = LocalGraph::from_vector(&[0.0, l], 2).unwrap();
        assert!((g.adjacency.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(g.adjacency.get(0, 0), 1.0);
    }

    #[test]
    fn graph_matches_exp_of_pairwise_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random(1, 12, &mut rng);
        let g = LocalGraph::from_vector(v.data(), 4).unwrap();
        let mut t = Tape::new();
        let vv = t.leaf(v.clone());
        let gv = build_local_graph(&mut t, vv, 4).unwrap();
        let nodes = v.reshape(4, 3).unwrap();
        let d = pairwise_euclidean(&nodes).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g.adjacency.get(i, j) - (-d.get(i, j)).exp()).abs() < 1e-15);
            }
        }
        assert_eq!(gv.to_local_graph(&t), g);
    }

    #[test]
    fn concat_orders_clean_first() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(4, 2, 1.0));
        let b = t.leaf(Matrix::filled(4, 2, 2.0));
        let c = concat_views(&mut t, a, Some(b)).unwrap();
        let v = t.value(c);
        assert_eq!(v.shape(), (8, 2));
        assert!(v.data()[..8].iter().all(|&x| x == 1.0));
        assert!(v.data()[8..].iter().all(|&x| x == 2.0));
        let same = concat_views(&mut t, a, Some(a)).unwrap();
        assert_eq!(&t.value(same).data()[..8], &t.value(same).data()[8..]);
        assert!(matches!(
            concat_views(&mut t, a, None),
            Err(G2gError::MissingAugmentedView { .. })
        ));
    }

    #[test]
    fn concatenated_graph_contains_clean_graph_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = Tape::new();
        let a = t.leaf(random(8, 3, &mut rng));
        let b = t.leaf(random(8, 3, &mut rng));
        let cat = concat_views(&mut t, a, Some(b)).unwrap();
        let cat_avg = token_average(&mut t, cat);
        let joint = build_local_graph(&mut t, cat_avg, 8).unwrap();
        let a_avg = token_average(&mut t, a);
        let alone = build_local_graph(&mut t, a_avg, 4).unwrap();
        let (ja, aa) = (t.value(joint.adjacency), t.value(alone.adjacency));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ja.get(i, j), aa.get(i, j));
            }
        }
    }

    #[test]
    fn config_rejects_indivisible_dims() {
        assert!(PipelineConfig::new(770, 197, 8, 64).validate().is_err());
        assert!(PipelineConfig::new(768, 197, 8, 64).validate().is_ok());
        assert!(PipelineConfig::new(64, 4, 8, 60).validate().is_err());
    }

    #[test]
    fn synthetic_augmentation_perturbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random(4, 3, &mut rng);
        let a = synthetic_augment(&h, 0.05, &mut rng);
        assert_ne!(a, h);
        assert!(a.max_abs_diff(&h) < 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adjacency_invariants(v in proptest::collection::vec(-5.0f64..5.0, 16), shift in proptest::collection::vec(-3.0f64..3.0, 4)) {
                let g = LocalGraph::from_vector(&v, 4).unwrap();
                for i in 0..4 {
                    prop_assert_eq!(g.adjacency.get(i, i), 1.0);
                    for j in 0..4 {
                        let a = g.adjacency.get(i, j);
                        prop_assert_eq!(a, g.adjacency.get(j, i));
                        prop_assert!(a > 0.0 && a <= 1.0);
                    }
                }
                let moved: Vec<f64> = v.iter().enumerate().map(|(k, x)| x + shift[k % 4]).collect();
                let g2 = LocalGraph::from_vector(&moved, 4).unwrap();
                prop_assert!(g.adjacency.max_abs_diff(&g2.adjacency) < 1e-12);
            }
        }
    }
}
