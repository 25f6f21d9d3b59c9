//! A small matrix-valued tape for reverse-mode gradients.
//!
//! Every model in the crate is written as a sequence of the operations
//! below; each operation records its inputs and output value, and
//! [`Tape::backward`] walks the records in reverse applying the
//! per-operation adjoint. The set of operations is closed and fixed; every
//! adjoint is covered by a central-difference check in the unit tests.
//!
//! Non-differentiable points take the zero subgradient: ReLU at 0, a
//! Euclidean norm or pairwise distance at 0, and row normalisation or
//! inverse square roots below [`NORM_EPS`](crate::NORM_EPS).

use crate::error::{G2gError, Result};
use crate::matrix::{self, Matrix, ELU_ALPHA, LEAKY_RELU_SLOPE};
use crate::NORM_EPS;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var),
    Exp(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    RowMeans(Var),
    ColMeans(Var),
    RowSums(Var),
    Sum(Var),
    Norm(Var),
    InvSqrt(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    PairwiseDist(Var),
    NormalizeRows(Var),
    OuterSum(Var, Var),
    PairRows(Var, Var),
    LogSumExp(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
}

impl Adjoints {
    /// Gradient of the output with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

macro_rules! shape_check {
    ($cond:expr, $op:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(G2gError::shape($op, format!($($arg)*)));
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::filled(1, 1, value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        shape_check!(self.shape(row) == (1, m), "add_row", "{n}x{m} + {:?}", self.shape(row));
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Adds an `n x 1` column to every column of an `n x m` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        shape_check!(self.shape(col) == (n, 1), "add_col", "{n}x{m} + {:?}", self.shape(col));
        let mut value = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, b) in c.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(value, Op::AddCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the `1x1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        shape_check!(self.shape(s) == (1, 1), "scale_by", "scalar has shape {:?}", self.shape(s));
        let value = self.value(a).scale(self.scalar_value(s));
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(matrix::relu);
        self.push(value, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(matrix::elu);
        self.push(value, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(matrix::leaky_relu);
        self.push(value, Op::LeakyRelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Elementwise power; callers keep the base positive for fractional `p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|v| v.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = matrix::softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// `n x m -> n x 1` mean over columns.
    pub fn row_means(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let cols = m.cols() as f64;
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum::<f64>() / cols).collect::<Vec<_>>();
        let value = Matrix::col_vector(&data);
        self.push(value, Op::RowMeans(a))
    }

    /// `n x m -> 1 x m` mean over rows.
    pub fn col_means(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let n = m.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let value = Matrix::row_vector(&out);
        self.push(value, Op::ColMeans(a))
    }

    /// `n x m -> n x 1` sum over columns.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum::<f64>()).collect::<Vec<_>>();
        let value = Matrix::col_vector(&data);
        self.push(value, Op::RowSums(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Euclidean / Frobenius norm as a `1x1` node.
    pub fn norm(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).norm());
        self.push(value, Op::Norm(a))
    }

    /// `1/sqrt(x)` of a `1x1` node, zero when `x <= NORM_EPS`.
    pub fn inv_sqrt(&mut self, a: Var) -> Result<Var> {
        shape_check!(self.shape(a) == (1, 1), "inv_sqrt", "input has shape {:?}", self.shape(a));
        let x = self.scalar_value(a);
        let y = if x > NORM_EPS { 1.0 / x.sqrt() } else { 0.0 };
        Ok(self.push(Matrix::filled(1, 1, y), Op::InvSqrt(a)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        shape_check!(start + len <= m.rows(), "slice_rows", "rows {start}..{} of {}", start + len, m.rows());
        let cols = m.cols();
        let value = Matrix::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        shape_check!(start + len <= m.cols(), "slice_cols", "cols {start}..{} of {}", start + len, m.cols());
        let mut data = Vec::with_capacity(m.rows() * len);
        for r in 0..m.rows() {
            data.extend_from_slice(&m.row(r)[start..start + len]);
        }
        let value = Matrix::from_vec(m.rows(), len, data)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        shape_check!(!parts.is_empty(), "vstack", "no inputs");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            shape_check!(m.cols() == cols, "vstack", "column counts {} and {}", cols, m.cols());
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::VStack(parts.to_vec())))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        shape_check!(!parts.is_empty(), "hstack", "no inputs");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            shape_check!(r == rows, "hstack", "row counts {rows} and {r}");
            cols += c;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(value, Op::HStack(parts.to_vec())))
    }

    /// Euclidean distances between all pairs of rows.
    pub fn pairwise_dist(&mut self, a: Var) -> Result<Var> {
        let value = matrix::pairwise_euclidean(self.value(a))?;
        Ok(self.push(value, Op::PairwiseDist(a)))
    }

    /// Scales each row to unit norm; rows with norm below `NORM_EPS` become zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(value, Op::NormalizeRows(a))
    }

    /// `u (n x 1)`, `v (n x 1)` -> `E[i][j] = u[i] + v[j]`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, one) = self.shape(u);
        shape_check!(one == 1 && self.shape(v) == (n, 1), "outer_sum", "{:?} and {:?}", self.shape(u), self.shape(v));
        let (uu, vv) = (self.value(u).data().to_vec(), self.value(v).data().to_vec());
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                value.set(i, j, uu[i] + vv[j]);
            }
        }
        Ok(self.push(value, Op::OuterSum(u, v)))
    }

    /// `P, Q (n x h)` -> `(n*n) x h` with row `i*n + j` equal to `P[i] + Q[j]`.
    pub fn pair_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, h) = self.shape(p);
        shape_check!(self.shape(q) == (n, h), "pair_rows", "{:?} and {:?}", self.shape(p), self.shape(q));
        let (pm, qm) = (self.value(p), self.value(q));
        let mut value = Matrix::zeros(n * n, h);
        for i in 0..n {
            for j in 0..n {
                for ((o, a), b) in value.row_mut(i * n + j).iter_mut().zip(pm.row(i)).zip(qm.row(j)) {
                    *o = a + b;
                }
            }
        }
        Ok(self.push(value, Op::PairRows(p, q)))
    }

    /// `log(sum(exp(a)))` over all entries, stabilised by the maximum.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let max = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = m.data().iter().map(|v| (v - max).exp()).sum();
        let value = Matrix::filled(1, 1, max + s.ln());
        self.push(value, Op::LogSumExp(a))
    }

    /// Reverse sweep from `out`, seeded with ones (the gradient of the sum of
    /// `out`'s entries; for the usual `1x1` loss this is just `d out`).
    pub fn backward(&self, out: Var) -> Adjoints {
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        let (r, c) = self.shape(out);
        grads[out.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Adjoints { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()).expect("matmul adjoint");
                let db = val(*a).transpose().matmul(g).expect("matmul adjoint");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(val(*b)).expect("mul adjoint"));
                accumulate(grads, *b, g.hadamard(val(*a)).expect("mul adjoint"));
            }
            Op::AddRow(a, row) => {
                let mut dr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, Matrix::row_vector(&dr));
            }
            Op::AddCol(a, col) => {
                let dc: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                accumulate(grads, *a, g.clone());
                accumulate(grads, *col, Matrix::col_vector(&dc));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                let ds = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum::<f64>();
                accumulate(grads, *a, g.scale(sv));
                accumulate(grads, *s, Matrix::filled(1, 1, ds));
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).expect("relu adjoint");
                accumulate(grads, *a, d);
            }
            Op::Elu(a) => {
                let d = g
                    .zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * ELU_ALPHA * x.exp() })
                    .expect("elu adjoint");
                accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a) => {
                let d = g
                    .zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * LEAKY_RELU_SLOPE })
                    .expect("leaky relu adjoint");
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g.hadamard(y).expect("exp adjoint")),
            Op::Powf(a, p) => {
                let d = g.zip_map(val(*a), |g, x| g * p * x.powf(p - 1.0)).expect("powf adjoint");
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::RowMeans(a) => {
                let (n, m) = val(*a).shape();
                let mut d = Matrix::zeros(n, m);
                for r in 0..n {
                    d.row_mut(r).fill(g.data()[r] / m as f64);
                }
                accumulate(grads, *a, d);
            }
            Op::ColMeans(a) => {
                let (n, m) = val(*a).shape();
                let mut d = Matrix::zeros(n, m);
                for r in 0..n {
                    for (o, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv / n as f64;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::RowSums(a) => {
                let (n, m) = val(*a).shape();
                let mut d = Matrix::zeros(n, m);
                for r in 0..n {
                    d.row_mut(r).fill(g.data()[r]);
                }
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (n, m) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(n, m, g.data()[0]));
            }
            Op::Norm(a) => {
                let n = y.data()[0];
                let d = if n > 0.0 {
                    val(*a).scale(g.data()[0] / n)
                } else {
                    let (r, c) = val(*a).shape();
                    Matrix::zeros(r, c)
                };
                accumulate(grads, *a, d);
            }
            Op::InvSqrt(a) => {
                let yv = y.data()[0];
                accumulate(grads, *a, Matrix::filled(1, 1, -0.5 * yv * yv * yv * g.data()[0]));
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, g.reshape(r, c).expect("reshape adjoint"));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let d = Matrix::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec())
                        .expect("vstack adjoint");
                    offset += r;
                    accumulate(grads, p, d);
                }
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, d);
                }
            }
            Op::PairwiseDist(a) => {
                let x = val(*a);
                let (n, m) = x.shape();
                let mut d = Matrix::zeros(n, m);
                for i in 0..n {
                    for j in 0..n {
                        let dist = y.get(i, j);
                        if i == j || dist <= 0.0 {
                            continue;
                        }
                        let w = g.get(i, j) / dist;
                        for k in 0..m {
                            let diff = w * (x.get(i, k) - x.get(j, k));
                            d.data_mut()[i * m + k] += diff;
                            d.data_mut()[j * m + k] -= diff;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < NORM_EPS {
                        continue;
                    }
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::OuterSum(u, v) => {
                let n = g.rows();
                let du: Vec<f64> = (0..n).map(|i| g.row(i).iter().sum()).collect();
                let mut dv = vec![0.0; n];
                for i in 0..n {
                    for (o, gv) in dv.iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
                accumulate(grads, *u, Matrix::col_vector(&du));
                accumulate(grads, *v, Matrix::col_vector(&dv));
            }
            Op::PairRows(p, q) => {
                let (n, h) = val(*p).shape();
                let mut dp = Matrix::zeros(n, h);
                let mut dq = Matrix::zeros(n, h);
                for i in 0..n {
                    for j in 0..n {
                        let gr = g.row(i * n + j);
                        for (o, gv) in dp.row_mut(i).iter_mut().zip(gr) {
                            *o += gv;
                        }
                        for (o, gv) in dq.row_mut(j).iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
                accumulate(grads, *p, dp);
                accumulate(grads, *q, dq);
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let lse = y.data()[0];
                let scale = g.data()[0];
                accumulate(grads, *a, x.map(|v| scale * (v - lse).exp()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Central-difference check of `f` at every entry of every input.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |inputs: &[Matrix]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
            let out = f(&mut t, &vars);
            let loss = t.sum(out);
            (t.scalar_value(loss), t, vars, loss)
        };
        let (_, tape, vars, loss) = eval(&inputs);
        let adj = tape.backward(loss);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = adj.get(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!(
                    (an - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "input {k} entry {idx}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_transpose_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(3, 4, &mut rng), random(2, 4, &mut rng)], |t, v| {
            let bt = t.transpose(v[1]);
            t.matmul(v[0], bt).unwrap()
        });
    }

    #[test]
    fn elementwise_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(3, 3, &mut rng), random(3, 3, &mut rng)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.sub(a, v[1]).unwrap();
            let c = t.mul(b, v[1]).unwrap();
            let d = t.elu(c);
            let e = t.leaky_relu(d);
            let f = t.exp(e);
            let g = t.scale(f, 0.7);
            t.relu(g)
        });
    }

    #[test]
    fn broadcast_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(3, 4, &mut rng), random(1, 4, &mut rng), random(3, 1, &mut rng), random(1, 1, &mut rng)],
            |t, v| {
                let a = t.add_row(v[0], v[1]).unwrap();
                let b = t.add_col(a, v[2]).unwrap();
                let c = t.scale_by(b, v[3]).unwrap();
                let rm = t.row_means(c);
                let cm = t.col_means(c);
                let rs = t.row_sums(c);
                let x = t.matmul(rm, cm).unwrap();
                let y = t.matmul(rs, cm).unwrap();
                let z = t.add(x, y).unwrap();
                t.softmax_rows(z).unwrap()
            },
        );
    }

    #[test]
    fn structural_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(4, 6, &mut rng), random(2, 3, &mut rng)], |t, v| {
            let r = t.reshape(v[0], 8, 3).unwrap();
            let top = t.slice_rows(r, 2, 2).unwrap();
            let stacked = t.vstack(&[top, v[1], top]).unwrap();
            let left = t.slice_cols(stacked, 1, 2).unwrap();
            let wide = t.hstack(&[left, stacked]).unwrap();
            t.elu(wide)
        });
    }

    #[test]
    fn geometric_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(4, 3, &mut rng)], |t, v| {
            let d = t.pairwise_dist(v[0]).unwrap();
            let nd = t.scale(d, -1.0);
            let a = t.exp(nd);
            let n = t.normalize_rows(v[0]);
            let nt = t.transpose(n);
            let cos = t.matmul(n, nt).unwrap();
            let prod = t.mul(a, cos).unwrap();
            let nrm = t.norm(prod);
            let ss = t.mul(nrm, nrm).unwrap();
            let inv = t.inv_sqrt(ss).unwrap();
            t.scale_by(prod, inv).unwrap()
        });
    }

    #[test]
    fn attention_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            vec![random(3, 1, &mut rng), random(3, 1, &mut rng), random(3, 2, &mut rng), random(3, 2, &mut rng)],
            |t, v| {
                let e = t.outer_sum(v[0], v[1]).unwrap();
                let p = t.pair_rows(v[2], v[3]).unwrap();
                let s = t.row_sums(p);
                let s = t.reshape(s, 3, 3).unwrap();
                let z = t.add(e, s).unwrap();
                let lse = t.log_sum_exp(z);
                let d = t.powf(z, 2.0);
                t.scale_by(d, lse).unwrap()
            },
        );
    }

    #[test]
    fn powf_fractional_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(2, 2, &mut rng).map(|v| v.abs() + 0.5);
        check(vec![x], |t, v| t.powf(v[0], -0.5));
    }

    #[test]
    fn zero_distance_and_zero_norm_take_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let d = t.pairwise_dist(x).unwrap();
        let s = t.sum(d);
        let adj = t.backward(s);
        assert_eq!(adj.get(x).unwrap(), &Matrix::zeros(2, 2));

        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(1, 3));
        let n = t.norm(z);
        let u = t.normalize_rows(z);
        let su = t.sum(u);
        let total = t.add(n, su).unwrap();
        let adj = t.backward(total);
        assert_eq!(adj.get(z).unwrap(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn log_sum_exp_of_single_entry_is_exact() {
        let mut t = Tape::new();
        let x = t.scalar(-3.25);
        let l = t.log_sum_exp(x);
        assert_eq!(t.scalar_value(l), -3.25);
    }

    #[test]
    fn shape_errors_surface() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 2));
        assert!(t.matmul(a, a).is_err());
        assert!(t.add(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
        assert!(t.slice_rows(a, 1, 2).is_err());
        let c = t.leaf(Matrix::zeros(3, 1));
        assert!(t.hstack(&[a, c]).is_err());
    }
}
