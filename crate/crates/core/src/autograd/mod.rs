//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed at
//! construction time) and replays the tape backwards on demand. All values are
//! two-dimensional; scalars are `1 x 1` matrices and feature maps are stored as
//! `pixels x channels` with row-major pixel order.

mod params;

pub mod check;

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, Dyn};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

pub use params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    MatMulTn(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddIdentity(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    RowNormalize {
        x: NodeId,
        norms: Vec<f64>,
        guard: f64,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    Gather(NodeId, Vec<usize>),
    Transpose(NodeId),
    SolveSpd {
        a: NodeId,
        b: NodeId,
        chol: Cholesky<f64, Dyn>,
    },
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape borrowing a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.get(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Leaf whose gradient is tracked and reported in [`Gradients::node`].
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Node bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMulNt(a, b), v, ng)
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).t().dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Op::MatMulTn(a, b), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(Op::Mul(a, b), v, ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: bias shape mismatch");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(Op::AddRow(a, row), v, ng)
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: non-scalar factor");
        let k = self.scalar(s);
        let v = self.value(a) * k;
        let ng = self.ng(&[a, s]);
        self.push(Op::MulScalar(a, s), v, ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        let ng = self.ng(&[a]);
        self.push(Op::Scale(a, k), v, ng)
    }

    /// `a + lambda * I` for square `a` and scalar node `lambda`.
    pub fn add_identity(&mut self, a: NodeId, lambda: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, n, "add_identity: matrix not square");
        let lam = self.scalar(lambda);
        let mut v = self.value(a).clone();
        v.diag_mut().mapv_inplace(|d| d + lam);
        let ng = self.ng(&[a, lambda]);
        self.push(Op::AddIdentity(a, lambda), v, ng)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).mapv(f);
        let ng = self.ng(&[a]);
        self.push(op, v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Projection onto `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(Op::LogSoftmaxRows(a), v, ng)
    }

    /// Row-wise layer normalization with `1 x n` affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = Array1::zeros(m);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            v,
            ng,
        )
    }

    /// Scales every row to unit l2 norm; rows with norm `<= guard` pass through.
    pub fn row_normalize(&mut self, x: NodeId, guard: f64) -> NodeId {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut v = xv.clone();
        for (mut row, &nrm) in v.rows_mut().into_iter().zip(&norms) {
            if nrm > guard {
                row /= nrm;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Op::RowNormalize { x, norms, guard }, v, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(Op::SumAll(a), v, ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let v = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.ng(&[a]);
        self.push(Op::MeanAll(a), v, ng)
    }

    /// Sum across columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(&[a]);
        self.push(Op::SumCols(a), v, ng)
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on an empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(&[a]);
        self.push(Op::MeanRows(a), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = self.ng(parts);
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = self.ng(parts);
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(&[a]);
        self.push(Op::SliceRows(a, start), v, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(&[a]);
        self.push(Op::SliceCols(a, start), v, ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count");
        let ng = self.ng(&[a]);
        self.push(Op::Reshape(a), v, ng)
    }

    /// `out.flat[i] = a.flat[index[i]]` (row-major), shaped `rows x cols`.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(a);
        let flat = src.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| src.iter().copied().collect());
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("gather: shape");
        let ng = self.ng(&[a]);
        self.push(Op::Gather(a, index), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(&[a]);
        self.push(Op::Transpose(a), v, ng)
    }

    /// Solves `a x = b` for symmetric positive-definite `a`.
    ///
    /// Panics if `a` is not positive definite; callers guarantee this with a
    /// ridge term.
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let am = to_dmatrix(self.value(a).view());
        let chol = Cholesky::new(am).expect("solve_spd: matrix is not positive definite");
        let x = chol.solve(&to_dmatrix(self.value(b).view()));
        let v = from_dmatrix(&x);
        let ng = self.ng(&[a, b]);
        self.push(Op::SolveSpd { a, b, chol }, v, ng)
    }

    /// Backward pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        self.backward_with(loss, Array2::ones((1, 1)))
    }

    /// Backward pass seeded with an explicit upstream gradient for `node`.
    pub fn backward_with(&self, node: NodeId, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.shape(node), "seed shape mismatch");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let mut params = ParamGrads::new(self.store.len());
        grads[node.0] = Some(seed);

        for i in (0..=node.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads, &mut params);
            grads[i] = Some(gy);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(
        &self,
        i: usize,
        gy: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        params: &mut ParamGrads,
    ) {
        let node = &self.nodes[i];
        let y = || node.value.as_ref().expect("computed node");
        let mut acc = |id: NodeId, g: Array2<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => params.accumulate(*p, gy),
            Op::MatMul(a, b) => {
                acc(*a, gy.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(gy));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, gy.dot(self.value(*b)));
                acc(*b, gy.t().dot(self.value(*a)));
            }
            Op::MatMulTn(a, b) => {
                acc(*a, self.value(*b).dot(&gy.t()));
                acc(*b, self.value(*a).dot(gy));
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, -gy);
            }
            Op::Mul(a, b) => {
                acc(*a, gy * self.value(*b));
                acc(*b, gy * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, gy.clone());
                acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulScalar(a, s) => {
                acc(*a, gy * self.scalar(*s));
                let gs = (gy * self.value(*a)).sum();
                acc(*s, Array2::from_elem((1, 1), gs));
            }
            Op::Scale(a, k) => acc(*a, gy * *k),
            Op::AddIdentity(a, lam) => {
                acc(*a, gy.clone());
                acc(*lam, Array2::from_elem((1, 1), gy.diag().sum()));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, ndarray::Zip::from(gy).and(x).map_collect(|g, x| if *x > 0.0 { *g } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, ndarray::Zip::from(gy).and(x).map_collect(|g, x| g * gelu_grad(*x)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(*a, ndarray::Zip::from(gy).and(x).map_collect(|g, x| g * sigmoid(*x)));
            }
            Op::Sigmoid(a) => {
                acc(*a, ndarray::Zip::from(gy).and(y()).map_collect(|g, s| g * s * (1.0 - s)));
            }
            Op::Exp(a) => acc(*a, gy * y()),
            Op::Log(a) => acc(*a, gy / self.value(*a)),
            Op::Square(a) => acc(*a, gy * self.value(*a) * 2.0),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(
                    *a,
                    ndarray::Zip::from(gy)
                        .and(x)
                        .map_collect(|g, x| if *x >= *lo && *x <= *hi { *g } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = y();
                let mut gx = gy * y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |r, yv| *r -= yv * dot);
                }
                acc(*a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let sm = y().mapv(f64::exp);
                let mut gx = gy.clone();
                for ((mut row, grow), srow) in gx.rows_mut().into_iter().zip(gy.rows()).zip(sm.rows()) {
                    let total = grow.sum();
                    row.zip_mut_with(&srow, |r, s| *r -= s * total);
                }
                acc(*a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                acc(*gamma, (gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gxhat = gy * gv;
                let n = xhat.ncols() as f64;
                let mut gx = Array2::zeros(xhat.dim());
                for (r, ((mut out, gh), xh)) in gx
                    .rows_mut()
                    .into_iter()
                    .zip(gxhat.rows())
                    .zip(xhat.rows())
                    .enumerate()
                {
                    let mean_g = gh.sum() / n;
                    let mean_gx = gh.dot(&xh) / n;
                    let is = inv_std[r];
                    for j in 0..out.len() {
                        out[j] = is * (gh[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                acc(*x, gx);
            }
            Op::RowNormalize { x, norms, guard } => {
                let y = y();
                let mut gx = gy.clone();
                for (r, (mut row, yrow)) in gx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let nrm = norms[r];
                    if nrm > *guard {
                        let dot = row.dot(&yrow);
                        row.zip_mut_with(&yrow, |g, yv| *g = (*g - yv * dot) / nrm);
                    }
                }
                acc(*x, gx);
            }
            Op::SumAll(a) => {
                let g = gy[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), g));
            }
            Op::MeanAll(a) => {
                let sh = self.shape(*a);
                let g = gy[[0, 0]] / (sh.0 * sh.1) as f64;
                acc(*a, Array2::from_elem(sh, g));
            }
            Op::SumCols(a) => {
                let sh = self.shape(*a);
                let mut gx = Array2::zeros(sh);
                for (mut row, g) in gx.rows_mut().into_iter().zip(gy.iter()) {
                    row.fill(*g);
                }
                acc(*a, gx);
            }
            Op::MeanRows(a) => {
                let sh = self.shape(*a);
                let gx = Array2::from_shape_fn(sh, |(_, j)| gy[[0, j]] / sh.0 as f64);
                acc(*a, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    acc(*p, gy.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    acc(*p, gy.slice(s![.., start..start + cols]).to_owned());
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut gx = Array2::zeros(self.shape(*a));
                gx.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                acc(*a, gx);
            }
            Op::SliceCols(a, start) => {
                let mut gx = Array2::zeros(self.shape(*a));
                gx.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                acc(*a, gx);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = gy.iter().copied().collect();
                acc(*a, Array2::from_shape_vec(self.shape(*a), flat).expect("reshape back"));
            }
            Op::Gather(a, index) => {
                let sh = self.shape(*a);
                let mut flat = vec![0.0; sh.0 * sh.1];
                for (g, &src) in gy.iter().zip(index) {
                    flat[src] += g;
                }
                acc(*a, Array2::from_shape_vec(sh, flat).expect("gather back"));
            }
            Op::Transpose(a) => acc(*a, gy.t().to_owned()),
            Op::SolveSpd { a, b, chol } => {
                let gb = from_dmatrix(&chol.solve(&to_dmatrix(gy.view())));
                let x = y();
                acc(*a, -gb.dot(&x.t()));
                acc(*b, gb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::check::{max_rel_error, numeric_param_grad};
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_store(shapes: &[(usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.normal(format!("p{i}"), r, c, 1.0, &mut rng))
            .collect();
        (store, ids)
    }

    fn check(store: &ParamStore, ids: &[ParamId], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let mut g = Graph::new(store);
        let nodes: Vec<_> = ids.iter().map(|p| g.param(*p)).collect();
        let loss = f(&mut g, &nodes);
        let grads = g.backward(loss);
        for &p in ids {
            let numeric = numeric_param_grad(store, p, 1e-5, |s| {
                let mut g = Graph::new(s);
                let nodes: Vec<_> = ids.iter().map(|p| g.param(*p)).collect();
                let l = f(&mut g, &nodes);
                g.scalar(l)
            });
            let analytic = grads.param(p).cloned().unwrap_or_else(|| Array2::zeros(store.get(p).dim()));
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-6, "param {} rel err {err}", store.name(p));
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let (store, ids) = rand_store(&[(3, 4), (4, 2), (5, 4), (3, 2)], 1);
        check(&store, &ids, |g, n| {
            let ab = g.matmul(n[0], n[1]);
            let cn = g.matmul_nt(n[2], n[0]);
            let tn = g.matmul_tn(n[0], n[3]);
            let a = g.sum_all(ab);
            let b = g.square(cn);
            let b = g.mean_all(b);
            let c = g.sum_all(tn);
            let ab2 = g.add(a, b);
            g.add(ab2, c)
        });
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let (store, ids) = rand_store(&[(3, 4), (3, 4), (1, 4), (1, 1)], 2);
        check(&store, &ids, |g, n| {
            let m = g.mul(n[0], n[1]);
            let r = g.add_row(m, n[2]);
            let s = g.mul_scalar(r, n[3]);
            let ge = g.gelu(s);
            let sp = g.softplus(ge);
            let sg = g.sigmoid(n[1]);
            let both = g.sub(sp, sg);
            let ex = g.exp(both);
            let lg = g.log(ex);
            let cols = g.sum_cols(lg);
            let rows = g.mean_rows(lg);
            let a = g.sum_all(cols);
            let b = g.square(rows);
            let b = g.sum_all(b);
            g.add(a, b)
        });
    }

    #[test]
    fn softmax_layernorm_normalize_gradients() {
        let (store, ids) = rand_store(&[(4, 5), (1, 5), (1, 5), (4, 5)], 3);
        check(&store, &ids, |g, n| {
            let ln = g.layer_norm(n[0], n[1], n[2], 1e-5);
            let sm = g.softmax_rows(ln);
            let w = g.mul(sm, n[3]);
            let ls = g.log_softmax_rows(n[3]);
            let nr = g.row_normalize(n[0], 1e-12);
            let nr = g.mul(nr, n[3]);
            let a = g.sum_all(w);
            let b = g.sum_all(ls);
            let c = g.sum_all(nr);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let (store, ids) = rand_store(&[(2, 3), (2, 3), (4, 2)], 4);
        check(&store, &ids, |g, n| {
            let rows = g.concat_rows(&[n[0], n[1]]);
            let cols = g.concat_cols(&[n[0], n[1]]);
            let sr = g.slice_rows(rows, 1, 2);
            let sc = g.slice_cols(cols, 2, 3);
            let both = g.mul(sr, sc);
            let rs = g.reshape(both, 3, 2);
            let t = g.transpose(n[2]);
            let tt = g.matmul(rs, t);
            let ga = g.gather(tt, vec![0, 5, 5, 11, 3, 2], 2, 3);
            let sq = g.square(ga);
            g.sum_all(sq)
        });
    }

    #[test]
    fn solve_and_identity_gradients() {
        let (store, ids) = rand_store(&[(3, 5), (1, 1), (3, 2)], 5);
        check(&store, &ids, |g, n| {
            let gram = g.matmul_nt(n[0], n[0]);
            let lam = g.softplus(n[1]);
            let a = g.add_identity(gram, lam);
            let x = g.solve_spd(a, n[2]);
            let c = g.clamp(n[1], -10.0, 10.0);
            let x = g.mul_scalar(x, c);
            let sq = g.square(x);
            g.sum_all(sq)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut store = ParamStore::new();
        let p = store.add("tau", array![[150.0]]);
        let mut g = Graph::new(&store);
        let n = g.param(p);
        let c = g.clamp(n, 0.1, 100.0);
        assert_eq!(g.scalar(c), 100.0);
        let grads = g.backward(c);
        assert_eq!(grads.param(p).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn zero_rows_pass_through_normalization() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[0.0, 0.0], [3.0, 4.0]]);
        let y = g.row_normalize(x, 1e-12);
        assert_eq!(g.value(y), &array![[0.0, 0.0], [0.6, 0.8]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("w", array![[2.0]]);
        let mut g = Graph::new(&store);
        let c = g.constant(array![[3.0]]);
        let w = g.param(p);
        let y = g.mul(c, w);
        let grads = g.backward(y);
        assert!(grads.node(c).is_none());
        assert_eq!(grads.param(p).unwrap()[[0, 0]], 3.0);
    }
}
