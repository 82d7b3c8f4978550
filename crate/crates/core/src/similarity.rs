//! Reconstruction-based episodic classifier: class-mean support aggregation,
//! ridge reconstruction with a learnable regularizer, calibration, negative
//! mean reconstruction error as the class score, and a temperature softmax.
//! A prototype-distance head is kept alongside as a baseline.

use nalgebra::{Cholesky, DMatrix};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Rows with norm below this are left as they are.
pub const NORM_GUARD: f64 = 1e-12;
pub const TAU_MIN: f64 = 0.1;
pub const TAU_MAX: f64 = 100.0;
pub const DEFAULT_TAU: f64 = 15.0;
pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_EPS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeConstants {
    pub gamma: f64,
    pub eps: f64,
}

impl Default for RidgeConstants {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            eps: DEFAULT_EPS,
        }
    }
}

/// Learnable scalars of the ridge head, each stored `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityParams<T> {
    pub alpha: T,
    pub beta: T,
    pub tau: T,
}

impl SimilarityParams<ParamId> {
    pub fn init(store: &mut ParamStore, tau_init: f64) -> Self {
        Self {
            alpha: store.zeros("head.alpha", 1, 1),
            beta: store.zeros("head.beta", 1, 1),
            tau: store.filled("head.tau", 1, 1, tau_init),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.alpha, self.beta, self.tau]
    }

    pub fn resolve(&self, store: &ParamStore, constants: RidgeConstants) -> HeadScalars {
        HeadScalars::from_raw(
            store.get(self.alpha)[[0, 0]],
            store.get(self.beta)[[0, 0]],
            store.get(self.tau)[[0, 0]],
            constants,
        )
    }
}

/// Derived head scalars: `lambda > 0`, `rho` in `(1, 2)`, clamped `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadScalars {
    pub lambda: f64,
    pub rho: f64,
    pub tau: f64,
}

impl HeadScalars {
    pub fn from_raw(alpha: f64, beta: f64, tau: f64, c: RidgeConstants) -> Self {
        let softplus = if alpha > 30.0 { alpha } else { alpha.exp().ln_1p() };
        Self {
            lambda: softplus * c.gamma + c.eps,
            rho: 1.0 + autograd::sigmoid(beta),
            tau: tau.clamp(TAU_MIN, TAU_MAX),
        }
    }
}

pub fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > NORM_GUARD {
            row /= n;
        }
    }
    out
}

/// Shot mean followed by row normalization.
pub fn aggregate_support(shots: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = shots
        .first()
        .ok_or_else(|| Error::InvalidArgument("support set has no shots".into()))?;
    let mut sum = Array2::zeros(first.dim());
    for s in shots {
        if s.dim() != first.dim() {
            return Err(Error::dim("support feature maps differ in shape"));
        }
        sum += s;
    }
    Ok(normalize_rows(&(sum / shots.len() as f64)))
}

fn to_dm(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dm(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge term must be positive, got {lambda}")));
    }
    Ok(())
}

/// `W = (S^T S + lambda I_d)^-1 S^T S`, via the `r x r` dual form
/// `S^T (S S^T + lambda I_r)^-1 S` when `r < d`.
pub fn reconstruction_matrix(s: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    check_lambda(lambda)?;
    let (r, d) = s.dim();
    if r >= d {
        return reconstruction_matrix_primal(s, lambda);
    }
    let sm = to_dm(s);
    let gram = &sm * sm.transpose() + DMatrix::identity(r, r) * lambda;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::InvalidArgument("ridge system is not positive definite".into()))?;
    let x = chol.solve(&sm);
    Ok(from_dm(&(sm.transpose() * x)))
}

/// Primal `d x d` form of [`reconstruction_matrix`].
pub fn reconstruction_matrix_primal(s: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    check_lambda(lambda)?;
    let d = s.ncols();
    let sm = to_dm(s);
    let sts = sm.transpose() * &sm;
    let a = &sts + DMatrix::identity(d, d) * lambda;
    let chol = Cholesky::new(a).ok_or_else(|| Error::InvalidArgument("ridge system is not positive definite".into()))?;
    Ok(from_dm(&chol.solve(&sts)))
}

/// `rho * F_q W`.
pub fn reconstruct(fq: &Array2<f64>, w: &Array2<f64>, rho: f64) -> Result<Array2<f64>> {
    if fq.ncols() != w.nrows() || w.nrows() != w.ncols() {
        return Err(Error::dim(format!(
            "cannot reconstruct {:?} features with a {:?} matrix",
            fq.dim(),
            w.dim()
        )));
    }
    Ok(fq.dot(w) * rho)
}

/// Negative mean squared row reconstruction error.
pub fn score(fq: &Array2<f64>, fhat: &Array2<f64>) -> Result<f64> {
    if fq.dim() != fhat.dim() {
        return Err(Error::dim("query and reconstruction differ in shape"));
    }
    if fq.nrows() == 0 {
        return Err(Error::dim("empty feature map"));
    }
    let sq: f64 = fq.iter().zip(fhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / fq.nrows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl ClassScores {
    pub fn from_scores(scores: Vec<f64>, tau: f64) -> Self {
        let logits: Vec<f64> = scores.iter().map(|s| tau * s).collect();
        let probabilities = softmax(&logits);
        let predicted = argmax(&scores);
        Self {
            scores,
            probabilities,
            predicted,
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let row = Array2::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row shape");
    autograd::softmax_rows(&row).iter().copied().collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores a query feature map against each class's aggregated support.
pub fn classify(fq: &Array2<f64>, classes: &[Array2<f64>], head: HeadScalars) -> Result<ClassScores> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to score against".into()));
    }
    let fq = normalize_rows(fq);
    let mut scores = Vec::with_capacity(classes.len());
    for s in classes {
        if s.ncols() != fq.ncols() {
            return Err(Error::dim("query and support widths differ"));
        }
        let w = reconstruction_matrix(s, head.lambda)?;
        let fhat = reconstruct(&fq, &w, head.rho)?;
        scores.push(score(&fq, &fhat)?);
    }
    Ok(ClassScores::from_scores(scores, head.tau))
}

/// Graph nodes for `lambda`, `rho` and clamped `tau`.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub lambda: NodeId,
    pub rho: NodeId,
    pub tau: NodeId,
}

pub fn head_nodes(g: &mut Graph, params: &SimilarityParams<ParamId>, c: RidgeConstants) -> HeadNodes {
    let alpha = g.param(params.alpha);
    let sp = g.softplus(alpha);
    let sp = g.scale(sp, c.gamma);
    let eps = g.constant_scalar(c.eps);
    let lambda = g.add(sp, eps);
    let beta = g.param(params.beta);
    let sig = g.sigmoid(beta);
    let one = g.constant_scalar(1.0);
    let rho = g.add(sig, one);
    let tau = g.param(params.tau);
    let tau = g.clamp(tau, TAU_MIN, TAU_MAX);
    HeadNodes { lambda, rho, tau }
}

pub fn aggregate_support_graph(g: &mut Graph, shots: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = shots
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("support set has no shots".into()))?;
    let mut sum = first;
    for &s in rest {
        if g.shape(s) != g.shape(first) {
            return Err(Error::dim("support feature maps differ in shape"));
        }
        sum = g.add(sum, s);
    }
    let mean = g.scale(sum, 1.0 / shots.len() as f64);
    Ok(g.row_normalize(mean, NORM_GUARD))
}

pub fn reconstruction_matrix_graph(g: &mut Graph, s: NodeId, lambda: NodeId) -> NodeId {
    let (r, d) = g.shape(s);
    if r < d {
        let gram = g.matmul_nt(s, s);
        let a = g.add_identity(gram, lambda);
        let x = g.solve_spd(a, s);
        g.matmul_tn(s, x)
    } else {
        let sts = g.matmul_tn(s, s);
        let a = g.add_identity(sts, lambda);
        g.solve_spd(a, sts)
    }
}

/// Class scores for a batch of queries.
///
/// `queries` stacks `n` row-normalized `r x d` maps into an `(n*r) x d`
/// matrix; `classes` are aggregated supports. Returns `n x N` scores.
pub fn ridge_scores_graph(
    g: &mut Graph,
    queries: NodeId,
    r: usize,
    classes: &[NodeId],
    head: HeadNodes,
) -> Result<NodeId> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to score against".into()));
    }
    let (rows, d) = g.shape(queries);
    if r == 0 || rows % r != 0 {
        return Err(Error::dim(format!("{rows} query rows are not a multiple of {r}")));
    }
    let n = rows / r;
    let mut cols = Vec::with_capacity(classes.len());
    for &s in classes {
        if g.shape(s).1 != d {
            return Err(Error::dim("query and support widths differ"));
        }
        let w = reconstruction_matrix_graph(g, s, head.lambda);
        let fw = g.matmul(queries, w);
        let fhat = g.mul_scalar(fw, head.rho);
        let diff = g.sub(queries, fhat);
        let sq = g.square(diff);
        let per_query = g.reshape(sq, n, r * d);
        let err = g.sum_cols(per_query);
        cols.push(g.scale(err, -1.0 / r as f64));
    }
    Ok(g.concat_cols(&cols))
}

/// `tau * scores`, the logits fed to the episodic softmax.
pub fn ridge_logits_graph(
    g: &mut Graph,
    queries: NodeId,
    r: usize,
    classes: &[NodeId],
    head: HeadNodes,
) -> Result<NodeId> {
    let scores = ridge_scores_graph(g, queries, r, classes, head)?;
    Ok(g.mul_scalar(scores, head.tau))
}

/// Negative squared Euclidean distance from each query row (`n x d`) to each
/// prototype row (`N x d`).
pub fn proto_logits_graph(g: &mut Graph, queries: NodeId, prototypes: NodeId) -> Result<NodeId> {
    let (n, d) = g.shape(queries);
    let (c, dp) = g.shape(prototypes);
    if d != dp {
        return Err(Error::dim("query and prototype widths differ"));
    }
    let q2 = g.square(queries);
    let qq = g.sum_cols(q2);
    let p2 = g.square(prototypes);
    let pp = g.sum_cols(p2);
    let ones_c = g.constant(Array2::ones((1, c)));
    let ones_n = g.constant(Array2::ones((n, 1)));
    let qq = g.matmul(qq, ones_c);
    let pp = g.matmul_nt(ones_n, pp);
    let cross = g.matmul_nt(queries, prototypes);
    let cross = g.scale(cross, 2.0);
    let dist = g.add(qq, pp);
    let dist = g.sub(dist, cross);
    Ok(g.scale(dist, -1.0))
}
