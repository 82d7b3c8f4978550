//! Cross-domain attention between the spatial and frequency token streams,
//! residual enhancement, and softmax-weighted adaptive fusion.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::backbone::{DomainTag, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{Bindable, Mlp};

pub const DEFAULT_FUSION_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams<T> {
    pub wq_s: T,
    pub wk_f: T,
    pub wv_f: T,
    pub wq_f: T,
    pub wk_s: T,
    pub wv_s: T,
    /// `2d -> hidden -> 2` perceptron producing the fusion logits.
    pub fusion: Mlp<T>,
}

impl CrossAttnParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut R) -> Self {
        let mut sq = |name: &str| store.uniform_fan_in(format!("fuse.{name}"), d, d, rng);
        let (wq_s, wk_f, wv_f) = (sq("wq_s"), sq("wk_f"), sq("wv_f"));
        let (wq_f, wk_s, wv_s) = (sq("wq_f"), sq("wk_s"), sq("wv_s"));
        Self {
            wq_s,
            wk_f,
            wv_f,
            wq_f,
            wk_s,
            wv_s,
            fusion: Mlp::init(store, "fuse.mlp", 2 * d, hidden, 2, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.wq_s, self.wk_f, self.wv_f, self.wq_f, self.wk_s, self.wv_s];
        p.extend(self.fusion.params());
        p
    }
}

impl CrossAttnParams<Array2<f64>> {
    pub fn identity(d: usize, hidden: usize) -> Self {
        let eye = Array2::eye(d);
        Self {
            wq_s: eye.clone(),
            wk_f: eye.clone(),
            wv_f: eye.clone(),
            wq_f: eye.clone(),
            wk_s: eye.clone(),
            wv_s: eye,
            fusion: Mlp::zeros(2 * d, hidden, 2),
        }
    }
}

pub struct Attention {
    pub output: NodeId,
    /// Row-stochastic weights, one matrix per head.
    pub weights: Vec<NodeId>,
}

/// Multi-head `softmax(Q K^T / sqrt(d_h)) V` with `d_h = width / heads`.
pub fn scaled_attention_graph(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<Attention> {
    let (nq, dq) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, dv) = g.shape(v);
    if dq != dk || nk != nv || dv != dq {
        return Err(Error::dim(format!(
            "attention shapes Q {nq}x{dq}, K {nk}x{dk}, V {nv}x{dv} are incompatible"
        )));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::Config(format!("head count {heads} must divide width {dq}")));
    }
    let dh = dq / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let logits = g.matmul_nt(qh, kh);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let a = g.softmax_rows(logits);
        outs.push(g.matmul(a, vh));
        weights.push(a);
    }
    let output = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(Attention { output, weights })
}

/// Single-head attention on plain matrices.
pub fn scaled_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let att = scaled_attention_graph(&mut g, q, k, v, 1)?;
    Ok(g.value(att.output).clone())
}

pub struct CrossNodes {
    /// Spatial queries attending to frequency keys/values.
    pub phi_sf: NodeId,
    /// Frequency queries attending to spatial keys/values.
    pub phi_fs: NodeId,
    pub weights: Vec<NodeId>,
}

pub fn cross_domain_graph<T: Bindable>(
    g: &mut Graph,
    phi_s: NodeId,
    phi_f: NodeId,
    params: &CrossAttnParams<T>,
    heads: usize,
) -> Result<CrossNodes> {
    let ws = g.shape(phi_s).1;
    let wf = g.shape(phi_f).1;
    if ws != wf {
        return Err(Error::dim(format!("stream widths differ: {ws} vs {wf}")));
    }
    let wd = params.wq_s.dim(g.store());
    if wd != (ws, ws) {
        return Err(Error::dim(format!("projection maps are {wd:?}, streams have width {ws}")));
    }
    let proj = |g: &mut Graph, x: NodeId, w: &T| {
        let w = w.bind(g);
        g.matmul(x, w)
    };
    let q_s = proj(g, phi_s, &params.wq_s);
    let k_f = proj(g, phi_f, &params.wk_f);
    let v_f = proj(g, phi_f, &params.wv_f);
    let q_f = proj(g, phi_f, &params.wq_f);
    let k_s = proj(g, phi_s, &params.wk_s);
    let v_s = proj(g, phi_s, &params.wv_s);
    let sf = scaled_attention_graph(g, q_s, k_f, v_f, heads)?;
    let fs = scaled_attention_graph(g, q_f, k_s, v_s, heads)?;
    let mut weights = sf.weights;
    weights.extend(fs.weights);
    Ok(CrossNodes {
        phi_sf: sf.output,
        phi_fs: fs.output,
        weights,
    })
}

pub fn cross_domain(
    phi_s: &Array2<f64>,
    phi_f: &Array2<f64>,
    params: &CrossAttnParams<Array2<f64>>,
    heads: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = g.constant(phi_s.clone());
    let f = g.constant(phi_f.clone());
    let out = cross_domain_graph(&mut g, s, f, params, heads)?;
    Ok((g.value(out.phi_sf).clone(), g.value(out.phi_fs).clone()))
}

/// Returns `(omega_s, omega_f)` with `omega_f = phi_f + phi_sf` and
/// `omega_s = phi_s + phi_fs`.
pub fn residual_enhance_graph(
    g: &mut Graph,
    phi_s: NodeId,
    phi_f: NodeId,
    phi_sf: NodeId,
    phi_fs: NodeId,
) -> Result<(NodeId, NodeId)> {
    if g.shape(phi_f) != g.shape(phi_sf) || g.shape(phi_s) != g.shape(phi_fs) {
        return Err(Error::dim("residual operands differ in shape"));
    }
    let omega_f = g.add(phi_f, phi_sf);
    let omega_s = g.add(phi_s, phi_fs);
    Ok((omega_s, omega_f))
}

pub fn residual_enhance(
    phi_s: &Array2<f64>,
    phi_f: &Array2<f64>,
    phi_sf: &Array2<f64>,
    phi_fs: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if phi_f.dim() != phi_sf.dim() || phi_s.dim() != phi_fs.dim() {
        return Err(Error::dim("residual operands differ in shape"));
    }
    Ok((phi_s + phi_fs, phi_f + phi_sf))
}

pub struct FuseNodes {
    pub fused: NodeId,
    /// `1 x 2` softmax weights `(omega_1, omega_2)`.
    pub omega: NodeId,
}

/// `fused = w1 * omega_f + w2 * omega_s`, with `(w1, w2)` from the fusion
/// perceptron applied to the token-mean descriptors of both streams.
pub fn adaptive_fuse_graph<T: Bindable>(
    g: &mut Graph,
    omega_f: NodeId,
    omega_s: NodeId,
    mlp: &Mlp<T>,
) -> Result<FuseNodes> {
    if g.shape(omega_f) != g.shape(omega_s) {
        return Err(Error::dim("fusion operands differ in shape"));
    }
    let d = g.shape(omega_f).1;
    if mlp.input_dim(g.store()) != 2 * d || mlp.output_dim(g.store()) != 2 {
        return Err(Error::dim(format!("fusion perceptron must map {} -> 2", 2 * d)));
    }
    let mf = g.mean_rows(omega_f);
    let ms = g.mean_rows(omega_s);
    let desc = g.concat_cols(&[mf, ms]);
    let logits = mlp.forward(g, desc);
    let omega = g.softmax_rows(logits);
    let w1 = g.slice_cols(omega, 0, 1);
    let w2 = g.slice_cols(omega, 1, 1);
    let a = g.mul_scalar(omega_f, w1);
    let b = g.mul_scalar(omega_s, w2);
    let fused = g.add(a, b);
    Ok(FuseNodes { fused, omega })
}

pub fn adaptive_fuse(
    omega_f: &Array2<f64>,
    omega_s: &Array2<f64>,
    mlp: &Mlp<Array2<f64>>,
) -> Result<(Array2<f64>, [f64; 2])> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = g.constant(omega_f.clone());
    let s = g.constant(omega_s.clone());
    let out = adaptive_fuse_graph(&mut g, f, s, mlp)?;
    let w = g.value(out.omega);
    Ok((g.value(out.fused).clone(), [w[[0, 0]], w[[0, 1]]]))
}

/// Graph handles kept for inspection after a fusion pass.
#[derive(Clone, Debug)]
pub struct FuseTrace {
    pub omega: NodeId,
    pub attention: Vec<NodeId>,
}

/// Splits by domain tag, fuses, and writes the fused stream into both domain
/// slots. CLS is carried through unchanged unless `fuse_cls` is set, in which
/// case it is prepended to both streams and its slot takes the fused CLS row.
pub fn fuse_block<T: Bindable>(
    g: &mut Graph,
    seq: &TokenSequence,
    params: &CrossAttnParams<T>,
    heads: usize,
    fuse_cls: bool,
) -> Result<(TokenSequence, FuseTrace)> {
    let missing = |tag| Error::InvalidArgument(format!("token sequence has no {tag:?} tokens"));
    let rs = seq.range(DomainTag::Spatial).ok_or_else(|| missing(DomainTag::Spatial))?;
    let rf = seq.range(DomainTag::Frequency).ok_or_else(|| missing(DomainTag::Frequency))?;
    let rc = seq.range(DomainTag::Cls);
    if rs.len() != rf.len() {
        return Err(Error::dim("spatial and frequency streams differ in length"));
    }
    let x = seq.tokens;
    let mut phi_s = g.slice_rows(x, rs.start, rs.len());
    let mut phi_f = g.slice_rows(x, rf.start, rf.len());
    let cls = rc.as_ref().map(|r| g.slice_rows(x, r.start, r.len()));
    if fuse_cls {
        let c = cls.ok_or_else(|| missing(DomainTag::Cls))?;
        phi_s = g.concat_rows(&[c, phi_s]);
        phi_f = g.concat_rows(&[c, phi_f]);
    }
    let cross = cross_domain_graph(g, phi_s, phi_f, params, heads)?;
    let (omega_s, omega_f) = residual_enhance_graph(g, phi_s, phi_f, cross.phi_sf, cross.phi_fs)?;
    let fused = adaptive_fuse_graph(g, omega_f, omega_s, &params.fusion)?;

    let (cls_row, body) = if fuse_cls {
        let t = rs.len();
        (Some(g.slice_rows(fused.fused, 0, 1)), g.slice_rows(fused.fused, 1, t))
    } else {
        (cls, fused.fused)
    };
    // Rebuild in tag order.
    let mut parts = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        let tag = seq.tags[i];
        let len = seq.tags[i..].iter().take_while(|t| **t == tag).count();
        parts.push(match tag {
            DomainTag::Cls => cls_row.expect("CLS range present"),
            DomainTag::Spatial | DomainTag::Frequency => body,
        });
        i += len;
    }
    let tokens = g.concat_rows(&parts);
    Ok((
        seq.with_tokens(tokens),
        FuseTrace {
            omega: fused.omega,
            attention: cross.weights,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{numeric_param_grad, rel_error};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Loop-based single-head attention.
    fn attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let d = q.ncols() as f64;
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for i in 0..q.nrows() {
            let logits: Vec<f64> = (0..k.nrows())
                .map(|j| (0..q.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / d.sqrt())
                .collect();
            let w = softmax(&logits);
            for j in 0..k.nrows() {
                for c in 0..v.ncols() {
                    out[[i, c]] += w[j] * v[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn single_row_attention_returns_value() {
        let out = scaled_attention(&array![[0.3, -2.0]], &array![[5.0, 1.0]], &array![[7.0, 8.0]]).unwrap();
        assert_eq!(out, array![[7.0, 8.0]]);
    }

    #[test]
    fn identical_keys_average_values() {
        let k = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let v = array![[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]];
        let out = scaled_attention(&array![[0.4, -1.0]], &k, &v).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 1]], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn two_by_two_hand_case() {
        let out = scaled_attention(&array![[1.0, 0.0]], &Array2::eye(2), &Array2::eye(2)).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        assert_abs_diff_eq!(out[[0, 0]], w0, epsilon = 1e-6);
        assert_abs_diff_eq!(out[[0, 1]], 1.0 - w0, epsilon = 1e-6);
        assert!(scaled_attention(&array![[1.0, 0.0]], &array![[1.0, 0.0, 0.0]], &Array2::eye(2)).is_err());
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_mat(3, 4, &mut rng), rand_mat(5, 4, &mut rng), rand_mat(5, 4, &mut rng));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let att = scaled_attention_graph(&mut g, qn, kn, vn, 2).unwrap();
        let out = g.value(att.output);
        for h in 0..2 {
            let s = ndarray::s![.., 2 * h..2 * h + 2];
            let want = attention_oracle(&q.slice(s).to_owned(), &k.slice(s).to_owned(), &v.slice(s).to_owned());
            for i in 0..3 {
                for c in 0..2 {
                    assert_abs_diff_eq!(out[[i, 2 * h + c]], want[[i, c]], epsilon = 1e-12);
                }
            }
            for row in g.value(att.weights[h]).rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
        assert!(scaled_attention_graph(&mut g, qn, kn, vn, 3).is_err());
    }

    #[test]
    fn identity_maps_single_token_swap_streams() {
        let p = CrossAttnParams::identity(3, 4);
        let s = array![[1.0, 2.0, 3.0]];
        let f = array![[-1.0, 0.5, 0.0]];
        let (sf, fs) = cross_domain(&s, &f, &p, 1).unwrap();
        assert_eq!(sf, f);
        assert_eq!(fs, s);
        let mut zero_v = p.clone();
        zero_v.wv_f = Array2::zeros((3, 3));
        zero_v.wv_s = Array2::zeros((3, 3));
        let (sf, fs) = cross_domain(&s, &f, &zero_v, 1).unwrap();
        assert!(sf.iter().chain(fs.iter()).all(|&x| x == 0.0));
        assert!(cross_domain(&s, &array![[1.0, 2.0]], &p, 1).is_err());
    }

    #[test]
    fn two_token_cross_attention_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let mut p = CrossAttnParams::identity(d, 4);
        for w in [&mut p.wq_s, &mut p.wk_f, &mut p.wv_f, &mut p.wq_f, &mut p.wk_s, &mut p.wv_s] {
            *w = rand_mat(d, d, &mut rng) * 0.3;
        }
        let s = rand_mat(2, d, &mut rng);
        let f = rand_mat(2, d, &mut rng);
        let (sf, fs) = cross_domain(&s, &f, &p, 1).unwrap();
        let want_sf = attention_oracle(&s.dot(&p.wq_s), &f.dot(&p.wk_f), &f.dot(&p.wv_f));
        let want_fs = attention_oracle(&f.dot(&p.wq_f), &s.dot(&p.wk_s), &s.dot(&p.wv_s));
        for (a, b) in sf.iter().zip(want_sf.iter()).chain(fs.iter().zip(want_fs.iter())) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn residual_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, f) = (rand_mat(2, 3, &mut rng), rand_mat(2, 3, &mut rng));
        let z = Array2::zeros((2, 3));
        let (os, of) = residual_enhance(&s, &f, &z, &z).unwrap();
        assert_eq!((os, of.clone()), (s.clone(), f.clone()));
        let (_, of) = residual_enhance(&s, &f, &(-&f), &z).unwrap();
        assert!(of.iter().all(|&x| x == 0.0));
        let (sf, fs) = (rand_mat(2, 3, &mut rng), rand_mat(2, 3, &mut rng));
        let (os, of) = residual_enhance(&s, &f, &sf, &fs).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(of[[i, j]], f[[i, j]] + sf[[i, j]]);
                assert_eq!(os[[i, j]], s[[i, j]] + fs[[i, j]]);
            }
        }
        assert!(residual_enhance(&s, &f, &Array2::zeros((1, 3)), &fs).is_err());
    }

    #[test]
    fn zero_fusion_mlp_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (of, os) = (rand_mat(3, 2, &mut rng), rand_mat(3, 2, &mut rng));
        let (fused, w) = adaptive_fuse(&of, &os, &Mlp::zeros(4, 16, 2)).unwrap();
        assert_eq!(w, [0.5, 0.5]);
        for ((a, b), c) in of.iter().zip(os.iter()).zip(fused.iter()) {
            assert_abs_diff_eq!(*c, (a + b) / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn equal_streams_fuse_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_mat(3, 2, &mut rng);
        let mlp = Mlp::from_weights(rand_mat(4, 3, &mut rng), rand_mat(1, 3, &mut rng), rand_mat(3, 2, &mut rng), rand_mat(1, 2, &mut rng));
        let (fused, w) = adaptive_fuse(&m, &m, &mlp).unwrap();
        assert_abs_diff_eq!(w[0] + w[1], 1.0, epsilon = 1e-12);
        for (a, b) in fused.iter().zip(m.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tiny_fusion_mlp_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (of, os) = (rand_mat(2, 2, &mut rng), rand_mat(2, 2, &mut rng));
        let (w1, b1) = (rand_mat(4, 2, &mut rng), rand_mat(1, 2, &mut rng));
        let (w2, b2) = (rand_mat(2, 2, &mut rng), rand_mat(1, 2, &mut rng));
        let mlp = Mlp::from_weights(w1.clone(), b1.clone(), w2.clone(), b2.clone());
        let (fused, w) = adaptive_fuse(&of, &os, &mlp).unwrap();

        let desc = [
            (of[[0, 0]] + of[[1, 0]]) / 2.0,
            (of[[0, 1]] + of[[1, 1]]) / 2.0,
            (os[[0, 0]] + os[[1, 0]]) / 2.0,
            (os[[0, 1]] + os[[1, 1]]) / 2.0,
        ];
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let hidden: Vec<f64> = (0..2)
            .map(|j| gelu(b1[[0, j]] + (0..4).map(|i| desc[i] * w1[[i, j]]).sum::<f64>()))
            .collect();
        let logits: Vec<f64> = (0..2)
            .map(|j| b2[[0, j]] + (0..2).map(|i| hidden[i] * w2[[i, j]]).sum::<f64>())
            .collect();
        let want = softmax(&logits);
        assert_abs_diff_eq!(w[0], want[0], epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], want[1], epsilon = 1e-6);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(fused[[i, j]], want[0] * of[[i, j]] + want[1] * os[[i, j]], epsilon = 1e-6);
            }
        }
        assert!(adaptive_fuse(&of, &Array2::zeros((3, 2)), &mlp).is_err());
    }

    fn sequence(g: &mut Graph, cls: &Array2<f64>, s: &Array2<f64>, f: &Array2<f64>) -> TokenSequence {
        let t = s.nrows();
        let all = ndarray::concatenate![ndarray::Axis(0), cls.view(), s.view(), f.view()];
        let mut tags = vec![DomainTag::Cls];
        tags.extend(vec![DomainTag::Spatial; t]);
        tags.extend(vec![DomainTag::Frequency; t]);
        TokenSequence { tokens: g.constant(all), tags, grid: (1, t) }
    }

    #[test]
    fn equal_single_tokens_pass_through() {
        let p = CrossAttnParams::identity(3, 4);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let tok = array![[0.2, -0.4, 1.0]];
        let seq = sequence(&mut g, &array![[9.0, 8.0, 7.0]], &tok, &tok);
        let (out, _) = fuse_block(&mut g, &seq, &p, 1, false).unwrap();
        // identity attention doubles each stream through the residual
        let v = g.value(out.tokens);
        assert_eq!(v.row(0), array![9.0, 8.0, 7.0]);
        for r in 1..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(v[[r, j]], 2.0 * tok[[0, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_values_and_zero_mlp_average_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = CrossAttnParams::identity(4, 4);
        p.wv_f = Array2::zeros((4, 4));
        p.wv_s = Array2::zeros((4, 4));
        let (cls, s, f) = (rand_mat(1, 4, &mut rng), rand_mat(3, 4, &mut rng), rand_mat(3, 4, &mut rng));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, &cls, &s, &f);
        let (out, trace) = fuse_block(&mut g, &seq, &p, 2, false).unwrap();
        let v = g.value(out.tokens);
        assert_eq!(v.dim(), (7, 4));
        assert_eq!(v.row(0), cls.row(0));
        let avg = (&f + &s) / 2.0;
        for t in 0..3 {
            for j in 0..4 {
                assert_abs_diff_eq!(v[[1 + t, j]], avg[[t, j]], epsilon = 1e-12);
                assert_abs_diff_eq!(v[[4 + t, j]], avg[[t, j]], epsilon = 1e-12);
            }
        }
        let w = g.value(trace.omega);
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fused_cls_variant_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CrossAttnParams::identity(4, 4);
        let (cls, s, f) = (rand_mat(1, 4, &mut rng), rand_mat(2, 4, &mut rng), rand_mat(2, 4, &mut rng));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, &cls, &s, &f);
        let (out, _) = fuse_block(&mut g, &seq, &p, 1, true).unwrap();
        assert_eq!(g.shape(out.tokens), (5, 4));
        assert_ne!(g.value(out.tokens).row(0), cls.row(0));
    }

    #[test]
    fn missing_domain_is_rejected() {
        let p = CrossAttnParams::identity(2, 4);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = g.constant(Array2::zeros((3, 2)));
        let seq = TokenSequence { tokens: t, tags: vec![DomainTag::Cls, DomainTag::Spatial, DomainTag::Spatial], grid: (1, 2) };
        assert!(fuse_block(&mut g, &seq, &p, 1, false).is_err());
    }

    #[test]
    fn fuse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let mut store = ParamStore::new();
        let params = CrossAttnParams::init(&mut store, d, 6, &mut rng);
        let (cls, s, f) = (rand_mat(1, d, &mut rng), rand_mat(2, d, &mut rng), rand_mat(2, d, &mut rng));
        let proj = rand_mat(5, d, &mut rng);
        let loss = |store: &ParamStore| -> (f64, Option<crate::autograd::ParamGrads>) {
            let mut g = Graph::new(store);
            let seq = sequence(&mut g, &cls, &s, &f);
            let (out, _) = fuse_block(&mut g, &seq, &params, 2, false).unwrap();
            let w = g.constant(proj.clone());
            let m = g.mul(out.tokens, w);
            let l = g.sum_all(m);
            (g.scalar(l), Some(g.backward(l).into_params()))
        };
        let (_, grads) = loss(&store);
        let grads = grads.unwrap();
        for pid in params.params() {
            let num = numeric_param_grad(&store, pid, 1e-5, |st| loss(st).0);
            let ana = grads.get(pid).expect("gradient present");
            for (a, n) in ana.iter().zip(num.iter()) {
                assert!(rel_error(*a, *n) < 1e-4, "{}: {a} vs {n}", store.name(pid));
            }
        }
    }
}
