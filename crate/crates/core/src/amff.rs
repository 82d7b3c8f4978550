//! Adaptive multi-scale feature fusion.
//!
//! Per level, the three back-projected directional maps are pooled to scalar
//! descriptors, a gating perceptron turns them into softmax weights, and the
//! maps are mixed. A second perceptron weights the per-level results from
//! their pooled descriptors. The fused high-frequency map is stacked with the
//! level-1 low-pass back-projection.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Bindable, Mlp};
use crate::wavelet::{self, Decomposition, DirectionalMaps};

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_GATE_HIDDEN: usize = 16;

/// Softmax outputs of one forward pass plus the descriptors that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    /// `(alpha, beta, gamma)` per level, for `(LH, HL, HH)`.
    pub directional: Vec<[f64; 3]>,
    /// `eta_1..eta_L`.
    pub scale: Vec<f64>,
    pub directional_descriptors: Vec<[f64; 3]>,
    pub scale_descriptors: Vec<f64>,
}

/// Gating perceptrons: one directional MLP per level (3 -> hidden -> 3) and one
/// scale MLP (L -> hidden -> L).
#[derive(Clone, Debug, PartialEq)]
pub struct AmffParams<T> {
    pub directional: Vec<Mlp<T>>,
    pub scale: Mlp<T>,
}

impl AmffParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, levels: usize, hidden: usize, rng: &mut R) -> Self {
        let directional = (1..=levels)
            .map(|l| Mlp::init(store, &format!("amff.dir{l}"), 3, hidden, 3, rng))
            .collect();
        let scale = Mlp::init(store, "amff.scale", levels, hidden, levels, rng);
        Self { directional, scale }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<_> = self.directional.iter().flat_map(|m| m.params()).collect();
        p.extend(self.scale.params());
        p
    }
}

impl AmffParams<Array2<f64>> {
    /// All-zero gates: uniform directional and scale weights.
    pub fn uniform(levels: usize, hidden: usize) -> Self {
        Self {
            directional: (0..levels).map(|_| Mlp::zeros(3, hidden, 3)).collect(),
            scale: Mlp::zeros(levels, hidden, levels),
        }
    }
}

/// Stacked front-end output: channel 0 is the low-pass component, channel 1
/// the fused high-frequency map.
#[derive(Clone, Debug, PartialEq)]
pub struct AmffOutput {
    pub x: Array3<f64>,
    pub gates: GateWeights,
}

impl AmffOutput {
    pub fn low_pass(&self) -> ArrayView2<'_, f64> {
        self.x.index_axis(Axis(0), 0)
    }

    pub fn high_freq(&self) -> ArrayView2<'_, f64> {
        self.x.index_axis(Axis(0), 1)
    }
}

/// Global average of one map.
pub fn map_descriptor(map: &Array2<f64>) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::dim("cannot pool an empty map"));
    }
    Ok(map.sum() / map.len() as f64)
}

/// `(d_LH, d_HL, d_HH)` by global average pooling.
pub fn directional_descriptors(maps: &DirectionalMaps) -> Result<[f64; 3]> {
    Ok([
        map_descriptor(&maps.lh)?,
        map_descriptor(&maps.hl)?,
        map_descriptor(&maps.hh)?,
    ])
}

fn check_mlp(mlp: &Mlp<Array2<f64>>, input: usize, output: usize, what: &str) -> Result<()> {
    let ok = mlp.fc1.weight.nrows() == input
        && mlp.fc2.weight.ncols() == output
        && mlp.fc1.weight.ncols() == mlp.fc2.weight.nrows()
        && mlp.fc1.bias.as_ref().is_none_or(|b| b.dim() == (1, mlp.fc1.weight.ncols()))
        && mlp.fc2.bias.as_ref().is_none_or(|b| b.dim() == (1, output));
    if ok {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{what} perceptron must map {input} -> {output} with consistent hidden width"
        )))
    }
}

fn softmax_mlp(mlp: &Mlp<Array2<f64>>, input: &[f64]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row"));
    let logits = mlp.forward(&mut g, x);
    let p = g.softmax_rows(logits);
    g.value(p).iter().copied().collect()
}

/// Softmax-normalized directional weights `(alpha, beta, gamma)`.
pub fn directional_gate(descriptors: [f64; 3], mlp: &Mlp<Array2<f64>>) -> Result<[f64; 3]> {
    check_mlp(mlp, 3, 3, "directional gate")?;
    let w = softmax_mlp(mlp, &descriptors);
    Ok([w[0], w[1], w[2]])
}

/// `alpha * LH + beta * HL + gamma * HH`.
pub fn fuse_directions(
    lh: &Array2<f64>,
    hl: &Array2<f64>,
    hh: &Array2<f64>,
    gate: [f64; 3],
) -> Result<Array2<f64>> {
    if lh.dim() != hl.dim() || lh.dim() != hh.dim() {
        return Err(Error::dim("directional maps must share a shape"));
    }
    Ok(lh * gate[0] + hl * gate[1] + hh * gate[2])
}

/// Softmax-normalized scale weights `eta_1..eta_L`.
pub fn scale_gate(descriptors: &[f64], mlp: &Mlp<Array2<f64>>) -> Result<Vec<f64>> {
    if descriptors.is_empty() {
        return Err(Error::dim("scale gate needs at least one level"));
    }
    check_mlp(mlp, descriptors.len(), descriptors.len(), "scale gate")?;
    Ok(softmax_mlp(mlp, descriptors))
}

/// `sum_l eta_l * fused_l`.
pub fn fuse_scales(levels: &[Array2<f64>], eta: &[f64]) -> Result<Array2<f64>> {
    let first = levels
        .first()
        .ok_or_else(|| Error::dim("no levels to fuse"))?;
    if levels.len() != eta.len() {
        return Err(Error::dim(format!(
            "{} maps but {} scale weights",
            levels.len(),
            eta.len()
        )));
    }
    let mut out = Array2::zeros(first.dim());
    for (m, &e) in levels.iter().zip(eta) {
        if m.dim() != first.dim() {
            return Err(Error::dim("per-level maps must share a shape"));
        }
        out.scaled_add(e, m);
    }
    Ok(out)
}

/// Constant inputs to the gated fusion for one image, laid out as pixel
/// columns (`H*W x k`, row-major pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct AmffInput {
    pub dim: (usize, usize),
    /// Level-1 low-pass back-projection, `H*W x 1`.
    pub low_pass: Array2<f64>,
    /// Per level, `(LH, HL, HH)` back-projections as `H*W x 3`.
    pub level_maps: Vec<Array2<f64>>,
    pub descriptors: Vec<[f64; 3]>,
}

fn column(map: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec((map.len(), 1), map.iter().copied().collect()).expect("column")
}

impl AmffInput {
    pub fn from_image(image: ArrayView2<f64>, levels: usize) -> Result<Self> {
        Self::from_decomposition(&wavelet::decompose(image, levels)?)
    }

    pub fn from_decomposition(d: &Decomposition) -> Result<Self> {
        let (h, w) = d.input_dim;
        let level_maps = d
            .directional
            .iter()
            .map(|m| {
                let mut a = Array2::zeros((h * w, 3));
                for (c, map) in [&m.lh, &m.hl, &m.hh].into_iter().enumerate() {
                    a.column_mut(c).assign(&ndarray::Array1::from_iter(map.iter().copied()));
                }
                a
            })
            .collect();
        let descriptors = d
            .directional
            .iter()
            .map(directional_descriptors)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: d.input_dim,
            low_pass: column(&d.low_pass),
            level_maps,
            descriptors,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.level_maps.len()
    }

    /// Equal-weight high-frequency map (every gate uniform), `H*W x 1`.
    pub fn uniform_high_freq(&self) -> Array2<f64> {
        let l = self.level_maps.len() as f64;
        let mut out = Array2::zeros((self.low_pass.nrows(), 1));
        for m in &self.level_maps {
            let s = m.sum_axis(Axis(1)).insert_axis(Axis(1));
            out.scaled_add(1.0 / (3.0 * l), &s);
        }
        out
    }
}

/// Graph handles produced by [`amff_graph`].
#[derive(Clone, Debug)]
pub struct AmffNodes {
    /// `H*W x 1`.
    pub low_pass: NodeId,
    /// `H*W x 1`.
    pub high_freq: NodeId,
    /// `1 x 3` per level.
    pub directional_gates: Vec<NodeId>,
    /// `1 x L`.
    pub scale_gate: NodeId,
    /// `1 x L`.
    pub scale_descriptors: NodeId,
}

/// Differentiable gated fusion over precomputed constant maps.
pub fn amff_graph<T: Bindable>(g: &mut Graph, input: &AmffInput, params: &AmffParams<T>) -> Result<AmffNodes> {
    let levels = input.num_levels();
    if params.directional.len() != levels {
        return Err(Error::Config(format!(
            "{} directional gates configured for {levels} levels",
            params.directional.len()
        )));
    }
    let mut fused = Vec::with_capacity(levels);
    let mut gates = Vec::with_capacity(levels);
    let mut pooled = Vec::with_capacity(levels);
    for (l, mlp) in params.directional.iter().enumerate() {
        let d = input.descriptors[l];
        let desc = g.constant(Array2::from_shape_vec((1, 3), d.to_vec()).expect("row"));
        let logits = mlp.forward(g, desc);
        let gate = g.softmax_rows(logits);
        let maps = g.constant(input.level_maps[l].clone());
        let f = g.matmul_nt(maps, gate);
        pooled.push(g.mean_all(f));
        fused.push(f);
        gates.push(gate);
    }
    let scale_descriptors = g.concat_cols(&pooled);
    let logits = params.scale.forward(g, scale_descriptors);
    let scale_gate = g.softmax_rows(logits);
    let stacked = g.concat_cols(&fused);
    let high_freq = g.matmul_nt(stacked, scale_gate);
    let low_pass = g.constant(input.low_pass.clone());
    Ok(AmffNodes {
        low_pass,
        high_freq,
        directional_gates: gates,
        scale_gate,
        scale_descriptors,
    })
}

/// Reads the gate values of a finished forward pass.
pub fn read_gates(g: &Graph, input: &AmffInput, nodes: &AmffNodes) -> GateWeights {
    let directional = nodes
        .directional_gates
        .iter()
        .map(|n| {
            let v = g.value(*n);
            [v[[0, 0]], v[[0, 1]], v[[0, 2]]]
        })
        .collect();
    GateWeights {
        directional,
        scale: g.value(nodes.scale_gate).iter().copied().collect(),
        directional_descriptors: input.descriptors.clone(),
        scale_descriptors: g.value(nodes.scale_descriptors).iter().copied().collect(),
    }
}

/// Full front-end: cascade, back-projection, directional and scale gating,
/// stacking with the level-1 low-pass map.
pub fn amff_forward(
    image: ArrayView2<f64>,
    levels: usize,
    params: &AmffParams<Array2<f64>>,
) -> Result<AmffOutput> {
    for mlp in &params.directional {
        check_mlp(mlp, 3, 3, "directional gate")?;
    }
    check_mlp(&params.scale, levels, levels, "scale gate")?;
    let input = AmffInput::from_image(image, levels)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let nodes = amff_graph(&mut g, &input, params)?;
    let (h, w) = input.dim;
    let mut x = Array3::zeros((2, h, w));
    for (c, n) in [nodes.low_pass, nodes.high_freq].into_iter().enumerate() {
        let v = g.value(n);
        x.index_axis_mut(Axis(0), c)
            .assign(&Array2::from_shape_vec((h, w), v.iter().copied().collect()).expect("map"));
    }
    Ok(AmffOutput {
        x,
        gates: read_gates(&g, &input, &nodes),
    })
}
