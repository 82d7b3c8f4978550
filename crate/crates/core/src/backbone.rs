//! Compact transformer encoder over separate spatial and frequency token
//! streams: pointwise domain projections, per-domain patch embedding, a
//! learnable CLS token, learned positional encodings with dropout, pre-norm
//! encoder blocks, and an insertion point for the cross-domain fusion block.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::acasff::{self, CrossAttnParams, FuseTrace};
use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Bindable, LayerNorm, Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Cls,
    Spatial,
    Frequency,
}

/// Token matrix on a graph plus per-row domain tags.
///
/// Tags are laid out as `[CLS, spatial.., frequency..]` and never change
/// through encoder or fusion blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: NodeId,
    pub tags: Vec<DomainTag>,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Row range holding `tag`, if present and contiguous.
    pub fn range(&self, tag: DomainTag) -> Option<Range<usize>> {
        let start = self.tags.iter().position(|t| *t == tag)?;
        let len = self.tags[start..].iter().take_while(|t| **t == tag).count();
        if self.tags[start + len..].contains(&tag) {
            return None;
        }
        Some(start..start + len)
    }

    pub fn with_tokens(&self, tokens: NodeId) -> Self {
        Self {
            tokens,
            tags: self.tags.clone(),
            grid: self.grid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneDims {
    pub image_size: usize,
    pub patch_size: usize,
    pub low_channels: usize,
    pub high_channels: usize,
    pub proj_channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dual_stream: bool,
    pub pos_init_std: f64,
}

impl BackboneDims {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn tokens_per_domain(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.tokens_per_domain() * if self.dual_stream { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T> {
    pub proj_spatial: Linear<T>,
    pub proj_freq: Option<Linear<T>>,
    pub patch_spatial: Linear<T>,
    pub patch_freq: Option<Linear<T>>,
    pub cls: T,
    pub pos: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln: LayerNorm<T>,
}

impl BlockParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d),
            q: Linear::init(store, &format!("{name}.attn.q"), d, d, true, rng),
            k: Linear::init(store, &format!("{name}.attn.k"), d, d, true, rng),
            v: Linear::init(store, &format!("{name}.attn.v"), d, d, true, rng),
            o: Linear::init(store, &format!("{name}.attn.o"), d, d, true, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d),
            mlp: Mlp::init(store, &format!("{name}.mlp"), d, hidden, d, rng),
        }
    }
}

impl BackboneParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, dims: &BackboneDims, rng: &mut R) -> Self {
        let p2 = dims.patch_size * dims.patch_size * dims.proj_channels;
        let d = dims.d_model;
        let embed = EmbedParams {
            proj_spatial: Linear::init(store, "embed.proj_s", dims.low_channels, dims.proj_channels, true, rng),
            proj_freq: dims
                .dual_stream
                .then(|| Linear::init(store, "embed.proj_f", dims.high_channels, dims.proj_channels, true, rng)),
            patch_spatial: Linear::init(store, "embed.patch_s", p2, d, true, rng),
            patch_freq: dims
                .dual_stream
                .then(|| Linear::init(store, "embed.patch_f", p2, d, true, rng)),
            cls: store.normal("embed.cls", 1, d, dims.pos_init_std, rng),
            pos: store.normal("embed.pos", dims.num_tokens(), d, dims.pos_init_std, rng),
        };
        let blocks = (0..dims.depth)
            .map(|i| BlockParams::init(store, &format!("block{i}"), d, dims.mlp_hidden, rng))
            .collect();
        Self {
            embed,
            blocks,
            final_ln: LayerNorm::init(store, "final_ln", d),
        }
    }
}

/// Pointwise (1x1) projections of the low- and high-frequency channel groups,
/// inputs as `H*W x C` pixel matrices.
pub fn project_domains<T: Bindable>(
    g: &mut Graph,
    low: NodeId,
    high: Option<NodeId>,
    params: &EmbedParams<T>,
) -> Result<(NodeId, Option<NodeId>)> {
    let check = |g: &Graph, x: NodeId, lin: &Linear<T>| {
        let want = lin.weight.dim(g.store()).0;
        let got = g.shape(x).1;
        if want != got {
            Err(Error::dim(format!("projection expects {want} channels, got {got}")))
        } else {
            Ok(())
        }
    };
    check(g, low, &params.proj_spatial)?;
    let fs = params.proj_spatial.forward(g, low);
    let ff = match (high, &params.proj_freq) {
        (Some(h), Some(p)) => {
            check(g, h, p)?;
            Some(p.forward(g, h))
        }
        (None, _) => None,
        (Some(_), None) => return Err(Error::Config("no frequency projection configured".into())),
    };
    Ok((fs, ff))
}

/// Flat index map turning an `H*W x C` pixel matrix into `T x (p*p*C)` patches.
pub fn patch_index(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::dim(format!("{h}x{w} map is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for pi in 0..gh {
        for pj in 0..gw {
            for u in 0..p {
                for v in 0..p {
                    let pix = (pi * p + u) * w + pj * p + v;
                    for ch in 0..c {
                        idx.push(pix * c + ch);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Dropout applied to the embedded sequence in training mode.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Patch-embeds each domain's channel group of the concatenated map `f`
/// (`H*W x (C_s + C_f)`), prepends CLS and adds positional encodings.
pub fn embed<T: Bindable, R: Rng>(
    g: &mut Graph,
    f: NodeId,
    dims: &BackboneDims,
    params: &EmbedParams<T>,
    dropout: Option<Dropout<'_, R>>,
) -> Result<TokenSequence> {
    let (h, w) = (dims.image_size, dims.image_size);
    let c = dims.proj_channels;
    let (rows, cols) = g.shape(f);
    let groups = if dims.dual_stream { 2 } else { 1 };
    if rows != h * w || cols != c * groups {
        return Err(Error::dim(format!(
            "embedding expects a {}x{} map, got {rows}x{cols}",
            h * w,
            c * groups
        )));
    }
    let idx = patch_index(h, w, c, dims.patch_size)?;
    let t = dims.tokens_per_domain();
    let width = dims.patch_size * dims.patch_size * c;
    let mut parts = vec![params.cls.bind(g)];
    let mut tags = vec![DomainTag::Cls];

    let fs = if groups == 1 { f } else { g.slice_cols(f, 0, c) };
    let ps = g.gather(fs, idx.clone(), t, width);
    parts.push(params.patch_spatial.forward(g, ps));
    tags.extend(std::iter::repeat_n(DomainTag::Spatial, t));

    if dims.dual_stream {
        let pf = params
            .patch_freq
            .as_ref()
            .ok_or_else(|| Error::Config("no frequency patch embedding configured".into()))?;
        let ff = g.slice_cols(f, c, c);
        let patches = g.gather(ff, idx, t, width);
        parts.push(pf.forward(g, patches));
        tags.extend(std::iter::repeat_n(DomainTag::Frequency, t));
    }
    let psi = g.concat_rows(&parts);
    let pos = params.pos.bind(g);
    if g.shape(pos) != g.shape(psi) {
        return Err(Error::dim("positional encoding does not match the token count"));
    }
    let mut zeta = g.add(psi, pos);
    if let Some(Dropout { rate, rng }) = dropout {
        if rate > 0.0 {
            let keep = 1.0 - rate;
            let mask = Array2::from_shape_fn(g.shape(zeta), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = g.constant(mask);
            zeta = g.mul(zeta, m);
        }
    }
    Ok(TokenSequence {
        tokens: zeta,
        tags,
        grid: dims.grid(),
    })
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block<T: Bindable>(
    g: &mut Graph,
    seq: &TokenSequence,
    params: &BlockParams<T>,
    heads: usize,
) -> Result<TokenSequence> {
    let x = seq.tokens;
    let d = g.shape(x).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("head count {heads} must divide d_model {d}")));
    }
    let h = params.ln1.forward(g, x);
    let q = params.q.forward(g, h);
    let k = params.k.forward(g, h);
    let v = params.v.forward(g, h);
    let att = acasff::scaled_attention_graph(g, q, k, v, heads)?;
    let o = params.o.forward(g, att.output);
    let x = g.add(x, o);
    let h = params.ln2.forward(g, x);
    let m = params.mlp.forward(g, h);
    let y = g.add(x, m);
    Ok(seq.with_tokens(y))
}

pub struct BackboneOutput {
    /// Final sequence after the closing layer norm.
    pub seq: TokenSequence,
    pub fusion: Option<FuseTrace>,
}

/// Cross-domain fusion to run at the insertion point.
pub struct FusionHook<'a, T> {
    pub params: &'a CrossAttnParams<T>,
    pub fuse_cls: bool,
}

/// Applies blocks `0..insertion`, the fusion hook (if any), the remaining
/// blocks, and the final layer norm.
pub fn backbone_forward<T: Bindable>(
    g: &mut Graph,
    seq: TokenSequence,
    params: &BackboneParams<T>,
    heads: usize,
    insertion: usize,
    fusion: Option<FusionHook<'_, T>>,
) -> Result<BackboneOutput> {
    let depth = params.blocks.len();
    if insertion >= depth {
        return Err(Error::Config(format!(
            "insertion layer {insertion} outside 0..{depth}"
        )));
    }
    let mut seq = seq;
    let mut trace = None;
    for (i, block) in params.blocks.iter().enumerate() {
        if i == insertion {
            if let Some(hook) = &fusion {
                let (fused, t) = acasff::fuse_block(g, &seq, hook.params, heads, hook.fuse_cls)?;
                seq = fused;
                trace = Some(t);
            }
        }
        seq = encoder_block(g, &seq, block, heads)?;
    }
    let out = params.final_ln.forward(g, seq.tokens);
    Ok(BackboneOutput {
        seq: seq.with_tokens(out),
        fusion: trace,
    })
}
