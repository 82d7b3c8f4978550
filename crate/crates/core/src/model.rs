//! Full network: wavelet front-end, domain streams, encoder with optional
//! cross-domain fusion, and the episodic head.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acasff::{CrossAttnParams, FuseTrace, DEFAULT_FUSION_HIDDEN};
use crate::amff::{self, AmffInput, AmffNodes, AmffParams, DEFAULT_GATE_HIDDEN, DEFAULT_LEVELS};
use crate::autograd::{Graph, NodeId, ParamGrads, ParamId, ParamStore};
use crate::backbone::{self, BackboneDims, BackboneParams, DomainTag, Dropout, FusionHook, TokenSequence};
use crate::error::{Error, Result};
use crate::similarity::{self, RidgeConstants, SimilarityParams, NORM_GUARD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Ridge reconstruction over patch-token feature maps.
    Ridge,
    /// Class-mean prototypes with negative squared Euclidean distance.
    Proto,
}

/// Module combinations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Amff,
    Acasff,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Amff, Variant::Acasff, Variant::Full];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Amff => (true, false),
            Variant::Acasff => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Amff => "+AMFF",
            Variant::Acasff => "+ACA-SFF",
            Variant::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub dwt_levels: usize,
    pub gate_hidden_width: usize,
    pub proj_channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// Block index at which fusion runs; defaults to `depth - 1`.
    pub insertion_layer: Option<usize>,
    pub dropout_rate: f64,
    pub fusion_mlp_hidden: usize,
    pub fuse_cls: bool,
    pub use_amff: bool,
    pub use_acasff: bool,
    pub head: HeadKind,
    pub tau_init: f64,
    pub gamma: f64,
    pub eps: f64,
    pub pos_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            dwt_levels: DEFAULT_LEVELS,
            gate_hidden_width: DEFAULT_GATE_HIDDEN,
            proj_channels: 4,
            d_model: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            insertion_layer: None,
            dropout_rate: 0.1,
            fusion_mlp_hidden: DEFAULT_FUSION_HIDDEN,
            fuse_cls: false,
            use_amff: true,
            use_acasff: true,
            head: HeadKind::Ridge,
            tau_init: similarity::DEFAULT_TAU,
            gamma: similarity::DEFAULT_GAMMA,
            eps: similarity::DEFAULT_EPS,
            pos_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_amff, self.use_acasff) = v.flags();
        self
    }

    pub fn insertion(&self) -> usize {
        self.insertion_layer.unwrap_or(self.depth.saturating_sub(1))
    }

    /// Both token streams exist whenever either fusion module is on.
    pub fn dual_stream(&self) -> bool {
        self.use_amff || self.use_acasff
    }

    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            image_size: self.image_size,
            patch_size: self.patch_size,
            low_channels: 1,
            high_channels: 1,
            proj_channels: self.proj_channels,
            d_model: self.d_model,
            depth: self.depth,
            heads: self.heads,
            mlp_hidden: self.d_model * self.mlp_ratio,
            dual_stream: self.dual_stream(),
            pos_init_std: self.pos_init_std,
        }
    }

    pub fn constants(&self) -> RidgeConstants {
        RidgeConstants {
            gamma: self.gamma,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        crate::wavelet::check_levels(self.dwt_levels)?;
        if self.insertion() >= self.depth {
            return Err(Error::Config(format!(
                "insertion layer {} outside 0..{}",
                self.insertion(),
                self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !self.image_size.is_multiple_of(1 << self.dwt_levels) {
            log::debug!("image size {} is padded for {} levels", self.image_size, self.dwt_levels);
        }
        if self.proj_channels == 0 || self.gate_hidden_width == 0 || self.fusion_mlp_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-image constants, computed once and reused across episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    /// Raw pixels as an `H*W x 1` column.
    pub raw: Array2<f64>,
    pub amff: Option<AmffInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub amff: Option<AmffParams<ParamId>>,
    pub backbone: BackboneParams<ParamId>,
    pub fusion: Option<CrossAttnParams<ParamId>>,
    pub head: Option<SimilarityParams<ParamId>>,
}

/// Graph handles from one forward pass over an image.
pub struct Encoded {
    /// Patch-position feature map, `r x d`.
    pub features: NodeId,
    pub seq: TokenSequence,
    pub amff: Option<AmffNodes>,
    pub fusion: Option<FuseTrace>,
}

#[derive(Clone, Debug)]
pub struct AmsfNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: NetParams,
}

/// Images of one episode: `support[c][k]` and labelled queries.
pub struct EpisodeImages<'a> {
    pub support: Vec<Vec<&'a PreparedImage>>,
    pub queries: Vec<&'a PreparedImage>,
    pub labels: Vec<usize>,
}

pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub grads: ParamGrads,
}

impl AmsfNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let amff = config
            .use_amff
            .then(|| AmffParams::init(&mut store, config.dwt_levels, config.gate_hidden_width, &mut rng));
        let backbone = BackboneParams::init(&mut store, &config.dims(), &mut rng);
        let fusion = config
            .use_acasff
            .then(|| CrossAttnParams::init(&mut store, config.d_model, config.fusion_mlp_hidden, &mut rng));
        let head = (config.head == HeadKind::Ridge).then(|| SimilarityParams::init(&mut store, config.tau_init));
        Ok(Self {
            config,
            store,
            params: NetParams {
                amff,
                backbone,
                fusion,
                head,
            },
        })
    }

    pub fn prepare(&self, image: ArrayView2<f64>) -> Result<PreparedImage> {
        let s = self.config.image_size;
        if image.dim() != (s, s) {
            return Err(Error::dim(format!("model expects {s}x{s} images, got {:?}", image.dim())));
        }
        let raw = Array2::from_shape_vec((s * s, 1), image.iter().copied().collect()).expect("column");
        let amff = self
            .config
            .dual_stream()
            .then(|| AmffInput::from_image(image, self.config.dwt_levels))
            .transpose()?;
        Ok(PreparedImage { raw, amff })
    }

    /// Forward pass for one image. Dropout runs only when `train_rng` is given.
    pub fn encode(&self, g: &mut Graph, img: &PreparedImage, train_rng: Option<&mut ChaCha8Rng>) -> Result<Encoded> {
        let cfg = &self.config;
        let (low, high, amff_nodes) = match (&self.params.amff, &img.amff) {
            (Some(p), Some(input)) => {
                let nodes = amff::amff_graph(g, input, p)?;
                (nodes.low_pass, Some(nodes.high_freq), Some(nodes))
            }
            (None, Some(input)) => {
                let raw = g.constant(img.raw.clone());
                let hf = g.constant(input.uniform_high_freq());
                (raw, Some(hf), None)
            }
            (None, None) => (g.constant(img.raw.clone()), None, None),
            (Some(_), None) => return Err(Error::InvalidArgument("image was prepared without wavelet maps".into())),
        };
        let embed = &self.params.backbone.embed;
        let (fs, ff) = backbone::project_domains(g, low, high, embed)?;
        let f = match ff {
            Some(ff) => g.concat_cols(&[fs, ff]),
            None => fs,
        };
        let dims = cfg.dims();
        let dropout = train_rng.map(|rng| Dropout {
            rate: cfg.dropout_rate,
            rng,
        });
        let seq = backbone::embed(g, f, &dims, embed, dropout)?;
        let hook = self.params.fusion.as_ref().map(|params| FusionHook {
            params,
            fuse_cls: cfg.fuse_cls,
        });
        let out = backbone::backbone_forward(g, seq, &self.params.backbone, cfg.heads, cfg.insertion(), hook)?;
        let features = domain_features(g, &out.seq)?;
        Ok(Encoded {
            features,
            seq: out.seq,
            amff: amff_nodes,
            fusion: out.fusion,
        })
    }

    /// Eval-mode feature map (`r x d`) for one image.
    pub fn features(&self, img: &PreparedImage) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, img, None)?;
        Ok(g.value(enc.features).clone())
    }

    /// Mean of the feature rows, a `d`-vector used for embeddings.
    pub fn pooled(features: &Array2<f64>) -> Vec<f64> {
        features
            .mean_axis(ndarray::Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_default()
    }

    /// Query-by-class logits (`n x N`) on an existing graph.
    pub fn episode_logits(&self, g: &mut Graph, support: &[Vec<NodeId>], queries: &[NodeId]) -> Result<NodeId> {
        if support.len() < 2 {
            return Err(Error::InvalidArgument("an episode needs at least two classes".into()));
        }
        if queries.is_empty() {
            return Err(Error::InvalidArgument("an episode needs at least one query".into()));
        }
        match (&self.params.head, self.config.head) {
            (Some(head), HeadKind::Ridge) => {
                let hn = similarity::head_nodes(g, head, self.config.constants());
                let classes = support
                    .iter()
                    .map(|shots| similarity::aggregate_support_graph(g, shots))
                    .collect::<Result<Vec<_>>>()?;
                let r = g.shape(queries[0]).0;
                let normed: Vec<_> = queries.iter().map(|&q| g.row_normalize(q, NORM_GUARD)).collect();
                let stacked = g.concat_rows(&normed);
                similarity::ridge_logits_graph(g, stacked, r, &classes, hn)
            }
            (_, HeadKind::Proto) => {
                let mut protos = Vec::with_capacity(support.len());
                for shots in support {
                    if shots.is_empty() {
                        return Err(Error::InvalidArgument("support set has no shots".into()));
                    }
                    let pooled: Vec<_> = shots.iter().map(|&s| g.mean_rows(s)).collect();
                    let all = g.concat_rows(&pooled);
                    protos.push(g.mean_rows(all));
                }
                let protos = g.concat_rows(&protos);
                let pooled: Vec<_> = queries.iter().map(|&q| g.mean_rows(q)).collect();
                let q = g.concat_rows(&pooled);
                similarity::proto_logits_graph(g, q, protos)
            }
            (None, HeadKind::Ridge) => Err(Error::Config("ridge head parameters missing".into())),
        }
    }

    /// Logits for precomputed feature maps (eval path).
    pub fn logits_from_features(&self, support: &[Vec<&Array2<f64>>], queries: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.store);
        let s: Vec<Vec<NodeId>> = support
            .iter()
            .map(|shots| shots.iter().map(|f| g.constant((*f).clone())).collect())
            .collect();
        let q: Vec<NodeId> = queries.iter().map(|f| g.constant((*f).clone())).collect();
        let logits = self.episode_logits(&mut g, &s, &q)?;
        Ok(g.value(logits).clone())
    }

    /// Training-mode loss and parameter gradients for one episode.
    ///
    /// Images are encoded on independent graphs in parallel; the head runs on
    /// a separate graph over their feature maps and its input gradients seed
    /// each image's backward pass. Per-image gradients are summed in a fixed
    /// order so results do not depend on worker scheduling.
    pub fn episode_step(&self, ep: &EpisodeImages<'_>, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        let n = ep.support.len();
        if ep.labels.len() != ep.queries.len() || ep.labels.iter().any(|&l| l >= n) {
            return Err(Error::InvalidArgument("query labels do not match the episode".into()));
        }
        let images: Vec<&PreparedImage> = ep
            .support
            .iter()
            .flatten()
            .copied()
            .chain(ep.queries.iter().copied())
            .collect();
        let seeds: Vec<u64> = images.iter().map(|_| rng.gen()).collect();

        let encoded = images
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(img, &seed)| {
                let mut g = Graph::new(&self.store);
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let enc = self.encode(&mut g, img, Some(&mut r))?;
                Ok((g, enc.features))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut head = Graph::new(&self.store);
        let vars: Vec<NodeId> = encoded.iter().map(|(g, f)| head.variable(g.value(*f).clone())).collect();
        let mut it = vars.iter().copied();
        let support: Vec<Vec<NodeId>> = ep
            .support
            .iter()
            .map(|shots| shots.iter().map(|_| it.next().expect("support var")).collect())
            .collect();
        let queries: Vec<NodeId> = it.collect();
        let logits = self.episode_logits(&mut head, &support, &queries)?;
        let correct = count_correct(head.value(logits), &ep.labels);
        let loss = nll_graph(&mut head, logits, &ep.labels);
        let loss_value = head.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                episode: 0,
                loss: loss_value,
            });
        }
        let head_grads = head.backward(loss);
        let seeds: Vec<Array2<f64>> = vars
            .iter()
            .map(|v| {
                head_grads
                    .node(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(head.shape(*v)))
            })
            .collect();
        let per_image: Vec<ParamGrads> = encoded
            .par_iter()
            .zip(seeds.par_iter())
            .map(|((g, f), seed)| g.backward_with(*f, seed.clone()).into_params())
            .collect();
        let mut grads = head_grads.into_params();
        for g in &per_image {
            grads.merge(g);
        }
        Ok(StepOutput {
            loss: loss_value,
            correct,
            grads,
        })
    }
}

/// Average of the spatial and frequency slots per patch position, or the
/// spatial slot alone for single-stream models. Excludes CLS.
fn domain_features(g: &mut Graph, seq: &TokenSequence) -> Result<NodeId> {
    let rs = seq
        .range(DomainTag::Spatial)
        .ok_or_else(|| Error::InvalidArgument("sequence has no spatial tokens".into()))?;
    let s = g.slice_rows(seq.tokens, rs.start, rs.len());
    match seq.range(DomainTag::Frequency) {
        Some(rf) => {
            let f = g.slice_rows(seq.tokens, rf.start, rf.len());
            let sum = g.add(s, f);
            Ok(g.scale(sum, 0.5))
        }
        None => Ok(s),
    }
}

/// Mean negative log-probability of the true labels.
pub fn nll_graph(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let n = g.shape(logits).1;
    let lp = g.log_softmax_rows(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    let picked = g.gather(lp, idx, labels.len(), 1);
    let mean = g.mean_all(picked);
    g.scale(mean, -1.0)
}

pub fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| similarity::argmax(&row.to_vec()) == l)
        .count()
}
