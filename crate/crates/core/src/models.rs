//! Mini backbones with optional DAP-Conv layers.
//!
//! * **MiniDGCNN** stacks EdgeConv layers. The first layer searches
//!   neighbors in Euclidean space; later layers rebuild the graph in the
//!   space of their input features.
//! * **MiniPointNet** stacks shared-MLP max-pool layers with relative
//!   positions over one static Euclidean graph (every point is a centroid).
//!
//! The outputs of all layers are concatenated and max-pooled into a global
//! vector. Classification feeds the global vector to an MLP head;
//! segmentation appends it to every point's features first.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_list, Kv};
use crate::dap::{Cloud, DapConfig, DapConv, DapInputs, DapState, Integration, Space};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::knn::{FeatureSet, KnnIndex, NeighborMatrix, SearchSpace};
use crate::localconv::{LocalConv, LocalConvKind, Neighborhood, Positions};
use crate::param::{Bound, Init, Linear, Mlp, Params, LEAKY_SLOPE};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    MiniDgcnn,
    MiniPointNet,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::MiniDgcnn => "mini-dgcnn",
            Backbone::MiniPointNet => "mini-pointnet",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini-dgcnn" => Ok(Backbone::MiniDgcnn),
            "mini-pointnet" => Ok(Backbone::MiniPointNet),
            _ => Err(Error::invalid(format!(
                "unknown model {s:?}; valid: mini-dgcnn, mini-pointnet"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Classify(usize),
    Segment(usize),
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Classify(n) | Head::Segment(n) => n,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Classify(n) => write!(f, "classify:{n}"),
            Head::Segment(n) => write!(f, "segment:{n}"),
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad head {s:?}; expected classify:N or segment:N"));
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        match kind {
            "classify" => Ok(Head::Classify(n)),
            "segment" => Ok(Head::Segment(n)),
            _ => Err(bad()),
        }
    }
}

/// Settings shared by every DAP-Conv layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DapSettings {
    pub space: Space,
    pub dap_count: usize,
    pub integration: Integration,
    pub random_offset: bool,
}

impl Default for DapSettings {
    fn default() -> Self {
        DapSettings {
            space: Space::Euclidean,
            dap_count: 1,
            integration: Integration::Add,
            random_offset: false,
        }
    }
}

/// The ablation variants: the plain backbone, random offsets, and learned
/// offsets with 1, 2 or 4 attention points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Random,
    Dap(usize),
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Random,
        Variant::Dap(1),
        Variant::Dap(2),
        Variant::Dap(4),
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::Random => f.write_str("random"),
            Variant::Dap(m) => write!(f, "dap{m}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "random" => Ok(Variant::Random),
            _ => s
                .strip_prefix("dap")
                .and_then(|m| m.parse().ok())
                .filter(|&m: &usize| m > 0)
                .map(Variant::Dap)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown variant {s:?}; valid: baseline, random, dap1, dap2, dap4"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Output width of each layer.
    pub widths: Vec<usize>,
    /// Indices of the layers replaced by DAP-Conv.
    pub dap_layers: Vec<usize>,
    pub dap: DapSettings,
    /// Neighborhood size of every layer and of the attention search.
    pub k: usize,
    pub head: Head,
    /// Hidden widths of the head MLP.
    pub head_hidden: Vec<usize>,
    /// Whether a point is its own neighbor in the backbone graphs.
    pub include_self: bool,
}

impl ModelConfig {
    /// Four EdgeConv layers of widths 64, 64, 128, 256 with k = 20.
    pub fn mini_dgcnn(head: Head) -> Self {
        ModelConfig {
            backbone: Backbone::MiniDgcnn,
            widths: vec![64, 64, 128, 256],
            dap_layers: Vec::new(),
            dap: DapSettings::default(),
            k: 20,
            head,
            head_hidden: vec![128],
            include_self: true,
        }
    }

    /// Three shared-MLP layers of widths 64, 128, 256 with k = 20.
    pub fn mini_pointnet(head: Head) -> Self {
        ModelConfig {
            backbone: Backbone::MiniPointNet,
            widths: vec![64, 128, 256],
            dap: DapSettings {
                integration: Integration::ConcatMlp,
                ..DapSettings::default()
            },
            ..ModelConfig::mini_dgcnn(head)
        }
    }

    /// Every layer for MiniDGCNN; every layer but the first for
    /// MiniPointNet.
    pub fn default_dap_layers(&self) -> Vec<usize> {
        let skip = match self.backbone {
            Backbone::MiniDgcnn => 0,
            Backbone::MiniPointNet => 1,
        };
        (skip.min(self.widths.len().saturating_sub(1))..self.widths.len()).collect()
    }

    pub fn with_dap(mut self) -> Self {
        self.dap_layers = self.default_dap_layers();
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Baseline => self.dap_layers.clear(),
            Variant::Random => {
                self.dap_layers = self.default_dap_layers();
                self.dap.random_offset = true;
                self.dap.dap_count = 1;
            }
            Variant::Dap(m) => {
                self.dap_layers = self.default_dap_layers();
                self.dap.random_offset = false;
                self.dap.dap_count = m;
            }
        }
        self
    }

    pub fn is_dap(&self, layer: usize) -> bool {
        self.dap_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.widths.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::config(format!(
                "widths must be positive: layers {:?}, head {:?}",
                self.widths, self.head_hidden
            )));
        }
        if let Some(&l) = self.dap_layers.iter().find(|&&l| l >= self.widths.len()) {
            return Err(Error::config(format!(
                "DAP layer {l} out of range for {} layers",
                self.widths.len()
            )));
        }
        if self.dap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "DAP layers {:?} must be strictly increasing",
                self.dap_layers
            )));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.dap.dap_count == 0 {
            return Err(Error::config("dap_count must be at least 1"));
        }
        if self.head.outputs() == 0 {
            return Err(Error::config("head needs at least one output"));
        }
        Ok(())
    }

    /// Points a cloud needs for every layer's neighborhoods.
    pub fn min_points(&self) -> usize {
        self.k + usize::from(!self.include_self)
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("model.backbone", self.backbone);
        kv.set("model.widths", format_list(&self.widths));
        kv.set("model.dap_layers", format_list(&self.dap_layers));
        kv.set("model.space", self.dap.space);
        kv.set("model.dap_count", self.dap.dap_count);
        kv.set("model.integration", self.dap.integration);
        kv.set("model.random_offset", self.dap.random_offset);
        kv.set("model.k", self.k);
        kv.set("model.head", self.head);
        kv.set("model.head_hidden", format_list(&self.head_hidden));
        kv.set("model.include_self", self.include_self);
        kv
    }

    /// Reads `model.*` keys over the defaults of the named backbone.
    /// `model.dap_layers = all` selects [`ModelConfig::default_dap_layers`].
    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let head: Head = kv
            .parse_opt("model.head")?
            .ok_or_else(|| Error::config("model.head is required"))?;
        let backbone = kv
            .parse_opt("model.backbone")?
            .unwrap_or(Backbone::MiniDgcnn);
        let mut cfg = match backbone {
            Backbone::MiniDgcnn => ModelConfig::mini_dgcnn(head),
            Backbone::MiniPointNet => ModelConfig::mini_pointnet(head),
        };
        if let Some(w) = kv.parse_list("model.widths")? {
            cfg.widths = w;
        }
        match kv.get("model.dap_layers") {
            Some("all") => cfg.dap_layers = cfg.default_dap_layers(),
            Some(_) => cfg.dap_layers = kv.parse_list("model.dap_layers")?.unwrap_or_default(),
            None => {}
        }
        if let Some(v) = kv.parse_opt("model.space")? {
            cfg.dap.space = v;
        }
        if let Some(v) = kv.parse_opt("model.dap_count")? {
            cfg.dap.dap_count = v;
        }
        if let Some(v) = kv.parse_opt("model.integration")? {
            cfg.dap.integration = v;
        }
        if let Some(v) = kv.parse_opt("model.random_offset")? {
            cfg.dap.random_offset = v;
        }
        if let Some(v) = kv.parse_opt("model.k")? {
            cfg.k = v;
        }
        if let Some(v) = kv.parse_list("model.head_hidden")? {
            cfg.head_hidden = v;
        }
        if let Some(v) = kv.parse_opt("model.include_self")? {
            cfg.include_self = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Plain(LocalConv),
    Dap(DapConv),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Plain(c) => match c.kind {
                LocalConvKind::EdgeConv => "edge-conv",
                LocalConvKind::SharedMlpPool => "shared-mlp-pool",
            },
            Layer::Dap(_) => "dap-conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub layers: Vec<Layer>,
    /// Width-preserving layer after each DAP layer of a segmenter.
    pub fuse: Vec<Option<Linear>>,
    pub head: Mlp,
}

/// Logits plus the selection state of every DAP layer (`None` for plain
/// layers). Classification logits are `1 x classes`; segmentation logits
/// are `N x parts`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub states: Vec<Option<DapState>>,
}

/// Layer `l` draws from its own stream so its parameters do not depend on
/// the kinds of the layers before it.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const FUSE_STREAM: u64 = 1 << 16;
const HEAD_STREAM: u64 = 1 << 17;

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut params = Params::new();
    let (kind, rel_pos) = match cfg.backbone {
        Backbone::MiniDgcnn => (LocalConvKind::EdgeConv, false),
        Backbone::MiniPointNet => (LocalConvKind::SharedMlpPool, true),
    };
    let mut layers = Vec::with_capacity(cfg.widths.len());
    let mut fuse = Vec::with_capacity(cfg.widths.len());
    let mut c_in = 3;
    for (l, &w) in cfg.widths.iter().enumerate() {
        let mut rng = stream_rng(seed, l as u64);
        let mut init = Init { rng: &mut rng };
        let name = format!("layer{l}");
        let layer = if cfg.is_dap(l) {
            let dap_cfg = DapConfig {
                space: cfg.dap.space,
                k: cfg.k,
                dap_count: cfg.dap.dap_count,
                integration: cfg.dap.integration,
                offset_hidden: vec![(c_in / 2).max(1)],
                random_offset: cfg.dap.random_offset,
                c_in,
                c_out: w,
                conv_kind: kind,
                conv1_rel_pos: rel_pos,
                conv_widths: vec![w],
            };
            Layer::Dap(DapConv::new(&mut params, &mut init, &name, dap_cfg)?)
        } else {
            Layer::Plain(LocalConv::new(
                &mut params,
                &mut init,
                &name,
                kind,
                c_in,
                &[w],
                rel_pos,
            )?)
        };
        layers.push(layer);
        let fuse_layer = (cfg.is_dap(l) && matches!(cfg.head, Head::Segment(_))).then(|| {
            let mut rng = stream_rng(seed, FUSE_STREAM + l as u64);
            Linear::new(
                &mut params,
                &mut Init { rng: &mut rng },
                &format!("layer{l}.fuse"),
                w,
                w,
            )
        });
        fuse.push(fuse_layer);
        c_in = w;
    }
    let total: usize = cfg.widths.iter().sum();
    let head_in = match cfg.head {
        Head::Classify(_) => total,
        Head::Segment(_) => 2 * total,
    };
    let mut widths = cfg.head_hidden.clone();
    widths.push(cfg.head.outputs());
    let mut rng = stream_rng(seed, HEAD_STREAM);
    let head = Mlp::new(
        &mut params,
        &mut Init { rng: &mut rng },
        "head",
        head_in,
        &widths,
        false,
    )?;
    Ok(Model {
        cfg: cfg.clone(),
        params,
        layers,
        fuse,
        head,
    })
}

/// Seed of the random offsets of layer `l` in the forward pass `seed`.
fn layer_seed(seed: u64, l: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(l as u64)
}

impl Model {
    pub fn describe_layers(&self) -> String {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| format!("{l}: {}", layer.kind_name()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn check_points(&self, n: usize) -> Result<()> {
        let need = self.cfg.min_points();
        if n < need {
            let layer = &self.layers[0];
            return Err(Error::invalid(format!(
                "layer 0 ({}) needs at least {need} points for k = {}, cloud has {n}",
                layer.kind_name(),
                self.cfg.k
            )));
        }
        Ok(())
    }

    /// Runs the network on one cloud. `seed` only affects random-offset
    /// layers.
    pub fn forward(&self, bound: &Bound, cloud: &PointCloud, seed: u64) -> Result<Forward> {
        let tape = bound.tape;
        let n = cloud.len();
        self.check_points(n)?;
        let flat = cloud.flat_positions();
        let x = Tensor::from_vec(vec![n, 3], flat.clone())?;
        let index = KnnIndex::build(&flat)?;
        let (k, include_self) = (self.cfg.k, self.cfg.include_self);
        let spatial = SearchSpace::Euclidean(&index).self_neighbors(&flat, k, include_self)?;

        let mut h = x.clone();
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut states = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let dynamic;
            let graph: &NeighborMatrix =
                if self.cfg.backbone == Backbone::MiniDgcnn && l > 0 {
                    let c = h.shape()[1];
                    dynamic = SearchSpace::Feature(FeatureSet::new(h.values(), c)?)
                        .self_neighbors(h.values(), k, include_self)?;
                    &dynamic
                } else {
                    &spatial
                };
            let out = match layer {
                Layer::Plain(conv) => {
                    states.push(None);
                    conv.apply(
                        bound,
                        &Neighborhood {
                            features: &h,
                            centers: &h,
                            neighbors: graph,
                            positions: conv.rel_pos.then_some(Positions {
                                points: &x,
                                queries: &x,
                            }),
                        },
                    )
                }
                Layer::Dap(dap) => {
                    let inputs = DapInputs {
                        cloud: Cloud {
                            positions: &x,
                            index: &index,
                        },
                        features: &h,
                        graph,
                        random_seed: layer_seed(seed, l),
                    };
                    dap.forward(bound, &inputs).map(|(f, state)| {
                        states.push(Some(state));
                        f
                    })
                }
            }
            .map_err(|e| Error::invalid(format!("layer {l} ({}): {e}", layer.kind_name())))?;
            h = match &self.fuse[l] {
                Some(lin) => tape.leaky_relu(&lin.forward(bound, &out)?, LEAKY_SLOPE)?,
                None => out,
            };
            outputs.push(h.clone());
        }

        let refs: Vec<&Tensor> = outputs.iter().collect();
        let features = tape.concat(&refs)?;
        let width = features.shape()[1];
        let global = tape.max_reduce(&tape.reshape(&features, &[1, n, width])?)?;
        let logits = match self.cfg.head {
            Head::Classify(_) => self.head.forward(bound, &global)?,
            Head::Segment(_) => {
                let repeated = tape.gather_rows(&global, &vec![0; n], 1)?;
                let repeated = tape.reshape(&repeated, &[n, width])?;
                let joined = tape.concat(&[&features, &repeated])?;
                self.head.forward(bound, &joined)?
            }
        };
        Ok(Forward { logits, states })
    }

    /// Inference with constant parameters and forward seed 0.
    pub fn infer(&self, cloud: &PointCloud) -> Result<Forward> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        self.forward(&bound, cloud, 0)
    }
}

/// Class logits of one cloud.
pub fn classify(model: &Model, cloud: &PointCloud) -> Result<Forward> {
    if !matches!(model.cfg.head, Head::Classify(_)) {
        return Err(Error::invalid("classify needs a classification head"));
    }
    model.infer(cloud)
}

/// Per-point part logits of one cloud.
pub fn segment(model: &Model, cloud: &PointCloud) -> Result<Forward> {
    if !matches!(model.cfg.head, Head::Segment(_)) {
        return Err(Error::invalid("segment needs a segmentation head"));
    }
    model.infer(cloud)
}

/// Index of the largest entry in each row (lowest index on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.values()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// One point and its attention point in one DAP layer (first head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub point_index: usize,
    pub position: [f64; 3],
    /// Offset point; `None` in feature space.
    pub offset_point: Option<[f64; 3]>,
    pub q_index: usize,
    pub q_position: [f64; 3],
}

pub const ATTENTION_HEADER: &str = "point_index,px,py,pz,dx,dy,dz,q_index,qx,qy,qz";

pub fn export_attention(
    model: &Model,
    cloud: &PointCloud,
    layer: usize,
) -> Result<Vec<AttentionRecord>> {
    match model.layers.get(layer) {
        Some(Layer::Dap(_)) => {}
        _ => {
            return Err(Error::invalid(format!(
                "layer {layer} is not a DAP-Conv layer; layers are [{}]",
                model.describe_layers()
            )))
        }
    }
    let out = model.infer(cloud)?;
    let state = out.states[layer]
        .as_ref()
        .expect("DAP layer yields a state");
    let to3 = |r: &[f64]| [r[0], r[1], r[2]];
    Ok((0..cloud.len())
        .map(|i| {
            let q = state.q_idx.row(i)[0];
            AttentionRecord {
                point_index: i,
                position: cloud.positions[i],
                offset_point: (state.space == Space::Euclidean)
                    .then(|| to3(state.queries[0].row(i))),
                q_index: q,
                q_position: cloud.positions[q],
            }
        })
        .collect())
}

/// Header line plus one comma-separated line per record, with full
/// round-trip precision.
pub fn attention_text(records: &[AttentionRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(ATTENTION_HEADER);
    s.push('\n');
    for r in records {
        let [px, py, pz] = r.position;
        let d = match r.offset_point {
            Some([x, y, z]) => format!("{x:e},{y:e},{z:e}"),
            None => "NA,NA,NA".to_string(),
        };
        let [qx, qy, qz] = r.q_position;
        s.push_str(&format!(
            "{},{px:e},{py:e},{pz:e},{d},{},{qx:e},{qy:e},{qz:e}\n",
            r.point_index, r.q_index
        ));
    }
    s
}
