//! DAP-Conv: each point learns one directional attention point.
//!
//! The block runs four stages:
//!
//! 1. **Local convolution**: `f_p = LocalConv1(N(p_i))` over the backbone graph.
//! 2. **Offset mapping**: a shared MLP maps the input feature `f_i` to an
//!    offset, added to the coordinates (`d_i = MLP(f_i) + x_i`) or to the
//!    feature itself (`f_d = MLP(f_i) + f_i`).
//! 3. **Selection and aggregation**: the `k` nearest set points of the
//!    offset point form `N(d_i)`; its first entry is the attention point
//!    `q_i`. `f_q = LocalConv2(N(d_i))`.
//! 4. **Integration**: `f' = f_p + f_q`, or `MLP(concat(f_p, f_q))`.
//!
//! Neighbor indices are constants on the tape. The offset MLP still gets
//! gradient because the offset point enters `LocalConv2` continuously: in
//! Euclidean mode through the relative positions `x_j - d_i` (with `f_i`
//! as the center feature), in feature mode as the EdgeConv center
//! `concat(f_d, f_j - f_d)`.
//!
//! With `m > 1` attention points there are `m` offset heads sharing one
//! `LocalConv2`; their aggregated features are combined by elementwise max.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::knn::{FeatureSet, KnnIndex, NeighborMatrix};
use crate::localconv::{LocalConv, LocalConvKind, Neighborhood, Positions};
use crate::param::{Bound, Init, Linear, Mlp, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Euclidean,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Integration {
    /// `f_p + f_q`.
    Add,
    /// A linear layer over `concat(f_p, f_q)`.
    ConcatMlp,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Euclidean => "euclidean",
            Space::Feature => "feature",
        })
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Space::Euclidean),
            "feature" => Ok(Space::Feature),
            _ => Err(Error::invalid(format!(
                "unknown space {s:?}; valid: euclidean, feature"
            ))),
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::Add => "add",
            Integration::ConcatMlp => "concat",
        })
    }
}

/// Accepts `add`/`I1` and `concat`/`I2`.
impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "I1" | "i1" => Ok(Integration::Add),
            "concat" | "I2" | "i2" => Ok(Integration::ConcatMlp),
            _ => Err(Error::invalid(format!(
                "unknown integration {s:?}; valid: add (I1), concat (I2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapConfig {
    pub space: Space,
    /// Neighbors for both the backbone graph and the offset-point search.
    pub k: usize,
    pub dap_count: usize,
    pub integration: Integration,
    /// Hidden widths of each offset head; the output width is implied by
    /// the space.
    pub offset_hidden: Vec<usize>,
    pub random_offset: bool,
    pub c_in: usize,
    pub c_out: usize,
    /// Edge function of `LocalConv1`, and of `LocalConv2` in Euclidean mode.
    pub conv_kind: LocalConvKind,
    /// Whether `LocalConv1` sees relative positions.
    pub conv1_rel_pos: bool,
    /// Widths of both local convolutions; the last is `c_out`.
    pub conv_widths: Vec<usize>,
}

impl DapConfig {
    /// One-layer convolutions, one attention point, addition, and an
    /// offset head of width `c_in / 2`.
    pub fn new(space: Space, c_in: usize, c_out: usize, k: usize) -> Self {
        DapConfig {
            space,
            k,
            dap_count: 1,
            integration: Integration::Add,
            offset_hidden: vec![(c_in / 2).max(1)],
            random_offset: false,
            c_in,
            c_out,
            conv_kind: LocalConvKind::EdgeConv,
            conv1_rel_pos: false,
            conv_widths: vec![c_out],
        }
    }

    pub fn offset_width(&self) -> usize {
        match self.space {
            Space::Euclidean => 3,
            Space::Feature => self.c_in,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dap_count == 0 {
            return Err(Error::config("dap_count must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config("channel sizes must be positive"));
        }
        if self.conv_widths.last() != Some(&self.c_out) {
            return Err(Error::config(format!(
                "conv widths {:?} must end at c_out = {}",
                self.conv_widths, self.c_out
            )));
        }
        Ok(())
    }
}

/// What one forward pass selected, for inspection and export.
#[derive(Debug, Clone, PartialEq)]
pub struct DapState {
    pub space: Space,
    /// Offset-MLP output per head (`N x 3` or `N x C`), before the addition.
    pub offsets: Vec<Tensor>,
    /// Offset points `d_i` (`N x 3`) or offset features `f_d` (`N x C`)
    /// per head.
    pub queries: Vec<Tensor>,
    /// `N x m` attention-point indices.
    pub q_idx: NeighborMatrix,
    /// `N x (m k)`: the neighborhoods of every head side by side.
    pub neighbor_idx: NeighborMatrix,
}

/// The positional context shared by every layer of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Cloud<'a> {
    /// `N x 3` constant coordinates.
    pub positions: &'a Tensor,
    pub index: &'a KnnIndex,
}

/// Inputs of one DAP-Conv evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DapInputs<'a> {
    pub cloud: Cloud<'a>,
    /// `N x c_in`.
    pub features: &'a Tensor,
    /// Backbone neighborhoods `N(p_i)` for `LocalConv1`.
    pub graph: &'a NeighborMatrix,
    /// Seed for the random-offset ablation; ignored otherwise.
    pub random_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapConv {
    pub cfg: DapConfig,
    pub local1: LocalConv,
    pub local2: LocalConv,
    /// Empty when offsets are random.
    pub offset_heads: Vec<Mlp>,
    pub integration: Option<Linear>,
}

impl DapConv {
    /// Registers the block's parameters. Offset heads start with a zeroed
    /// final layer, so the initial offset points coincide with the points.
    pub fn new(params: &mut Params, init: &mut Init, name: &str, cfg: DapConfig) -> Result<Self> {
        cfg.validate()?;
        let local1 = LocalConv::new(
            params,
            init,
            &format!("{name}.local1"),
            cfg.conv_kind,
            cfg.c_in,
            &cfg.conv_widths,
            cfg.conv1_rel_pos,
        )?;
        let (kind2, rel2) = match cfg.space {
            Space::Euclidean => (cfg.conv_kind, true),
            Space::Feature => (LocalConvKind::EdgeConv, false),
        };
        let local2 = LocalConv::new(
            params,
            init,
            &format!("{name}.local2"),
            kind2,
            cfg.c_in,
            &cfg.conv_widths,
            rel2,
        )?;
        let mut offset_heads = Vec::new();
        if !cfg.random_offset {
            let mut widths = cfg.offset_hidden.clone();
            widths.push(cfg.offset_width());
            for h in 0..cfg.dap_count {
                let mlp = Mlp::new(
                    params,
                    init,
                    &format!("{name}.offset{h}"),
                    cfg.c_in,
                    &widths,
                    false,
                )?;
                mlp.zero_last(params)?;
                offset_heads.push(mlp);
            }
        }
        let integration = match cfg.integration {
            Integration::Add => None,
            Integration::ConcatMlp => Some(Linear::new(
                params,
                init,
                &format!("{name}.integrate"),
                2 * cfg.c_out,
                cfg.c_out,
            )),
        };
        Ok(DapConv {
            cfg,
            local1,
            local2,
            offset_heads,
            integration,
        })
    }

    /// Runs the whole block, returning `N x c_out` features and the
    /// selection state.
    pub fn forward(&self, bound: &Bound, inputs: &DapInputs) -> Result<(Tensor, DapState)> {
        let f = inputs.features;
        let x = inputs.cloud.positions;
        let n = x.shape()[0];
        if f.shape() != [n, self.cfg.c_in] {
            return Err(Error::shape(format!(
                "features {:?} for {n} points with c_in = {}",
                f.shape(),
                self.cfg.c_in
            )));
        }
        let positions1 = self.local1.rel_pos.then_some(Positions {
            points: x,
            queries: x,
        });
        let f_p = self.local1.apply(
            bound,
            &Neighborhood {
                features: f,
                centers: f,
                neighbors: inputs.graph,
                positions: positions1,
            },
        )?;

        let offsets = self.offsets(bound, inputs)?;
        let mut queries = Vec::with_capacity(offsets.len());
        for off in &offsets {
            queries.push(match self.cfg.space {
                Space::Euclidean => bound.tape.add(x, off)?,
                Space::Feature => bound.tape.add(f, off)?,
            });
        }

        let mut neighbor_sets = Vec::with_capacity(queries.len());
        let mut aggregated = Vec::with_capacity(queries.len());
        for q in &queries {
            let nm = select_attention(inputs.cloud, f, self.cfg.space, q, self.cfg.k)?;
            aggregated.push(aggregate_attention(
                bound,
                inputs.cloud,
                f,
                q,
                &nm,
                &self.local2,
                self.cfg.space,
            )?);
            neighbor_sets.push(nm);
        }
        let f_q = combine_heads(bound, &aggregated)?;

        let out = match &self.integration {
            None => integrate_add(bound, &f_p, &f_q)?,
            Some(lin) => integrate_concat_mlp(bound, &f_p, &f_q, lin)?,
        };

        let q_rows = (0..n)
            .map(|i| neighbor_sets.iter().map(|nm| nm.row(i)[0]).collect())
            .collect();
        let state = DapState {
            space: self.cfg.space,
            offsets: offsets.iter().map(Tensor::detach).collect(),
            queries: queries.iter().map(Tensor::detach).collect(),
            q_idx: NeighborMatrix::from_rows(q_rows)?,
            neighbor_idx: NeighborMatrix::hstack(&neighbor_sets)?,
        };
        Ok((out, state))
    }

    fn offsets(&self, bound: &Bound, inputs: &DapInputs) -> Result<Vec<Tensor>> {
        if self.cfg.random_offset {
            let shape = [inputs.cloud.positions.shape()[0], self.cfg.offset_width()];
            let sigma = match self.cfg.space {
                Space::Euclidean => mean_nn_distance(inputs.cloud.index)?,
                Space::Feature => 1.0,
            };
            return Ok((0..self.cfg.dap_count)
                .map(|h| {
                    random_offsets(inputs.cloud.positions, inputs.random_seed, h, &shape, sigma)
                })
                .collect());
        }
        let f = inputs.features;
        self.offset_heads
            .iter()
            .map(|head| match self.cfg.space {
                Space::Euclidean => offset_mlp(bound, f, head, 3),
                Space::Feature => offset_mlp(bound, f, head, self.cfg.c_in),
            })
            .collect()
    }
}

fn offset_mlp(bound: &Bound, f: &Tensor, mlp: &Mlp, width: usize) -> Result<Tensor> {
    if mlp.c_out() != width || f.shape().last() != Some(&mlp.c_in()) {
        return Err(Error::shape(format!(
            "offset MLP {} -> {} cannot map features {:?} to width {width}",
            mlp.c_in(),
            mlp.c_out(),
            f.shape()
        )));
    }
    mlp.forward(bound, f)
}

/// `d = MLP(f) + x` with `f: N x C`, `x: N x 3`.
pub fn map_offset_euclidean(bound: &Bound, f: &Tensor, x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let off = offset_mlp(bound, f, mlp, 3)?;
    bound.tape.add(x, &off)
}

/// `f_d = MLP(f) + f`.
pub fn map_offset_feature(bound: &Bound, f: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let c = f.shape().last().copied().unwrap_or(0);
    let off = offset_mlp(bound, f, mlp, c)?;
    bound.tape.add(f, &off)
}

/// `k` nearest set points of every offset point (rows of `query`); the
/// first entry of each row is the attention point. Indices are detached.
pub fn select_attention(
    cloud: Cloud,
    features: &Tensor,
    space: Space,
    query: &Tensor,
    k: usize,
) -> Result<NeighborMatrix> {
    match space {
        Space::Euclidean => cloud.index.batch(query.values(), k),
        Space::Feature => {
            let c = features.shape()[1];
            FeatureSet::new(features.values(), c)?.batch(query.values(), k)
        }
    }
}

/// `f_q = LocalConv2(N(d_i))`.
pub fn aggregate_attention(
    bound: &Bound,
    cloud: Cloud,
    features: &Tensor,
    query: &Tensor,
    neighbors: &NeighborMatrix,
    local2: &LocalConv,
    space: Space,
) -> Result<Tensor> {
    let nb = match space {
        Space::Euclidean => Neighborhood {
            features,
            centers: features,
            neighbors,
            positions: Some(Positions {
                points: cloud.positions,
                queries: query,
            }),
        },
        Space::Feature => Neighborhood {
            features,
            centers: query,
            neighbors,
            positions: None,
        },
    };
    local2.apply(bound, &nb)
}

/// Elementwise max over heads; a single head passes through.
fn combine_heads(bound: &Bound, heads: &[Tensor]) -> Result<Tensor> {
    match heads {
        [] => Err(Error::invalid("no attention heads")),
        [one] => Ok(one.clone()),
        many => {
            let tape = bound.tape;
            let (n, c) = (many[0].shape()[0], many[0].shape()[1]);
            let refs: Vec<&Tensor> = many.iter().collect();
            let stacked = tape.concat(&refs)?;
            let stacked = tape.reshape(&stacked, &[n, many.len(), c])?;
            tape.max_reduce(&stacked)
        }
    }
}

pub fn integrate_add(bound: &Bound, f_p: &Tensor, f_q: &Tensor) -> Result<Tensor> {
    bound.tape.add(f_p, f_q).map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("integrate_add: {m}")),
        other => other,
    })
}

pub fn integrate_concat_mlp(
    bound: &Bound,
    f_p: &Tensor,
    f_q: &Tensor,
    lin: &Linear,
) -> Result<Tensor> {
    let cat = bound.tape.concat(&[f_p, f_q])?;
    lin.forward(bound, &cat)
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_distance(index: &KnnIndex) -> Result<f64> {
    let n = index.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let p = index.point(i);
        let nb = index.query(p, 2)?;
        let j = nb.indices.iter().copied().find(|&j| j != i).unwrap_or(i);
        let q = index.point(j);
        total += crate::knn::sq_dist(&p, &q).sqrt();
    }
    Ok(total / n as f64)
}

/// Gaussian offsets of scale `sigma`. Each point's draw is keyed on its
/// coordinates, the seed and the head, so reordering the cloud reorders
/// the offsets with it.
fn random_offsets(
    positions: &Tensor,
    seed: u64,
    head: usize,
    shape: &[usize; 2],
    sigma: f64,
) -> Tensor {
    let mut v = Vec::with_capacity(shape[0] * shape[1]);
    for p in positions.values().chunks_exact(3) {
        let mut key = seed ^ (head as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        for c in p {
            key = splitmix(key ^ c.to_bits());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        v.extend((0..shape[1]).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        }));
    }
    Tensor::raw(shape.to_vec(), v)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn offset_head(params: &mut Params, c_in: usize, out: usize, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(
            params,
            &mut Init { rng: &mut rng },
            "off",
            c_in,
            &[4, out],
            false,
        )
        .unwrap()
    }

    #[test]
    fn zero_offset_mlp_keeps_positions() {
        let mut params = Params::new();
        let mlp = offset_head(&mut params, 5, 3, 1);
        mlp.zero_last(&mut params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_t(&mut rng, &[6, 5]);
        let x = rand_t(&mut rng, &[6, 3]);
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let d = map_offset_euclidean(&bound, &f, &x, &mlp).unwrap();
        assert_eq!(d.values(), x.values());

        let last = mlp.layers[1];
        params.set(last.bias, vec![0.5, -1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let d = map_offset_euclidean(&bound, &f, &x, &mlp).unwrap();
        for (r, row) in d.values().chunks(3).enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(*v, x.row(r)[c] + [0.5, -1.0, 2.0][c]);
            }
        }
    }

    #[test]
    fn feature_offset_zero_and_bias_only() {
        let mut params = Params::new();
        let mlp = offset_head(&mut params, 4, 4, 3);
        mlp.zero_last(&mut params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_t(&mut rng, &[5, 4]);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        assert_eq!(
            map_offset_feature(&bound, &f, &mlp).unwrap().values(),
            f.values()
        );

        let bias = vec![0.1, 0.2, 0.3, 0.4];
        params.set(mlp.layers[1].bias, bias.clone()).unwrap();
        let bound = params.bind(&tape, false);
        let zero = Tensor::zeros(&[5, 4]);
        let fd = map_offset_feature(&bound, &zero, &mlp).unwrap();
        for row in fd.values().chunks(4) {
            assert_eq!(row, bias.as_slice());
        }
        let wrong = offset_head(&mut params, 4, 3, 5);
        assert!(map_offset_feature(&bound, &f, &wrong).is_err());
    }

    #[test]
    fn integrate_add_cases() {
        let tape = Tape::new();
        let params = Params::new();
        let bound = params.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[3, 4]);
        assert_eq!(
            integrate_add(&bound, &a, &Tensor::zeros(&[3, 4])).unwrap(),
            a
        );
        let twice = integrate_add(&bound, &a, &a).unwrap();
        assert_eq!(twice.values(), tape.scale(&a, 2.0).values());
        assert_eq!(
            integrate_add(&bound, &a, &b).unwrap(),
            integrate_add(&bound, &b, &a).unwrap()
        );
        assert!(integrate_add(&bound, &a, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn concat_mlp_selector_and_sum() {
        let mut params = Params::new();
        let lin = Linear::zeros(&mut params, "i", 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_t(&mut rng, &[3, 2]);
        let b = rand_t(&mut rng, &[3, 2]);
        // rows of W index input channels: [I; 0] selects f_p
        params
            .set(lin.weight, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        assert_eq!(
            integrate_concat_mlp(&bound, &a, &b, &lin).unwrap().values(),
            a.values()
        );
        params
            .set(lin.weight, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let bound = params.bind(&tape, false);
        assert_eq!(
            integrate_concat_mlp(&bound, &a, &b, &lin).unwrap().values(),
            integrate_add(&bound, &a, &b).unwrap().values()
        );
        let bad = Linear::zeros(&mut params, "j", 5, 2);
        let bound = params.bind(&tape, false);
        assert!(integrate_concat_mlp(&bound, &a, &b, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DapConfig::new(Space::Euclidean, 4, 8, 3);
        cfg.validate().unwrap();
        cfg.dap_count = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = DapConfig::new(Space::Feature, 4, 8, 3);
        cfg.conv_widths = vec![5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mean_nn_distance_on_a_line() {
        let idx = KnnIndex::build(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert!((mean_nn_distance(&idx).unwrap() - (1.0 + 1.0 + 2.0) / 3.0).abs() < 1e-15);
    }
}
