//! Local convolution operators: a shared MLP applied to every neighbor and
//! max-pooled over the neighborhood.
//!
//! Two edge functions are supported:
//!
//! * [`LocalConvKind::SharedMlpPool`]: `MLP(concat(f_j, x_j - x_q))`, with
//!   the relative position optional.
//! * [`LocalConvKind::EdgeConv`]: `MLP(concat(f_c, f_j - f_c, x_j - x_q))`,
//!   again with the relative position optional.
//!
//! [`LocalConv::apply`] evaluates the first layer in factored form: since it
//! is linear in the edge feature, the per-center and per-neighbor parts are
//! projected once per row and the neighbor part is gathered afterwards.
//! [`LocalConv::edge_conv`] and [`LocalConv::shared_mlp_pool`] build the
//! concatenated edge features literally from pre-gathered neighbors.

use crate::error::{Error, Result};
use crate::knn::NeighborMatrix;
use crate::param::{Bound, Init, Mlp, Params, LEAKY_SLOPE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalConvKind {
    SharedMlpPool,
    EdgeConv,
}

impl LocalConvKind {
    /// Width of one edge feature for `c_in` input channels.
    pub fn edge_width(self, c_in: usize, rel_pos: bool) -> usize {
        let base = match self {
            LocalConvKind::SharedMlpPool => c_in,
            LocalConvKind::EdgeConv => 2 * c_in,
        };
        base + if rel_pos { 3 } else { 0 }
    }
}

/// Point coordinates for the relative-position slot: neighbors are drawn
/// from `points` (`N x 3`) and measured against `queries` (`M x 3`).
#[derive(Debug, Clone, Copy)]
pub struct Positions<'a> {
    pub points: &'a Tensor,
    pub queries: &'a Tensor,
}

/// Everything one local convolution consumes.
#[derive(Debug, Clone, Copy)]
pub struct Neighborhood<'a> {
    /// Features of the indexed set, `N x C`; neighbors are rows of this.
    pub features: &'a Tensor,
    /// Center feature per query, `M x C`.
    pub centers: &'a Tensor,
    /// `M x k` indices into `features`.
    pub neighbors: &'a NeighborMatrix,
    pub positions: Option<Positions<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConv {
    pub kind: LocalConvKind,
    pub c_in: usize,
    pub rel_pos: bool,
    pub mlp: Mlp,
}

impl LocalConv {
    pub fn new(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        kind: LocalConvKind,
        c_in: usize,
        widths: &[usize],
        rel_pos: bool,
    ) -> Result<Self> {
        let edge = kind.edge_width(c_in, rel_pos);
        let mlp = Mlp::new(params, init, name, edge, widths, true)?;
        Ok(LocalConv {
            kind,
            c_in,
            rel_pos,
            mlp,
        })
    }

    pub fn c_out(&self) -> usize {
        self.mlp.c_out()
    }

    fn check_width(&self, what: &str, t: &Tensor) -> Result<()> {
        if t.shape().last() != Some(&self.c_in) {
            return Err(Error::shape(format!(
                "{what}: expected {} channels, got {:?}",
                self.c_in,
                t.shape()
            )));
        }
        Ok(())
    }

    fn check_rel_pos(&self, rel_pos: bool) -> Result<()> {
        if rel_pos != self.rel_pos {
            return Err(Error::shape(format!(
                "local conv configured with rel_pos = {}, called with rel_pos = {rel_pos}",
                self.rel_pos
            )));
        }
        Ok(())
    }

    /// `max_j MLP(concat(neigh_f[n][j], rel_pos[n][j]))` over pre-gathered
    /// neighbors (`N x k x C`, `N x k x 3`).
    pub fn shared_mlp_pool(
        &self,
        bound: &Bound,
        neigh_f: &Tensor,
        rel_pos: Option<&Tensor>,
    ) -> Result<Tensor> {
        if self.kind != LocalConvKind::SharedMlpPool {
            return Err(Error::invalid("shared_mlp_pool called on an EdgeConv"));
        }
        self.check_width("neighbor features", neigh_f)?;
        self.check_rel_pos(rel_pos.is_some())?;
        let tape = bound.tape;
        let edge = match rel_pos {
            Some(r) => tape.concat(&[neigh_f, r])?,
            None => neigh_f.clone(),
        };
        tape.max_reduce(&self.mlp.forward(bound, &edge)?)
    }

    /// `max_j MLP(concat(c[n], f[n][j] - c[n], rel_pos[n][j]))` over
    /// pre-gathered neighbors.
    pub fn edge_conv(
        &self,
        bound: &Bound,
        center_f: &Tensor,
        neigh_f: &Tensor,
        rel_pos: Option<&Tensor>,
    ) -> Result<Tensor> {
        if self.kind != LocalConvKind::EdgeConv {
            return Err(Error::invalid("edge_conv called on a SharedMlpPool"));
        }
        self.check_width("center features", center_f)?;
        self.check_width("neighbor features", neigh_f)?;
        self.check_rel_pos(rel_pos.is_some())?;
        let tape = bound.tape;
        let shape = neigh_f.shape();
        if shape.len() != 3 || center_f.shape() != [shape[0], shape[2]] {
            return Err(Error::shape(format!(
                "edge_conv: centers {:?} with neighbors {:?}",
                center_f.shape(),
                shape
            )));
        }
        let expanded = tape.add_center(&Tensor::zeros(shape), center_f)?;
        let diff = tape.sub_center(neigh_f, center_f)?;
        let edge = match rel_pos {
            Some(r) => tape.concat(&[&expanded, &diff, r])?,
            None => tape.concat(&[&expanded, &diff])?,
        };
        tape.max_reduce(&self.mlp.forward(bound, &edge)?)
    }

    /// Convolves every query's neighborhood, `M x C_out`.
    pub fn apply(&self, bound: &Bound, nb: &Neighborhood) -> Result<Tensor> {
        let tape = bound.tape;
        self.check_width("features", nb.features)?;
        self.check_width("centers", nb.centers)?;
        self.check_rel_pos(nb.positions.is_some())?;
        let (n, c) = (nb.features.shape()[0], self.c_in);
        let m = nb.centers.shape()[0];
        if nb.neighbors.rows() != m {
            return Err(Error::shape(format!(
                "{} neighbor rows for {m} queries",
                nb.neighbors.rows()
            )));
        }
        if nb.neighbors.max_index() >= n {
            return Err(Error::IndexOutOfRange {
                index: nb.neighbors.max_index(),
                len: n,
            });
        }
        if let Some(p) = nb.positions {
            if p.points.shape() != [n, 3] || p.queries.shape() != [m, 3] {
                return Err(Error::shape(format!(
                    "positions {:?} / queries {:?} for {n} points and {m} queries",
                    p.points.shape(),
                    p.queries.shape()
                )));
            }
        }

        let first = &self.mlp.layers[0];
        let w = bound.get(first.weight);
        let (neigh_w, center_w) = match self.kind {
            LocalConvKind::SharedMlpPool => (tape.slice_rows(w, 0, c)?, None),
            LocalConvKind::EdgeConv => {
                let wc = tape.slice_rows(w, 0, c)?;
                let wd = tape.slice_rows(w, c, 2 * c)?;
                let combined = tape.sub(&wc, &wd)?;
                (wd, Some(combined))
            }
        };
        let mut per_point = tape.matmul(nb.features, &neigh_w)?;
        let mut per_center = match &center_w {
            Some(wc) => Some(tape.matmul(nb.centers, wc)?),
            None => None,
        };
        if let Some(p) = nb.positions {
            let off = self.kind.edge_width(c, false);
            let wp = tape.slice_rows(w, off, off + 3)?;
            per_point = tape.add(&per_point, &tape.matmul(p.points, &wp)?)?;
            let q = tape.matmul(p.queries, &wp)?;
            per_center = Some(match per_center {
                Some(a) => tape.sub(&a, &q)?,
                None => tape.scale(&q, -1.0),
            });
        }
        let k = nb.neighbors.k();
        if self.mlp.layers.len() == 1 {
            // the center and bias terms are constant over a neighborhood and
            // the activation is monotone, so pooling can come first
            let mut pooled = tape.gather_max(&per_point, nb.neighbors.as_flat(), k)?;
            if let Some(a) = per_center {
                pooled = tape.add(&pooled, &a)?;
            }
            let pre = tape.add_bias(&pooled, bound.get(first.bias))?;
            return match self.mlp.final_activation {
                true => tape.leaky_relu(&pre, LEAKY_SLOPE),
                false => Ok(pre),
            };
        }
        let mut pre = tape.gather_rows(&per_point, nb.neighbors.as_flat(), k)?;
        if let Some(a) = per_center {
            pre = tape.add_center(&pre, &a)?;
        }
        let pre = tape.add_bias(&pre, bound.get(first.bias))?;
        let h = self.mlp.forward_from_first(bound, &pre)?;
        tape.max_reduce(&h)
    }
}
