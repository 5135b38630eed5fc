//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is an immutable row-major array. Operations are methods on a
//! [`Tape`]; when at least one input is on the tape the result is recorded,
//! otherwise it is a plain constant and nothing is stored. Calling
//! [`Tape::backward`] on a scalar consumes the tape once and returns the
//! gradients of every `requires_grad` leaf.
//!
//! ```
//! use dapconv::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(&w, &w).unwrap();
//! let loss = tape.scale(&tape.sum(&sq), 0.5);
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&w).unwrap(), &[1.0, -2.0, 0.5]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Opaque handle of a node recorded on a [`Tape`].
pub type NodeId = usize;

/// Dense row-major array with optional tape participation.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("requires_grad", &self.requires_grad)
            .finish_non_exhaustive()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Returns the same values detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
            requires_grad: false,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Tensor,
        b: Tensor,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        x: NodeId,
        s: f64,
    },
    AddBias {
        x: Option<NodeId>,
        bias: Option<NodeId>,
        cols: usize,
    },
    AddCenter {
        x: Option<NodeId>,
        center: Option<NodeId>,
        k: usize,
        cols: usize,
        sign: f64,
    },
    LeakyRelu {
        x: NodeId,
        input: Tensor,
        slope: f64,
    },
    Gather {
        x: NodeId,
        idx: Arc<[usize]>,
        rows_in: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        rows: usize,
    },
    MaxReduce {
        x: NodeId,
        argmax: Vec<usize>,
        in_len: usize,
    },
    Reshape {
        x: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        cols: usize,
    },
    Sum {
        x: NodeId,
        len: usize,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
}

struct Node {
    len: usize,
    op: Op,
}

/// Records operations for a single reverse pass.
///
/// A tape is confined to one thread; independent samples use separate tapes.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the tensor is not a leaf on this tape.
    /// Leaves that the loss does not depend on get zeros.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|n| self.by_node.get(&n)).map(Vec::as_slice)
    }

    pub fn get_node(&self, node: NodeId) -> Option<&[f64]> {
        self.by_node.get(&node).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.by_node.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees the strides stay within the slices;
    // every call site below derives them from validated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, len: usize, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, op });
        nodes.len() - 1
    }

    fn emit(&self, shape: Vec<usize>, data: Vec<f64>, op: Option<Op>) -> Tensor {
        let mut t = Tensor::raw(shape, data);
        if let Some(op) = op {
            t.node = Some(self.push(t.len(), op));
        }
        t
    }

    /// Registers a trainable leaf.
    pub fn param(&self, t: Tensor) -> Tensor {
        let node = self.push(t.len(), Op::Leaf);
        Tensor {
            node: Some(node),
            requires_grad: true,
            ..t
        }
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out, 0.0,
        );
        let op = (a.node.is_some() || b.node.is_some()).then(|| Op::MatMul {
            a: a.clone(),
            b: b.clone(),
        });
        Ok(self.emit(vec![m, n], out, op))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let out = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let op = (a.node.is_some() || b.node.is_some()).then_some(Op::Add {
            a: a.node,
            b: b.node,
        });
        Ok(self.emit(a.shape.clone(), out, op))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let out = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let op = (a.node.is_some() || b.node.is_some()).then_some(Op::Sub {
            a: a.node,
            b: b.node,
        });
        Ok(self.emit(a.shape.clone(), out, op))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let out = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let op = (a.node.is_some() || b.node.is_some()).then(|| Op::Mul {
            a: a.clone(),
            b: b.clone(),
        });
        Ok(self.emit(a.shape.clone(), out, op))
    }

    pub fn scale(&self, x: &Tensor, s: f64) -> Tensor {
        let out = x.data.iter().map(|v| v * s).collect();
        let op = x.node.map(|x| Op::Scale { x, s });
        self.emit(x.shape.clone(), out, op)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let cols = x.last_dim();
        if bias.len() != cols || bias.shape.len() != 1 {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                x.shape, bias.shape
            )));
        }
        let mut out = x.data.to_vec();
        for row in out.chunks_exact_mut(cols) {
            add_into(row, &bias.data);
        }
        let op = (x.node.is_some() || bias.node.is_some()).then_some(Op::AddBias {
            x: x.node,
            bias: bias.node,
            cols,
        });
        Ok(self.emit(x.shape.clone(), out, op))
    }

    /// `x[n, j, :] + center[n, :]` for every `j` of an `N x k x C` tensor.
    pub fn add_center(&self, x: &Tensor, center: &Tensor) -> Result<Tensor> {
        self.center_op(x, center, 1.0)
    }

    /// `x[n, j, :] - center[n, :]` for every `j` of an `N x k x C` tensor.
    pub fn sub_center(&self, x: &Tensor, center: &Tensor) -> Result<Tensor> {
        self.center_op(x, center, -1.0)
    }

    fn center_op(&self, x: &Tensor, center: &Tensor, sign: f64) -> Result<Tensor> {
        if x.shape.len() != 3
            || center.shape.len() != 2
            || x.shape[0] != center.shape[0]
            || x.shape[2] != center.shape[1]
        {
            return Err(Error::shape(format!(
                "center broadcast: {:?} with {:?}",
                x.shape, center.shape
            )));
        }
        let (k, cols) = (x.shape[1], x.shape[2]);
        let mut out = x.data.to_vec();
        for (n, block) in out.chunks_exact_mut(k * cols).enumerate() {
            let c = &center.data[n * cols..(n + 1) * cols];
            for row in block.chunks_exact_mut(cols) {
                for (o, v) in row.iter_mut().zip(c) {
                    *o += sign * v;
                }
            }
        }
        let op = (x.node.is_some() || center.node.is_some()).then_some(Op::AddCenter {
            x: x.node,
            center: center.node,
            k,
            cols,
            sign,
        });
        Ok(self.emit(x.shape.clone(), out, op))
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(format!(
                "leaky_relu slope {slope} not in [0, 1)"
            )));
        }
        let out = x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let op = x.node.map(|node| Op::LeakyRelu {
            x: node,
            input: x.clone(),
            slope,
        });
        Ok(self.emit(x.shape.clone(), out, op))
    }

    /// Gathers rows of a 2-D tensor: `out[n][j] = x[idx[n * k + j]]`,
    /// giving shape `(idx.len() / k) x k x C`.
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize], k: usize) -> Result<Tensor> {
        let idx: Arc<[usize]> = idx.into();
        self.gather_rows_shared(x, idx, k)
    }

    pub(crate) fn gather_rows_shared(
        &self,
        x: &Tensor,
        idx: Arc<[usize]>,
        k: usize,
    ) -> Result<Tensor> {
        if x.shape.len() != 2 {
            return Err(Error::shape(format!(
                "gather_rows: expected 2-D, got {:?}",
                x.shape
            )));
        }
        if k == 0 || idx.is_empty() || !idx.len().is_multiple_of(k) {
            return Err(Error::shape(format!(
                "gather_rows: {} indices do not split into rows of {k}",
                idx.len()
            )));
        }
        let (rows_in, cols) = (x.shape[0], x.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows_in) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: rows_in,
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
        }
        let shape = vec![idx.len() / k, k, cols];
        let op = x.node.map(|node| Op::Gather {
            x: node,
            idx,
            rows_in,
            cols,
        });
        Ok(self.emit(shape, out, op))
    }

    /// Concatenates along the last axis.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat: no parts"))?;
        let lead = &first.shape[..first.shape.len().saturating_sub(1)];
        for p in parts {
            if p.shape.is_empty() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let rows = numel(lead);
        let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let op = parts.iter().any(|p| p.node.is_some()).then(|| Op::Concat {
            parts: parts
                .iter()
                .zip(&widths)
                .map(|(p, &w)| (p.node, w))
                .collect(),
            rows,
        });
        Ok(self.emit(shape, out, op))
    }

    /// Maximum over the middle axis of an `N x k x C` tensor.
    ///
    /// Ties go to the lowest neighbor index, and the backward pass routes
    /// each output gradient to that single element.
    pub fn max_reduce(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 3 {
            return Err(Error::shape(format!(
                "max_reduce: expected N x k x C, got {:?}",
                x.shape
            )));
        }
        let (n, k, c) = (x.shape[0], x.shape[1], x.shape[2]);
        if k == 0 {
            return Err(Error::shape("max_reduce: empty reduction axis"));
        }
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for block in 0..n {
            let base = block * k * c;
            out.extend_from_slice(&x.data[base..base + c]);
            argmax.extend(base..base + c);
            let (best, arg) = (&mut out[block * c..], &mut argmax[block * c..]);
            for j in 1..k {
                let start = base + j * c;
                for (ch, &v) in x.data[start..start + c].iter().enumerate() {
                    if v > best[ch] {
                        best[ch] = v;
                        arg[ch] = start + ch;
                    }
                }
            }
        }
        let op = x.node.map(|node| Op::MaxReduce {
            x: node,
            argmax,
            in_len: x.len(),
        });
        Ok(self.emit(vec![n, c], out, op))
    }

    /// `out[n][c] = max_j x[idx[n * k + j]][c]`: a row gather followed by
    /// a max over each group of `k`, without materializing the gather.
    /// Ties go to the first index in the group.
    pub fn gather_max(&self, x: &Tensor, idx: &[usize], k: usize) -> Result<Tensor> {
        if x.shape.len() != 2 {
            return Err(Error::shape(format!(
                "gather_max: expected 2-D, got {:?}",
                x.shape
            )));
        }
        if k == 0 || idx.is_empty() || !idx.len().is_multiple_of(k) {
            return Err(Error::shape(format!(
                "gather_max: {} indices do not split into rows of {k}",
                idx.len()
            )));
        }
        let (rows_in, c) = (x.shape[0], x.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows_in) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: rows_in,
            });
        }
        let n = idx.len() / k;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (row, group) in idx.chunks_exact(k).enumerate() {
            let first = group[0] * c;
            out.extend_from_slice(&x.data[first..first + c]);
            argmax.extend(first..first + c);
            let (best, arg) = (&mut out[row * c..], &mut argmax[row * c..]);
            for &i in &group[1..] {
                let start = i * c;
                for (ch, &v) in x.data[start..start + c].iter().enumerate() {
                    if v > best[ch] {
                        best[ch] = v;
                        arg[ch] = start + ch;
                    }
                }
            }
        }
        let op = x.node.map(|node| Op::MaxReduce {
            x: node,
            argmax,
            in_len: x.len(),
        });
        Ok(self.emit(vec![n, c], out, op))
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != x.len() || shape.contains(&0) {
            return Err(Error::shape(format!("reshape: {:?} -> {shape:?}", x.shape)));
        }
        let mut t = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
            node: None,
            requires_grad: false,
        };
        if let Some(node) = x.node {
            t.node = Some(self.push(x.len(), Op::Reshape { x: node }));
        }
        Ok(t)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if x.shape.len() != 2 || start >= end || end > x.shape[0] {
            return Err(Error::shape(format!(
                "slice_rows {start}..{end} of {:?}",
                x.shape
            )));
        }
        let cols = x.shape[1];
        let out = x.data[start * cols..end * cols].to_vec();
        let op = x.node.map(|node| Op::SliceRows {
            x: node,
            start,
            cols,
        });
        Ok(self.emit(vec![end - start, cols], out, op))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s = x.data.iter().sum();
        let op = x.node.map(|node| Op::Sum {
            x: node,
            len: x.len(),
        });
        self.emit(Vec::new(), vec![s], op)
    }

    pub fn mean(&self, x: &Tensor) -> Tensor {
        let s = self.sum(x);
        self.scale(&s, 1.0 / x.len() as f64)
    }

    /// Mean softmax cross-entropy of `M x C` logits against `M` labels,
    /// computed with a max-shifted log-sum-exp.
    pub fn cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if logits.shape.len() != 2 || logits.shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} with {} labels",
                logits.shape,
                labels.len()
            )));
        }
        let classes = logits.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: classes,
            });
        }
        let mut probs = vec![0.0; logits.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        let op = logits.node.map(|node| Op::CrossEntropy {
            logits: node,
            probs,
            labels: labels.to_vec(),
            classes,
        });
        Ok(self.emit(Vec::new(), vec![loss], op))
    }

    /// Runs the reverse pass from a scalar loss.
    ///
    /// Gradients accumulate additively where a node has several consumers.
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Backward("loss is not on the tape".into()))?;
        if self.consumed.replace(true) {
            return Err(Error::Backward("tape already consumed".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        fn acc<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            lens: &[Node],
            id: NodeId,
        ) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; lens[id].len])
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                    if let Some(an) = a.node {
                        let da = acc(&mut grads, &nodes, an);
                        // dA += dC * B^T
                        gemm(m, n, k, &g, n as isize, 1, &b.data, 1, n as isize, da, 1.0);
                    }
                    if let Some(bn) = b.node {
                        let db = acc(&mut grads, &nodes, bn);
                        // dB += A^T * dC
                        gemm(k, m, n, &a.data, 1, k as isize, &g, n as isize, 1, db, 1.0);
                    }
                }
                Op::Add { a, b } => {
                    if let Some(a) = *a {
                        add_into(acc(&mut grads, &nodes, a), &g);
                    }
                    if let Some(b) = *b {
                        add_into(acc(&mut grads, &nodes, b), &g);
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(a) = *a {
                        add_into(acc(&mut grads, &nodes, a), &g);
                    }
                    if let Some(b) = *b {
                        for (d, v) in acc(&mut grads, &nodes, b).iter_mut().zip(&g) {
                            *d -= v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(an) = a.node {
                        let da = acc(&mut grads, &nodes, an);
                        for ((d, v), y) in da.iter_mut().zip(&g).zip(b.data.iter()) {
                            *d += v * y;
                        }
                    }
                    if let Some(bn) = b.node {
                        let db = acc(&mut grads, &nodes, bn);
                        for ((d, v), x) in db.iter_mut().zip(&g).zip(a.data.iter()) {
                            *d += v * x;
                        }
                    }
                }
                Op::Scale { x, s } => {
                    for (d, v) in acc(&mut grads, &nodes, *x).iter_mut().zip(&g) {
                        *d += s * v;
                    }
                }
                Op::AddBias { x, bias, cols } => {
                    if let Some(x) = *x {
                        add_into(acc(&mut grads, &nodes, x), &g);
                    }
                    if let Some(b) = *bias {
                        let db = acc(&mut grads, &nodes, b);
                        for row in g.chunks_exact(*cols) {
                            add_into(db, row);
                        }
                    }
                }
                Op::AddCenter {
                    x,
                    center,
                    k,
                    cols,
                    sign,
                } => {
                    if let Some(x) = *x {
                        add_into(acc(&mut grads, &nodes, x), &g);
                    }
                    if let Some(c) = *center {
                        let dc = acc(&mut grads, &nodes, c);
                        for (n, block) in g.chunks_exact(k * cols).enumerate() {
                            let dst = &mut dc[n * cols..(n + 1) * cols];
                            for row in block.chunks_exact(*cols) {
                                for (d, v) in dst.iter_mut().zip(row) {
                                    *d += sign * v;
                                }
                            }
                        }
                    }
                }
                Op::LeakyRelu { x, input, slope } => {
                    let dx = acc(&mut grads, &nodes, *x);
                    for ((d, v), xin) in dx.iter_mut().zip(&g).zip(input.data.iter()) {
                        *d += if *xin > 0.0 { *v } else { slope * v };
                    }
                }
                Op::Gather {
                    x,
                    idx,
                    rows_in,
                    cols,
                } => {
                    let dx = acc(&mut grads, &nodes, *x);
                    debug_assert_eq!(dx.len(), rows_in * cols);
                    for (row, &i) in g.chunks_exact(*cols).zip(idx.iter()) {
                        add_into(&mut dx[i * cols..(i + 1) * cols], row);
                    }
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(node, w) in parts {
                        if let Some(node) = node {
                            let dp = acc(&mut grads, &nodes, node);
                            for r in 0..*rows {
                                add_into(
                                    &mut dp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::MaxReduce { x, argmax, in_len } => {
                    let dx = acc(&mut grads, &nodes, *x);
                    debug_assert_eq!(dx.len(), *in_len);
                    for (v, &pos) in g.iter().zip(argmax) {
                        dx[pos] += v;
                    }
                }
                Op::Reshape { x } => {
                    add_into(acc(&mut grads, &nodes, *x), &g);
                }
                Op::SliceRows { x, start, cols } => {
                    let dx = acc(&mut grads, &nodes, *x);
                    add_into(&mut dx[start * cols..start * cols + g.len()], &g);
                }
                Op::Sum { x, len } => {
                    let dx = acc(&mut grads, &nodes, *x);
                    debug_assert_eq!(dx.len(), *len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    classes,
                } => {
                    let scale = g[0] / labels.len() as f64;
                    let dl = acc(&mut grads, &nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &probs[r * classes..(r + 1) * classes];
                        for (c, p) in row.iter().enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (p - target);
                        }
                    }
                }
            }
        }

        let by_node = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(id, n)| {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; n.len]);
                (id, g)
            })
            .collect();
        Ok(Gradients { by_node })
    }
}
