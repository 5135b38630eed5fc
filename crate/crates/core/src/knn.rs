//! Exact k-nearest-neighbor search.
//!
//! Euclidean queries over 3-D positions go through a kd-tree; feature-space
//! queries use an exhaustive scan with early abandonment since trees
//! degrade at high dimension. Both use squared Euclidean distance and return neighbors in
//! ascending `(distance, index)` order, so equal distances come back in
//! ascending index order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;
const SCAN_CHUNK: usize = 8;
/// Query rows per matrix product in the filtered batch search.
const FILTER_BLOCK: usize = 64;
/// Below `rows x cols` of this, batches use the plain scan.
const FILTER_MIN_WORK: usize = 2048;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Best {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Whether a region at squared distance `d` could still hold a winner.
    #[inline]
    fn admits(&self, d: f64) -> bool {
        self.heap.len() < self.k || self.heap.peek().is_some_and(|w| d <= w.dist)
    }

    fn into_sorted(self) -> Vec<usize> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| c.index)
            .collect()
    }
}

/// Result of a single query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    /// Set when `k` exceeded the point count and the result was shortened.
    pub clamped: bool,
}

/// `rows x k` neighbor indices, row-major; row `r` is sorted by distance
/// to query `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMatrix {
    idx: Vec<usize>,
    rows: usize,
    k: usize,
}

impl NeighborMatrix {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape(
                "neighbor rows must be non-empty and equal length",
            ));
        }
        Ok(NeighborMatrix {
            rows: rows.len(),
            k,
            idx: rows.concat(),
        })
    }

    pub(crate) fn from_flat(idx: Vec<usize>, k: usize) -> Self {
        debug_assert!(k > 0 && idx.len().is_multiple_of(k));
        NeighborMatrix {
            rows: idx.len() / k,
            k,
            idx,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.idx[r * self.k..(r + 1) * self.k]
    }

    pub fn as_flat(&self) -> &[usize] {
        &self.idx
    }

    /// Largest index referenced, for range checks against a point set.
    pub fn max_index(&self) -> usize {
        self.idx.iter().copied().max().unwrap_or(0)
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn hstack(parts: &[NeighborMatrix]) -> Result<Self> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::shape("hstack: no parts"))?
            .rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("hstack: row counts differ"));
        }
        let k: usize = parts.iter().map(|p| p.k).sum();
        let mut idx = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for p in parts {
                idx.extend_from_slice(p.row(r));
            }
        }
        Ok(NeighborMatrix { idx, rows, k })
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a fixed 3-D point set.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KnnIndex {
    /// Builds an index over `N x 3` row-major coordinates.
    pub fn build(coords: &[f64]) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "expected a non-empty N x 3 coordinate array, got {} values",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let points: Vec<[f64; 3]> = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut index = KnnIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// The `min(k, N)` nearest points to `query`, which need not belong to
    /// the indexed set.
    pub fn query(&self, query: [f64; 3], k: usize) -> Result<Neighbors> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let kk = k.min(self.len());
        let mut best = Best::new(kk);
        self.search(0, &query, &mut best);
        Ok(Neighbors {
            indices: best.into_sorted(),
            clamped: kk < k,
        })
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut Best) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    best.offer(Candidate {
                        dist: sq_dist(q, &self.points[i]),
                        index: i,
                    });
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                if best.admits(diff * diff) {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Row `m` holds the neighbors of `queries[m]` (an `M x 3` array).
    pub fn batch(&self, queries: &[f64], k: usize) -> Result<NeighborMatrix> {
        if queries.is_empty() || !queries.len().is_multiple_of(3) {
            return Err(Error::shape(format!(
                "queries must be M x 3, got {} values",
                queries.len()
            )));
        }
        let kk = k.min(self.len());
        let mut idx = Vec::with_capacity(queries.len() / 3 * kk);
        for q in queries.chunks_exact(3) {
            idx.extend(self.query([q[0], q[1], q[2]], k)?.indices);
        }
        Ok(NeighborMatrix::from_flat(idx, kk))
    }
}

/// Borrowed `N x C` feature rows searched by exhaustive scan.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet<'a> {
    data: &'a [f64],
    cols: usize,
}

impl<'a> FeatureSet<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Result<Self> {
        if cols == 0 || data.is_empty() || !data.len().is_multiple_of(cols) {
            return Err(Error::shape(format!(
                "feature set of {} values does not split into rows of {cols}",
                data.len()
            )));
        }
        Ok(FeatureSet { data, cols })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn query(&self, query: &[f64], k: usize) -> Result<Neighbors> {
        if query.len() != self.cols {
            return Err(Error::shape(format!(
                "query has {} channels, features have {}",
                query.len(),
                self.cols
            )));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let kk = k.min(self.len());
        Ok(Neighbors {
            indices: self.select(query, kk),
            clamped: kk < k,
        })
    }

    /// Scans rows in index order. A row is abandoned once its partial sum
    /// exceeds the current k-th distance; the sum runs in the same order as
    /// [`sq_dist`], so surviving distances are bit-identical to it.
    fn select(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut best = Best::new(k);
        let mut bound = f64::INFINITY;
        for (index, row) in self.data.chunks_exact(self.cols).enumerate() {
            let mut dist = 0.0;
            for (qa, ra) in query.chunks(SCAN_CHUNK).zip(row.chunks(SCAN_CHUNK)) {
                for (x, y) in qa.iter().zip(ra) {
                    let d = x - y;
                    dist += d * d;
                }
                if dist > bound {
                    break;
                }
            }
            if dist <= bound {
                best.offer(Candidate { dist, index });
                if best.heap.len() == k {
                    bound = best.heap.peek().map_or(f64::INFINITY, |w| w.dist);
                }
            }
        }
        best.into_sorted()
    }

    pub fn batch(&self, queries: &[f64], k: usize) -> Result<NeighborMatrix> {
        if queries.is_empty() || !queries.len().is_multiple_of(self.cols) {
            return Err(Error::shape(format!(
                "queries of {} values do not split into rows of {}",
                queries.len(),
                self.cols
            )));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let kk = k.min(self.len());
        let mut idx = Vec::with_capacity(queries.len() / self.cols * kk);
        let norms: Vec<f64> = self
            .data
            .chunks_exact(self.cols)
            .map(|r| dot(r, r))
            .collect();
        if self.len() * self.cols < FILTER_MIN_WORK || norms.iter().any(|v| !v.is_finite()) {
            for q in queries.chunks_exact(self.cols) {
                idx.extend(self.select(q, kk));
            }
        } else {
            self.filtered_batch(queries, kk, &norms, &mut idx);
        }
        Ok(NeighborMatrix::from_flat(idx, kk))
    }

    /// Batch search that ranks rows by `|q|^2 + |x|^2 - 2 q.x` from one
    /// matrix product, keeps every row whose error interval reaches the
    /// k-th smallest upper bound, and ranks the survivors by the exact
    /// [`sq_dist`]. The result equals [`FeatureSet::select`] per query.
    fn filtered_batch(&self, queries: &[f64], k: usize, norms: &[f64], idx: &mut Vec<usize>) {
        let (n, c) = (self.len(), self.cols);
        // bound on the rounding error of the expanded form, relative to
        // |q|^2 + |x|^2, with a factor of two to spare
        let slack = f64::EPSILON * (4 * c + 16) as f64;
        let mut prod = vec![0.0; FILTER_BLOCK.min(queries.len() / c) * n];
        let mut upper = Vec::with_capacity(n);
        for block in queries.chunks(FILTER_BLOCK * c) {
            let m = block.len() / c;
            let prod = &mut prod[..m * n];
            crate::tensor::gemm(
                m, c, n, block, c as isize, 1, self.data, 1, c as isize, prod, 0.0,
            );
            for (qi, q) in block.chunks_exact(c).enumerate() {
                let qn = dot(q, q);
                if !qn.is_finite() {
                    idx.extend(self.select(q, k));
                    continue;
                }
                let row = &prod[qi * n..(qi + 1) * n];
                let approx = |j: usize| (qn + norms[j] - 2.0 * row[j], slack * (qn + norms[j]));
                upper.clear();
                upper.extend((0..n).map(|j| {
                    let (d, e) = approx(j);
                    d + e
                }));
                let tau = if k < n {
                    *upper.select_nth_unstable_by(k - 1, f64::total_cmp).1
                } else {
                    f64::INFINITY
                };
                let mut best = Best::new(k);
                for j in 0..n {
                    let (d, e) = approx(j);
                    if d - e <= tau {
                        best.offer(Candidate {
                            dist: sq_dist(q, &self.data[j * c..(j + 1) * c]),
                            index: j,
                        });
                    }
                }
                idx.extend(best.into_sorted());
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Either search space, for callers that dispatch on configuration.
#[derive(Debug, Clone, Copy)]
pub enum SearchSpace<'a> {
    Euclidean(&'a KnnIndex),
    Feature(FeatureSet<'a>),
}

impl SearchSpace<'_> {
    pub fn len(&self) -> usize {
        match self {
            SearchSpace::Euclidean(i) => i.len(),
            SearchSpace::Feature(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, queries: &[f64], k: usize) -> Result<NeighborMatrix> {
        match self {
            SearchSpace::Euclidean(i) => i.batch(queries, k),
            SearchSpace::Feature(f) => f.batch(queries, k),
        }
    }

    /// Neighborhoods of the indexed points themselves (`queries` must be
    /// the indexed rows). With `include_self == false` the query's own
    /// index is dropped from its row.
    pub fn self_neighbors(
        &self,
        queries: &[f64],
        k: usize,
        include_self: bool,
    ) -> Result<NeighborMatrix> {
        if include_self {
            return self.batch(queries, k);
        }
        if k + 1 > self.len() {
            return Err(Error::invalid(format!(
                "self-exclusive neighborhoods need more than k = {k} points, have {}",
                self.len()
            )));
        }
        let wide = self.batch(queries, k + 1)?;
        let mut idx = Vec::with_capacity(wide.rows() * k);
        for r in 0..wide.rows() {
            let row = wide.row(r);
            match row.iter().position(|&j| j == r) {
                Some(p) => idx.extend(
                    row.iter()
                        .enumerate()
                        .filter(|&(c, _)| c != p)
                        .map(|(_, &j)| j),
                ),
                None => idx.extend_from_slice(&row[..k]),
            }
        }
        Ok(NeighborMatrix::from_flat(idx, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full sort by `(distance, index)`; the oracle for every search path.
    fn brute(points: &[f64], cols: usize, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .chunks_exact(cols)
            .enumerate()
            .map(|(i, p)| {
                let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> Vec<f64> {
        (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn hand_example() {
        let idx = KnnIndex::build(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(idx.query([0.9, 0.0, 0.0], 2).unwrap().indices, vec![1, 0]);
        assert_eq!(idx.query([3.0, 0.0, 0.0], 1).unwrap().indices, vec![2]);
    }

    #[test]
    fn single_point_and_clamp() {
        let idx = KnnIndex::build(&[0.5, 0.5, 0.5]).unwrap();
        let r = idx.query([9.0, -3.0, 2.0], 4).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert!(r.clamped);
        assert!(!idx.query([0.0; 3], 1).unwrap().clamped);
    }

    #[test]
    fn empty_and_zero_k_rejected() {
        assert!(KnnIndex::build(&[]).is_err());
        let idx = KnnIndex::build(&[0.0; 3]).unwrap();
        assert!(idx.query([0.0; 3], 0).is_err());
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let mut coords = vec![0.0; 3 * 40];
        coords.extend([1.0, 1.0, 1.0]);
        let idx = KnnIndex::build(&coords).unwrap();
        let r = idx.query([0.0; 3], 5).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn thousand_points_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(&mut rng, 1000, 3);
        let idx = KnnIndex::build(&pts).unwrap();
        for _ in 0..500 {
            let q = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            ];
            let k = rng.gen_range(1..30);
            assert_eq!(idx.query(q, k).unwrap().indices, brute(&pts, 3, &q, k));
        }
    }

    #[test]
    fn feature_one_hot_and_ties() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let fs = FeatureSet::new(&eye, 3).unwrap();
        assert_eq!(fs.query(&[1.0, 0.0, 0.0], 1).unwrap().indices, vec![0]);
        let same = vec![0.25; 6 * 4];
        let fs = FeatureSet::new(&same, 4).unwrap();
        assert_eq!(fs.query(&[3.0; 4], 4).unwrap().indices, vec![0, 1, 2, 3]);
        assert!(fs.query(&[1.0; 3], 1).is_err());
    }

    #[test]
    fn feature_scan_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = random_points(&mut rng, 200, 64);
        let fs = FeatureSet::new(&feats, 64).unwrap();
        for _ in 0..50 {
            let q = random_points(&mut rng, 1, 64);
            assert_eq!(fs.query(&q, 10).unwrap().indices, brute(&feats, 64, &q, 10));
        }
    }

    #[test]
    fn batch_is_rowwise_single_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 300, 3);
        let idx = KnnIndex::build(&pts).unwrap();
        let queries = random_points(&mut rng, 40, 3);
        let m = idx.batch(&queries, 6).unwrap();
        assert_eq!(m.rows(), 40);
        for (r, q) in queries.chunks_exact(3).enumerate() {
            assert_eq!(m.row(r), idx.query([q[0], q[1], q[2]], 6).unwrap().indices);
        }
        let one = idx.batch(&queries[..3], 6).unwrap();
        assert_eq!(one.row(0), m.row(0));

        let selfs = idx.batch(&pts, 1).unwrap();
        for r in 0..300 {
            assert_eq!(selfs.row(r), &[r]);
        }
    }

    #[test]
    fn feature_batch_is_rowwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = random_points(&mut rng, 90, 7);
        let fs = FeatureSet::new(&feats, 7).unwrap();
        let queries = random_points(&mut rng, 12, 7);
        let m = fs.batch(&queries, 5).unwrap();
        for (r, q) in queries.chunks_exact(7).enumerate() {
            assert_eq!(m.row(r), fs.query(q, 5).unwrap().indices);
        }
    }

    #[test]
    fn filtered_batch_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (n, c, k) in [(300, 16, 20), (150, 64, 1), (64, 40, 64)] {
            let mut feats = random_points(&mut rng, n, c);
            // duplicate rows and large offsets stress ties and cancellation
            feats.copy_within(0..c * 10, c * 20);
            for v in feats.iter_mut().step_by(3) {
                *v += 1e3;
            }
            let fs = FeatureSet::new(&feats, c).unwrap();
            let mut queries = random_points(&mut rng, 70, c);
            queries[..c * 30].copy_from_slice(&feats[..c * 30]);
            let m = fs.batch(&queries, k).unwrap();
            for (r, q) in queries.chunks_exact(c).enumerate() {
                assert_eq!(
                    m.row(r),
                    fs.select(q, k.min(n)).as_slice(),
                    "n={n} c={c} row {r}"
                );
                assert_eq!(m.row(r), brute(&feats, c, q, k).as_slice());
            }
        }
    }

    #[test]
    fn self_exclusion_drops_own_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(&mut rng, 50, 3);
        let idx = KnnIndex::build(&pts).unwrap();
        let space = SearchSpace::Euclidean(&idx);
        let incl = space.self_neighbors(&pts, 4, true).unwrap();
        let excl = space.self_neighbors(&pts, 4, false).unwrap();
        for r in 0..50 {
            assert_eq!(incl.row(r)[0], r);
            assert!(!excl.row(r).contains(&r));
            assert_eq!(&excl.row(r)[..3], &incl.row(r)[1..]);
        }
    }

    #[test]
    fn hstack_interleaves_rows() {
        let a = NeighborMatrix::from_rows(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let b = NeighborMatrix::from_rows(vec![vec![4], vec![5]]).unwrap();
        let c = NeighborMatrix::hstack(&[a, b]).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(c.row(1), &[2, 3, 5]);
    }
}
