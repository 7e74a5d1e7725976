//! Point-cloud modality: farthest point sampling, dynamic kNN graphs and an
//! EdgeConv stack with global max pooling.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numkit::{ParamStore, Tape, Tensor, Var};

/// An object's surface samples in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub object_id: String,
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(object_id: impl Into<String>, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "point cloud" });
        }
        Ok(PointCloud {
            object_id: object_id.into(),
            points,
        })
    }

    /// Reads an `n × 3` tensor.
    pub fn from_tensor(object_id: impl Into<String>, t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::shape("point cloud", t.shape(), &[0, 3]));
        }
        let points = t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        PointCloud::new(object_id, points)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::from_raw(vec![self.points.len(), 3], data)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Translates the centroid to the origin and scales the largest radius to 1.
    pub fn normalize(&mut self) {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        let mut r_max: f64 = 0.0;
        for p in &mut self.points {
            for d in 0..3 {
                p[d] -= c[d];
            }
            r_max = r_max.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
        if r_max > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= r_max;
                }
            }
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    /// Sub-cloud with the given point indices, in order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            object_id: self.object_id.clone(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

fn sq_dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// Greedy farthest point sampling starting from index 0.
///
/// Each step appends the point whose minimum distance to the selected set is
/// largest; ties go to the lowest index. Returns indices in selection order.
pub fn farthest_point_sample(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "farthest_point_sample needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = 0;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist3(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// k nearest neighbours of every row, excluding the row itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `n × k` neighbour indices.
    pub fn indices(&self) -> &[usize] {
        &self.neighbors
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let t = x - y;
        tail += t * t;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Euclidean kNN over the rows of an `n × D` tensor; ties go to the lower index.
pub fn knn_graph(features: &Tensor, k: usize) -> Result<KnnGraph> {
    if features.rank() != 2 {
        return Err(Error::shape("knn_graph", features.shape(), &[0, 0]));
    }
    let n = features.shape()[0];
    if k == 0 || k >= n {
        return Err(Error::contract(format!("knn_graph needs 1 <= k < n, got k={k}, n={n}")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        let a = features.row_slice(i);
        for j in i + 1..n {
            let d = sq_dist(a, features.row_slice(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist[i * n + j], j)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        neighbors.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph { k, neighbors })
}

/// One EdgeConv layer: edge features `concat(x_i, x_j − x_i)` through a shared
/// affine map and relu, max-aggregated over each point's neighbourhood.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub linear: Linear,
}

impl EdgeConv {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Ok(EdgeConv {
            linear: Linear::new(store, name, 2 * in_dim, out_dim, 2f64.sqrt(), true, seed)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim / 2
    }

    /// `x` is `n × D_in`; returns `n × D_out`.
    ///
    /// Uses `[x_i, x_j − x_i]·W = x_i·(W_top − W_bot) + x_j·W_bot`, so the
    /// affine map is evaluated once per point rather than once per edge.
    pub fn forward(&self, tape: &mut Tape, x: Var, graph: &KnnGraph) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let d_in = self.in_dim();
        if s.len() != 2 || s[1] != d_in || s[0] != graph.n() {
            return Err(Error::shape("edgeconv", &s, &[graph.n(), d_in]));
        }
        let (n, k, d_out) = (s[0], graph.k, self.linear.out_dim);
        let w = tape.param(self.linear.weight);
        let w_top = tape.narrow(w, 0, 0, d_in)?;
        let w_bot = tape.narrow(w, 0, d_in, d_in)?;
        let a = tape.matmul(x, w_top)?;
        let b = tape.matmul(x, w_bot)?;
        let mut center = tape.sub(a, b)?;
        if let Some(bias) = self.linear.bias {
            let bias = tape.param(bias);
            center = tape.add(center, bias)?;
        }
        let self_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let centers = tape.select_rows(center, &self_idx)?;
        let nbrs = tape.select_rows(b, graph.indices())?;
        let edges = tape.add(centers, nbrs)?;
        let edges = tape.relu(edges)?;
        let edges = tape.reshape(edges, &[n, k, d_out])?;
        tape.max(edges, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointBranchConfig {
    pub edge_widths: Vec<usize>,
    /// Upper bound on the graph neighbourhood; the effective value is `min(k, n − 1)`.
    pub knn_k: usize,
    pub out_dim: usize,
}

impl Default for PointBranchConfig {
    fn default() -> Self {
        PointBranchConfig {
            edge_widths: vec![64, 64, 128],
            knn_k: 10,
            out_dim: 1024,
        }
    }
}

/// EdgeConv stack → per-point concatenation of all layer outputs → shared
/// affine → global max pool.
#[derive(Clone, Debug)]
pub struct PointBranch {
    pub config: PointBranchConfig,
    pub layers: Vec<EdgeConv>,
    pub proj: Linear,
}

impl PointBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &PointBranchConfig, seed: u64) -> Result<Self> {
        if config.edge_widths.is_empty() || config.knn_k == 0 || config.out_dim == 0 {
            return Err(Error::config("point branch needs at least one EdgeConv layer, k >= 1 and a positive output width"));
        }
        let mut layers = Vec::new();
        let mut d = 3;
        for (i, &w) in config.edge_widths.iter().enumerate() {
            layers.push(EdgeConv::new(store, &format!("{prefix}.edge{i}"), d, w, seed)?);
            d = w;
        }
        let total: usize = config.edge_widths.iter().sum();
        let proj = Linear::new(store, &format!("{prefix}.proj"), total, config.out_dim, 1.0, true, seed)?;
        Ok(PointBranch {
            config: config.clone(),
            layers,
            proj,
        })
    }

    /// Graph neighbourhood size used for a cloud of `n` points.
    pub fn graph_k(&self, n: usize) -> usize {
        self.config.knn_k.min(n.saturating_sub(1))
    }

    /// Per-point features before pooling (`n × out_dim`).
    pub fn point_features(&self, tape: &mut Tape, cloud: &PointCloud) -> Result<Var> {
        let n = cloud.len();
        if n < 2 {
            return Err(Error::contract(format!(
                "point branch needs at least 2 points, got {n}"
            )));
        }
        let k = self.graph_k(n);
        let mut x = tape.constant(cloud.to_tensor());
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let graph = knn_graph(tape.value(x), k)?;
            x = layer.forward(tape, x, &graph)?;
            outs.push(x);
        }
        let cat = tape.concat(&outs, 1)?;
        self.proj.forward(tape, cat)
    }

    /// Global point-cloud feature `f_point` as a `1 × out_dim` row.
    pub fn forward(&self, tape: &mut Tape, cloud: &PointCloud) -> Result<Var> {
        let per_point = self.point_features(tape, cloud)?;
        let pooled = tape.max(per_point, 0)?;
        tape.reshape(pooled, &[1, self.config.out_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_collinear() {
        let pts: Vec<[f64; 3]> = [0.0, 1.0, 2.0, 3.0, 10.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sample(&pts, 3).unwrap(), vec![0, 4, 3]);
    }

    #[test]
    fn fps_identical_points_tie_by_index() {
        let pts = vec![[0.5, 0.5, 0.5]; 6];
        assert_eq!(farthest_point_sample(&pts, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_k_equals_n_is_permutation() {
        let pts: Vec<[f64; 3]> = (0..9).map(|i| [(i * 7 % 5) as f64, i as f64 * 0.3, 1.0]).collect();
        let mut idx = farthest_point_sample(&pts, 9).unwrap();
        assert_eq!(idx[0], 0);
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_k_above_n() {
        assert!(farthest_point_sample(&[[0.0; 3]; 2], 3).is_err());
    }

    #[test]
    fn knn_line() {
        let t = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let g = knn_graph(&t, 1).unwrap();
        assert_eq!(g.row(1), &[0]);
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let t = Tensor::matrix(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        let g = knn_graph(&t, 1).unwrap();
        assert_eq!(g.row(1), &[0]);
    }

    #[test]
    fn knn_rejects_k_ge_n() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(knn_graph(&t, 3).is_err());
    }

    #[test]
    fn normalize_centroid_and_radius() {
        let c = PointCloud::new("a", vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0], [2.0, 5.0, 1.0]])
            .unwrap()
            .normalized();
        let n = c.len() as f64;
        for d in 0..3 {
            let mean: f64 = c.points().iter().map(|p| p[d]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
        }
        let r = c.points().iter().map(|p| sq_dist3(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edgeconv_identical_points() {
        // Zero differences: each output row is relu(x·W_top + b).
        let mut store = ParamStore::new();
        let ec = EdgeConv::new(&mut store, "e", 2, 3, 1).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7, 0.3, -0.7]).unwrap();
        let graph = knn_graph(&x, 2).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = ec.forward(&mut tape, xv, &graph).unwrap();
        let w = store.value(ec.linear.weight).data();
        for i in 0..4 {
            for o in 0..3 {
                let expected = (0.3 * w[o] - 0.7 * w[3 + o]).max(0.0);
                assert!((tape.value(y).data()[i * 3 + o] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_point_cloud_rejected() {
        let mut store = ParamStore::new();
        let pb = PointBranch::new(&mut store, "p", &PointBranchConfig::default(), 0).unwrap();
        let cloud = PointCloud::new("x", vec![[0.0; 3]]).unwrap();
        let mut tape = Tape::new(&store);
        assert!(pb.forward(&mut tape, &cloud).is_err());
    }
}
