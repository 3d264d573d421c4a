//! Thresholded cosine-similarity graphs and the symmetric GCN propagation operator.

use crate::error::{Error, Result};
use crate::fixtures::Sample;
use crate::tensor::Tensor2;

/// Which objects become graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// One graph per sample over its `2N` tokens (image rows stacked above text rows).
    Token,
    /// One graph per batch; each node is `[mean(image) ‖ mean(text)]` of width `2E`.
    Sample,
}

impl GraphMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphMode::Token => "token",
            GraphMode::Sample => "sample",
        }
    }
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(GraphMode::Token),
            "sample" => Ok(GraphMode::Sample),
            other => Err(Error::Config(format!("unknown graph mode {other:?}"))),
        }
    }
}

/// Node feature rows used to build a graph. Entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix(Tensor2);

impl NodeMatrix {
    pub fn new(features: Tensor2) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::NonFinite("node features".into()));
        }
        Ok(Self(features))
    }

    /// Token mode: the sample's image tokens followed by its text tokens.
    pub fn from_tokens(sample: &Sample) -> Result<Self> {
        Self::new(Tensor2::vstack(&sample.image_tokens, &sample.text_tokens)?)
    }

    /// Sample mode: one row per sample, mean-pooled image and text features side by side.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut width = None;
        for s in samples {
            let w = 2 * s.image_tokens.cols();
            if *width.get_or_insert(w) != w {
                return Err(Error::Shape("samples with different embedding widths".into()));
            }
            data.extend(column_means(&s.image_tokens));
            data.extend(column_means(&s.text_tokens));
            rows += 1;
        }
        Self::new(Tensor2::from_vec(rows, width.unwrap_or(0), data)?)
    }

    pub fn features(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_features(self) -> Tensor2 {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

fn column_means(t: &Tensor2) -> Vec<f64> {
    let inv = 1.0 / t.rows() as f64;
    t.column_sums().into_iter().map(|s| s * inv).collect()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_from_parts(dot: f64, norm_u: f64, norm_v: f64) -> f64 {
    if norm_u == 0.0 || norm_v == 0.0 {
        return 0.0;
    }
    (dot / (norm_u * norm_v)).clamp(-1.0, 1.0)
}

/// Cosine similarity, clamped to [-1, 1]; 0 when either vector has zero norm.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_from_parts(dot(u, v), norm(u), norm(v)))
}

/// Undirected graph without self edges, stored as CSR with sorted columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAdjacency {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl SparseAdjacency {
    /// Build from undirected edges `(i, j)`, `i != j`. Duplicates are merged.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(Error::Shape(format!("edge ({i}, {j}) with {nodes} nodes")));
            }
            if i == j {
                return Err(Error::Config(format!("self edge at node {i}")));
            }
            lists[i].push(j);
            lists[j].push(i);
        }
        let mut row_ptr = Vec::with_capacity(nodes + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            cols.extend(l);
            row_ptr.push(cols.len());
        }
        Ok(Self { row_ptr, cols })
    }

    pub fn empty(nodes: usize) -> Self {
        Self {
            row_ptr: vec![0; nodes + 1],
            cols: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Sorted neighbours of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn num_edges(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }
}

/// Edges between nodes whose cosine similarity strictly exceeds `gamma`.
///
/// Zero-norm nodes never receive edges, whatever the threshold.
pub fn build_adjacency(nodes: &NodeMatrix, gamma: f64) -> SparseAdjacency {
    build_adjacency_with_workers(nodes, gamma, 1)
}

/// As [`build_adjacency`], splitting the row range across `workers` scoped
/// threads. The edge set does not depend on the worker count.
pub fn build_adjacency_with_workers(
    nodes: &NodeMatrix,
    gamma: f64,
    workers: usize,
) -> SparseAdjacency {
    let x = nodes.features();
    let m = x.rows();
    let norms: Vec<f64> = (0..m).map(|i| norm(x.row(i))).collect();

    let scan = |rows: std::ops::Range<usize>| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in rows {
            if norms[i] == 0.0 {
                continue;
            }
            for j in i + 1..m {
                if norms[j] == 0.0 {
                    continue;
                }
                let sim = cosine_from_parts(dot(x.row(i), x.row(j)), norms[i], norms[j]);
                if sim > gamma {
                    out.push((i, j));
                }
            }
        }
        out
    };

    let workers = workers.clamp(1, m.max(1));
    let edges = if workers == 1 {
        scan(0..m)
    } else {
        let chunk = m.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * chunk).min(m)..((w + 1) * chunk).min(m);
                    s.spawn(move || scan(range))
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("adjacency worker panicked"))
                .collect()
        })
    };
    SparseAdjacency::from_edges(m, &edges).expect("scan yields valid edges")
}

/// `Ĥ = D̂^{-1/2} (A + I) D̂^{-1/2}` in CSR form, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedOperator {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

/// Symmetric normalization with self loops; every degree is at least 1.
pub fn normalize(adj: &SparseAdjacency) -> NormalizedOperator {
    let m = adj.num_nodes();
    let degree: Vec<f64> = (0..m).map(|i| (adj.degree(i) + 1) as f64).collect();
    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut cols = Vec::with_capacity(adj.cols.len() + m);
    let mut values = Vec::with_capacity(adj.cols.len() + m);
    row_ptr.push(0);
    for i in 0..m {
        let nbrs = adj.neighbors(i);
        let split = nbrs.partition_point(|&j| j < i);
        let with_self = nbrs[..split]
            .iter()
            .copied()
            .chain(std::iter::once(i))
            .chain(nbrs[split..].iter().copied());
        for j in with_self {
            cols.push(j);
            values.push(1.0 / (degree[i] * degree[j]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    NormalizedOperator {
        row_ptr,
        cols,
        values,
    }
}

impl NormalizedOperator {
    /// Operator of a graph with no edges.
    pub fn identity(nodes: usize) -> Self {
        normalize(&SparseAdjacency::empty(nodes))
    }

    pub fn num_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor2 {
        let m = self.num_nodes();
        let mut out = Tensor2::zeros(m, m);
        for i in 0..m {
            for (j, v) in self.row(i) {
                out.set(i, j, v);
            }
        }
        out
    }

    /// `Ĥ · C`.
    pub fn apply(&self, c: &Tensor2) -> Result<Tensor2> {
        if c.rows() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "operator over {} nodes applied to {} rows",
                self.num_nodes(),
                c.rows()
            )));
        }
        let mut out = Tensor2::zeros(c.rows(), c.cols());
        for i in 0..self.num_nodes() {
            let row: Vec<(usize, f64)> = self.row(i).collect();
            let o = out.row_mut(i);
            for (j, h) in row {
                for (ov, cv) in o.iter_mut().zip(c.row(j)) {
                    *ov += h * cv;
                }
            }
        }
        Ok(out)
    }

    /// Power-iteration estimate of the spectral radius, `‖Ĥx‖ / ‖x‖` after `iters` steps.
    pub fn spectral_radius_estimate(&self, iters: usize) -> f64 {
        let m = self.num_nodes();
        if m == 0 {
            return 0.0;
        }
        // Deterministic, non-degenerate start vector.
        let mut x = Tensor2::from_vec(m, 1, (0..m).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect())
            .expect("column vector");
        let mut estimate = 0.0;
        for _ in 0..iters.max(1) {
            let nx = norm(x.data());
            if nx == 0.0 {
                return 0.0;
            }
            x.scale(1.0 / nx);
            let y = self.apply(&x).expect("shape");
            estimate = norm(y.data());
            x = y;
        }
        estimate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub mean_degree: f64,
    pub isolated_count: usize,
}

pub fn graph_stats(adj: &SparseAdjacency) -> GraphStats {
    let nodes = adj.num_nodes();
    let edges = adj.num_edges();
    GraphStats {
        nodes,
        edges,
        mean_degree: if nodes == 0 {
            0.0
        } else {
            2.0 * edges as f64 / nodes as f64
        },
        isolated_count: (0..nodes).filter(|&i| adj.degree(i) == 0).count(),
    }
}
