//! Directed causal graphs built by thresholding a transfer entropy matrix,
//! their node features, symmetric topology view, and the on-disk format.
//!
//! Orientation: `adj[effect][cause] == true` means an edge `cause -> effect`,
//! matching the `TeMatrix` layout (row = effect, column = cause).

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::TeMatrix;
use crate::fmt::sig12;
use crate::rewire::RewireRecord;
use crate::signal::SignalMatrix;

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("schema mismatch: expected version {expected}, found {found}")]
    SchemaVersion { expected: u32, found: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Read-only undirected topology, the operand of curvature and GCN propagation.
pub trait Topology {
    fn node_count(&self) -> usize;
    fn has_edge(&self, a: usize, b: usize) -> bool;
    fn degree(&self, a: usize) -> usize;
    fn neighbors(&self, a: usize) -> Vec<usize>;
}

/// Symmetric binary adjacency without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymAdjacency {
    n: usize,
    mat: Vec<bool>,
    degree: Vec<usize>,
}

impl SymAdjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            mat: vec![false; n * n],
            degree: vec![0; n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut s = Self::empty(n);
        for &(a, b) in edges {
            s.add_edge(a, b);
        }
        s
    }

    /// Interprets a dense 0/1 matrix, taking `m[a][b] || m[b][a]`.
    pub fn from_matrix(m: &[Vec<bool>]) -> Self {
        let n = m.len();
        let mut s = Self::empty(n);
        for a in 0..n {
            for b in 0..n {
                if a != b && m[a][b] {
                    s.add_edge(a, b);
                }
            }
        }
        s
    }

    /// Adds `a - b`; self-loops and existing edges are ignored. Returns
    /// whether the edge was new.
    pub fn add_edge(&mut self, a: usize, b: usize) -> bool {
        if a == b || self.mat[a * self.n + b] {
            return false;
        }
        self.mat[a * self.n + b] = true;
        self.mat[b * self.n + a] = true;
        self.degree[a] += 1;
        self.degree[b] += 1;
        true
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) -> bool {
        if a == b || !self.mat[a * self.n + b] {
            return false;
        }
        self.mat[a * self.n + b] = false;
        self.mat[b * self.n + a] = false;
        self.degree[a] -= 1;
        self.degree[b] -= 1;
        true
    }

    /// Undirected edges as `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.mat[a * self.n + b] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.degree.iter().sum::<usize>() / 2
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        self.mat.chunks(self.n).map(<[bool]>::to_vec).collect()
    }
}

impl Topology for SymAdjacency {
    fn node_count(&self) -> usize {
        self.n
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.mat[a * self.n + b]
    }

    fn degree(&self, a: usize) -> usize {
        self.degree[a]
    }

    fn neighbors(&self, a: usize) -> Vec<usize> {
        let row = &self.mat[a * self.n..(a + 1) * self.n];
        row.iter()
            .enumerate()
            .filter_map(|(b, &e)| e.then_some(b))
            .collect()
    }
}

/// One directed edge `src (cause) -> dst (effect)` and its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub src: usize,
    pub dst: usize,
    pub te: f64,
    /// Inserted by rewiring rather than by thresholding.
    #[serde(default)]
    pub added: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub threshold_c: f64,
    pub rewired: bool,
    pub rewiring_log: Vec<RewireRecord>,
}

/// Directed causal graph with its weight matrix and node features.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    n: usize,
    adj: Vec<bool>,
    added: Vec<bool>,
    te: TeMatrix,
    features: DMatrix<f64>,
    pub provenance: Provenance,
}

/// Incoming-influence profile of every node: `te` with the diagonal zeroed.
pub fn node_features(te: &TeMatrix) -> DMatrix<f64> {
    let n = te.n();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { te.get(i, j) })
}

/// Keeps `cause -> effect` whenever `te[effect][cause] > c` (strict).
pub fn build_adjacency(te: &TeMatrix, c: f64) -> Result<CausalGraph> {
    if c.is_nan() || c < 0.0 {
        return Err(GraphError::NegativeThreshold(c));
    }
    let n = te.n();
    let adj = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            i != j && te.get(i, j) > c
        })
        .collect();
    Ok(CausalGraph {
        n,
        adj,
        added: vec![false; n * n],
        te: te.clone(),
        features: node_features(te),
        provenance: Provenance {
            threshold_c: c,
            ..Provenance::default()
        },
    })
}

impl CausalGraph {
    /// Graph with an explicit edge list of `(cause, effect)` pairs, e.g. a
    /// hand-made topology. Edges are not checked against any threshold.
    pub fn from_edges(te: &TeMatrix, edges: &[(usize, usize)]) -> Result<Self> {
        let n = te.n();
        let mut adj = vec![false; n * n];
        for &(cause, effect) in edges {
            if cause >= n || effect >= n || cause == effect {
                return Err(GraphError::SchemaMismatch(format!(
                    "edge {cause} -> {effect} invalid for n = {n}"
                )));
            }
            adj[effect * n + cause] = true;
        }
        Ok(Self {
            n,
            adj,
            added: vec![false; n * n],
            te: te.clone(),
            features: node_features(te),
            provenance: Provenance::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn te(&self) -> &TeMatrix {
        &self.te
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Whether the directed edge `cause -> effect` is present.
    pub fn has_edge(&self, cause: usize, effect: usize) -> bool {
        self.adj[effect * self.n + cause]
    }

    pub fn is_added(&self, cause: usize, effect: usize) -> bool {
        self.added[effect * self.n + cause]
    }

    /// Inserts `cause -> effect`, flagged as a rewiring addition. Returns
    /// whether the edge was new.
    pub fn add_edge(&mut self, cause: usize, effect: usize) -> bool {
        let idx = effect * self.n + cause;
        if cause == effect || self.adj[idx] {
            return false;
        }
        self.adj[idx] = true;
        self.added[idx] = true;
        true
    }

    pub fn remove_edge(&mut self, cause: usize, effect: usize) -> bool {
        let idx = effect * self.n + cause;
        let was = self.adj[idx];
        self.adj[idx] = false;
        self.added[idx] = false;
        was
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    /// Directed edges in `(dst, src)` row-major order.
    pub fn edges(&self) -> Vec<DirectedEdge> {
        let n = self.n;
        (0..n * n)
            .filter(|&idx| self.adj[idx])
            .map(|idx| {
                let (dst, src) = (idx / n, idx % n);
                DirectedEdge {
                    src,
                    dst,
                    te: self.te.get(dst, src),
                    added: self.added[idx],
                }
            })
            .collect()
    }

    /// Dense `adj[effect][cause]` view.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        self.adj.chunks(self.n).map(<[bool]>::to_vec).collect()
    }
}

/// `adj OR adjᵀ`: the undirected topology seen by curvature and the GCN.
pub fn symmetrized_view(g: &CausalGraph) -> SymAdjacency {
    let mut s = SymAdjacency::empty(g.n);
    for e in g.edges() {
        s.add_edge(e.src, e.dst);
    }
    s
}

/// The strongest `ceil(fraction * edge_count)` edges, by weight descending
/// and then `(dst, src)` ascending.
pub fn top_fraction_edges(g: &CausalGraph, fraction: f64) -> Result<Vec<DirectedEdge>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GraphError::BadFraction(fraction));
    }
    let mut edges = g.edges();
    if edges.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    edges.sort_by(|a, b| {
        b.te.total_cmp(&a.te)
            .then(a.dst.cmp(&b.dst))
            .then(a.src.cmp(&b.src))
    });
    let keep = ((fraction * edges.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    edges.truncate(keep);
    Ok(edges)
}

/// Edge-list CSV `src,dst,te` in the given order.
pub fn edges_csv(edges: &[DirectedEdge]) -> String {
    let mut s = String::from("src,dst,te\n");
    for e in edges {
        s.push_str(&format!("{},{},{}\n", e.src, e.dst, sig12(e.te)));
    }
    s
}

/// Absolute Pearson correlation between channels, diagonal zero. A constant
/// channel correlates 0 with everything. Used as the edge-weight matrix of the
/// correlation-graph baseline.
pub fn abs_correlation_matrix(signals: &SignalMatrix) -> TeMatrix {
    let n = signals.n();
    let t = signals.t() as f64;
    let centered: Vec<Vec<f64>> = signals
        .rows()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / t;
            r.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let denom = norms[i] * norms[j];
            let r = if denom > 0.0 {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / denom).abs().min(1.0)
            } else {
                0.0
            };
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    TeMatrix::from_values(n, values, 0, 0, 0).expect("correlations are finite and in [0, 1]")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    schema_version: u32,
    n: usize,
    threshold_c: f64,
    rewired: bool,
    history: History,
    directed_edges: Vec<DirectedEdge>,
    te: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    #[serde(default)]
    rewiring_log: Vec<RewireRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct History {
    q: usize,
    o: usize,
    bins: usize,
}

impl CausalGraph {
    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            schema_version: GRAPH_SCHEMA_VERSION,
            n: self.n,
            threshold_c: self.provenance.threshold_c,
            rewired: self.provenance.rewired,
            history: History {
                q: self.te.q,
                o: self.te.o,
                bins: self.te.bins,
            },
            directed_edges: self.edges(),
            te: self.te.to_rows(),
            features: self
                .features
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            rewiring_log: self.provenance.rewiring_log.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version") {
            Some(v) if v.as_u64() == Some(GRAPH_SCHEMA_VERSION as u64) => {}
            Some(v) => {
                return Err(GraphError::SchemaVersion {
                    expected: GRAPH_SCHEMA_VERSION,
                    found: v.to_string(),
                })
            }
            None => {
                return Err(GraphError::SchemaVersion {
                    expected: GRAPH_SCHEMA_VERSION,
                    found: "none".into(),
                })
            }
        }
        let file: GraphFile =
            serde_json::from_value(value).map_err(|e| GraphError::SchemaMismatch(e.to_string()))?;
        let n = file.n;
        let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&file.te) || !square(&file.features) {
            return Err(GraphError::SchemaMismatch(format!(
                "te and features must be {n}x{n}"
            )));
        }
        let te = TeMatrix::from_values(
            n,
            file.te.concat(),
            file.history.q,
            file.history.o,
            file.history.bins,
        )
        .map_err(|e| GraphError::SchemaMismatch(e.to_string()))?;
        let mut adj = vec![false; n * n];
        let mut added = vec![false; n * n];
        for e in &file.directed_edges {
            if e.src >= n || e.dst >= n || e.src == e.dst {
                return Err(GraphError::SchemaMismatch(format!(
                    "edge {} -> {} invalid for n = {n}",
                    e.src, e.dst
                )));
            }
            adj[e.dst * n + e.src] = true;
            added[e.dst * n + e.src] = e.added;
        }
        Ok(Self {
            n,
            adj,
            added,
            te,
            features: DMatrix::from_fn(n, n, |i, j| file.features[i][j]),
            provenance: Provenance {
                threshold_c: file.threshold_c,
                rewired: file.rewired,
                rewiring_log: file.rewiring_log,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Replaces the node features, e.g. with correlation profiles.
    pub fn with_features(mut self, features: DMatrix<f64>) -> Self {
        assert_eq!(features.shape(), (self.n, self.n));
        self.features = features;
        self
    }
}
