//! Balanced Forman curvature of undirected edges.
//!
//! For an edge `(i, j)` with degrees `d_i`, `d_j`:
//!
//! ```text
//! Ric(i,j) = 2/d_i + 2/d_j - 2
//!          + 2 #tri / max(d_i, d_j) + #tri / min(d_i, d_j)
//!          + (#sq_i + #sq_j) / (gamma_max * max(d_i, d_j))
//! ```
//!
//! `#sq_i` counts neighbours `k` of `i` (not `j`, not adjacent to `j`) that
//! close a diagonal-free 4-cycle `i-k-l-j` through some `l` adjacent to `j`
//! but not to `i`. `gamma_max` is the largest number of such cycles carried by
//! one intermediate node. The 4-cycle term is 0 when `gamma_max = 0`, and the
//! whole curvature is 0 when either endpoint is a leaf.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::sig12;
use crate::graph::Topology;

#[derive(Debug, Error, PartialEq)]
pub enum CurvatureError {
    #[error("({0}, {1}) is not an edge")]
    NotAnEdge(usize, usize),
    #[error("candidate ({0}, {1}) is already an edge or a self-loop")]
    CandidateAlreadyEdge(usize, usize),
    #[error("graph has no edges")]
    EmptyGraph,
}

pub type Result<T, E = CurvatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStructure {
    pub d_i: usize,
    pub d_j: usize,
    pub triangles: usize,
    pub four_cycles_i: usize,
    pub four_cycles_j: usize,
    pub gamma_max: usize,
}

impl EdgeStructure {
    /// Curvature straight from the formula, without the leaf convention.
    pub fn raw_curvature(&self) -> f64 {
        let (di, dj) = (self.d_i as f64, self.d_j as f64);
        let (dmax, dmin) = (di.max(dj), di.min(dj));
        let tri = self.triangles as f64;
        let mut ric = 2.0 / di + 2.0 / dj - 2.0 + 2.0 * tri / dmax + tri / dmin;
        if self.gamma_max > 0 {
            let sq = (self.four_cycles_i + self.four_cycles_j) as f64;
            ric += sq / (self.gamma_max as f64 * dmax);
        }
        ric
    }

    /// Balanced Forman curvature: 0 for leaf edges, the formula otherwise.
    pub fn curvature(&self) -> f64 {
        if self.d_i.min(self.d_j) <= 1 {
            0.0
        } else {
            self.raw_curvature()
        }
    }
}

/// Counts `k` in `from_nbrs` not adjacent to `far` (and not `far`) that reach
/// some `l` adjacent to `far` and not to `near`. Returns (count, max carried).
fn one_sided_cycles<T: Topology + ?Sized>(g: &T, near: usize, far: usize, from_nbrs: &[usize]) -> (usize, usize) {
    let mut count = 0;
    let mut gamma = 0;
    for &k in from_nbrs {
        if k == far || g.has_edge(k, far) {
            continue;
        }
        let carried = g
            .neighbors(k)
            .into_iter()
            .filter(|&l| l != near && g.has_edge(l, far) && !g.has_edge(l, near))
            .count();
        if carried > 0 {
            count += 1;
            gamma = gamma.max(carried);
        }
    }
    (count, gamma)
}

pub fn edge_structure<T: Topology + ?Sized>(g: &T, i: usize, j: usize) -> Result<EdgeStructure> {
    if i == j || !g.has_edge(i, j) {
        return Err(CurvatureError::NotAnEdge(i, j));
    }
    let ni = g.neighbors(i);
    let nj = g.neighbors(j);
    let triangles = ni.iter().filter(|&&k| g.has_edge(k, j)).count();
    let (four_cycles_i, gi) = one_sided_cycles(g, i, j, &ni);
    let (four_cycles_j, gj) = one_sided_cycles(g, j, i, &nj);
    Ok(EdgeStructure {
        d_i: ni.len(),
        d_j: nj.len(),
        triangles,
        four_cycles_i,
        four_cycles_j,
        gamma_max: gi.max(gj),
    })
}

pub fn balanced_forman<T: Topology + ?Sized>(g: &T, i: usize, j: usize) -> Result<f64> {
    Ok(edge_structure(g, i, j)?.curvature())
}

/// `g` with one extra undirected edge, without copying `g`.
pub struct WithEdge<'a, T: Topology + ?Sized> {
    base: &'a T,
    extra: (usize, usize),
}

impl<'a, T: Topology + ?Sized> WithEdge<'a, T> {
    pub fn new(base: &'a T, k: usize, l: usize) -> Result<Self> {
        if k == l || base.has_edge(k, l) {
            return Err(CurvatureError::CandidateAlreadyEdge(k, l));
        }
        Ok(Self { base, extra: (k, l) })
    }

    fn is_extra(&self, a: usize, b: usize) -> bool {
        (a, b) == self.extra || (b, a) == self.extra
    }
}

impl<T: Topology + ?Sized> Topology for WithEdge<'_, T> {
    fn node_count(&self) -> usize {
        self.base.node_count()
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.is_extra(a, b) || self.base.has_edge(a, b)
    }

    fn degree(&self, a: usize) -> usize {
        self.base.degree(a) + usize::from(a == self.extra.0 || a == self.extra.1)
    }

    fn neighbors(&self, a: usize) -> Vec<usize> {
        let mut nb = self.base.neighbors(a);
        let other = if a == self.extra.0 {
            Some(self.extra.1)
        } else if a == self.extra.1 {
            Some(self.extra.0)
        } else {
            None
        };
        if let Some(o) = other {
            let pos = nb.partition_point(|&x| x < o);
            nb.insert(pos, o);
        }
        nb
    }
}

/// Curvature of `(i, j)` as if the edge `(k, l)` were present.
pub fn curvature_with_candidate<T: Topology + ?Sized>(
    g: &T,
    base: (usize, usize),
    candidate: (usize, usize),
) -> Result<f64> {
    let (i, j) = base;
    if i == j || !g.has_edge(i, j) {
        return Err(CurvatureError::NotAnEdge(i, j));
    }
    let view = WithEdge::new(g, candidate.0, candidate.1)?;
    balanced_forman(&view, i, j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCurvature {
    pub ric: f64,
    /// Formula value before the leaf convention, kept for auditing.
    pub raw_ric: f64,
    pub structure: EdgeStructure,
}

/// Curvature of every undirected edge, keyed `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureReport {
    pub edges: BTreeMap<(usize, usize), EdgeCurvature>,
    pub min_edge: (usize, usize),
    pub max_edge: (usize, usize),
}

impl CurvatureReport {
    pub fn get(&self, a: usize, b: usize) -> Option<&EdgeCurvature> {
        self.edges.get(&(a.min(b), a.max(b)))
    }

    pub fn min_ric(&self) -> f64 {
        self.edges[&self.min_edge].ric
    }

    pub fn max_ric(&self) -> f64 {
        self.edges[&self.max_edge].ric
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// CSV `i,j,ric,d_i,d_j,triangles,sq_i,sq_j,gamma_max`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,ric,d_i,d_j,triangles,sq_i,sq_j,gamma_max\n");
        for (&(i, j), e) in &self.edges {
            let st = &e.structure;
            s.push_str(&format!(
                "{i},{j},{},{},{},{},{},{},{}\n",
                sig12(e.ric),
                st.d_i,
                st.d_j,
                st.triangles,
                st.four_cycles_i,
                st.four_cycles_j,
                st.gamma_max
            ));
        }
        s
    }
}

/// Curvature of all edges of `g`; ties for min and max go to the
/// lexicographically first edge.
pub fn curvature_report<T: Topology + Sync + ?Sized>(g: &T) -> Result<CurvatureReport> {
    let n = g.node_count();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| g.has_edge(a, b))
        .collect();
    if pairs.is_empty() {
        return Err(CurvatureError::EmptyGraph);
    }
    let values: Vec<EdgeCurvature> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let structure = edge_structure(g, a, b).expect("pair is an edge");
            EdgeCurvature {
                ric: structure.curvature(),
                raw_ric: structure.raw_curvature(),
                structure,
            }
        })
        .collect();
    let mut min_edge = pairs[0];
    let mut max_edge = pairs[0];
    let (mut lo, mut hi) = (values[0].ric, values[0].ric);
    for (p, v) in pairs.iter().zip(&values).skip(1) {
        if v.ric < lo {
            lo = v.ric;
            min_edge = *p;
        }
        if v.ric > hi {
            hi = v.ric;
            max_edge = *p;
        }
    }
    Ok(CurvatureReport {
        edges: pairs.into_iter().zip(values).collect(),
        min_edge,
        max_edge,
    })
}
