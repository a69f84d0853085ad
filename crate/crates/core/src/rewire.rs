//! Causality-informed stochastic discrete Ricci flow.
//!
//! Each iteration finds the most negatively curved edge `(i, j)` of the
//! symmetrised graph, scores every missing directed edge `k -> l` with
//! `k` in the closed ball `B1(i)` and `l` in `B1(j)` by
//! `x_kl = (Ric_with_kl(i, j) - Ric(i, j)) * TE(k -> l)`, samples one from
//! `softmax(tau * x)` and inserts it. When both removal bounds are configured,
//! the most positively curved edge is then dropped if its curvature exceeds
//! `c_plus` and its transfer entropy is below `c_minus`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{self, CurvatureError, CurvatureReport};
use crate::fmt::sig12;
use crate::graph::{symmetrized_view, CausalGraph, SymAdjacency, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum RewireError {
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("({0}, {1}) is not an edge of the symmetrised graph")]
    NotAnEdge(usize, usize),
    #[error("no candidate edges around ({0}, {1})")]
    NoCandidates(usize, usize),
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
}

pub type Result<T, E = RewireError> = std::result::Result<T, E>;

pub const DEFAULT_TAU: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewireConfig {
    pub tau: f64,
    /// `None` means one iteration per node.
    pub max_iterations: Option<usize>,
    /// Curvature above which an edge may be removed.
    pub c_plus: Option<f64>,
    /// Transfer entropy below which an edge may be removed.
    pub c_minus: Option<f64>,
    /// Stop once the minimum curvature reaches this value.
    pub curvature_floor: f64,
    pub seed: u64,
}

impl Default for RewireConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_iterations: None,
            c_plus: None,
            c_minus: None,
            curvature_floor: 0.0,
            seed: 0,
        }
    }
}

impl RewireConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RewireError::BadTemperature(self.tau));
        }
        Ok(())
    }

    /// Removal needs both bounds.
    pub fn removal_bounds(&self) -> Option<(f64, f64)> {
        self.c_plus.zip(self.c_minus)
    }
}

/// A missing directed edge `src -> dst` scored against the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub src: usize,
    pub dst: usize,
    /// Bottleneck curvature with the edge present.
    pub ric_after: f64,
    pub te: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovedEdge {
    pub i: usize,
    pub j: usize,
    pub ric: f64,
    /// Largest transfer entropy among the removed directions.
    pub te: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewireRecord {
    pub iteration: usize,
    pub bottleneck: (usize, usize),
    pub bottleneck_ric: f64,
    pub candidates_evaluated: usize,
    pub sampled: Candidate,
    pub removed: Option<RemovedEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    CurvatureFloor,
    NoPositiveImprovement,
    NoCandidates,
    NoEdges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewiringLog {
    pub records: Vec<RewireRecord>,
    pub stop: StopReason,
}

impl RewiringLog {
    /// One JSON object per iteration.
    pub fn to_jsonl(&self) -> String {
        records_jsonl(&self.records)
    }

    pub fn to_csv(&self) -> String {
        records_csv(&self.records)
    }
}

pub fn records_jsonl(records: &[RewireRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
        .collect()
}

/// Plot-ready table of a rewiring run.
pub fn records_csv(records: &[RewireRecord]) -> String {
    let mut s = String::from(
        "iteration,bottleneck_i,bottleneck_j,bottleneck_ric,candidates,added_src,added_dst,x,ric_after,removed_i,removed_j,removed_ric,removed_te\n",
    );
    for r in records {
        let c = &r.sampled;
        let removed = match &r.removed {
            Some(e) => format!("{},{},{},{}", e.i, e.j, sig12(e.ric), sig12(e.te)),
            None => ",,,".into(),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.bottleneck.0,
            r.bottleneck.1,
            sig12(r.bottleneck_ric),
            r.candidates_evaluated,
            c.src,
            c.dst,
            sig12(c.x),
            sig12(c.ric_after),
            removed
        ));
    }
    s
}

fn closed_ball(s: &SymAdjacency, v: usize) -> Vec<usize> {
    let mut b = s.neighbors(v);
    let pos = b.partition_point(|&x| x < v);
    b.insert(pos, v);
    b
}

/// Scores every directed edge `k -> l` (k in `B1(i)`, l in `B1(j)`, `k != l`)
/// not already in `g`. Candidates come out in `(k, l)` lexicographic order.
/// `s` must be the symmetrised view of `g`.
pub fn candidate_improvements(
    g: &CausalGraph,
    s: &SymAdjacency,
    bottleneck: (usize, usize),
) -> Result<Vec<Candidate>> {
    let (i, j) = bottleneck;
    if i == j || !s.has_edge(i, j) {
        return Err(RewireError::NotAnEdge(i, j));
    }
    let base = curvature::balanced_forman(s, i, j)?;
    let te = g.te();
    let mut out = Vec::new();
    for k in closed_ball(s, i) {
        for l in closed_ball(s, j) {
            if k == l || g.has_edge(k, l) {
                continue;
            }
            let ric_after = if s.has_edge(k, l) {
                base
            } else {
                curvature::curvature_with_candidate(s, (i, j), (k, l))?
            };
            let weight = te.get(l, k);
            out.push(Candidate {
                src: k,
                dst: l,
                ric_after,
                te: weight,
                x: (ric_after - base) * weight,
            });
        }
    }
    if out.is_empty() {
        return Err(RewireError::NoCandidates(i, j));
    }
    Ok(out)
}

/// `softmax(tau * x)`, shifted by the maximum for stability.
pub fn softmax_probabilities(xs: &[f64], tau: f64) -> Vec<f64> {
    let top = xs.iter().map(|&x| tau * x).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = xs.iter().map(|&x| (tau * x - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Draws an index from `softmax(tau * x)` with one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(xs: &[f64], tau: f64, rng: &mut R) -> Result<usize> {
    if xs.is_empty() {
        return Err(RewireError::EmptyCandidates);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RewireError::BadTemperature(tau));
    }
    let probs = softmax_probabilities(xs, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(idx);
        }
    }
    // u landed in the rounding gap above the accumulated total
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

pub fn sample_edge<R: Rng + ?Sized>(candidates: &[Candidate], tau: f64, rng: &mut R) -> Result<(usize, usize)> {
    let xs: Vec<f64> = candidates.iter().map(|c| c.x).collect();
    let idx = sample_index(&xs, tau, rng)?;
    Ok((candidates[idx].src, candidates[idx].dst))
}

/// Drops the maximal-curvature edge when `ric > c_plus` and every present
/// direction between its endpoints has transfer entropy below `c_minus`.
/// Both directions are removed so the edge leaves the symmetric view.
pub fn removal_step(
    g: &mut CausalGraph,
    s: &mut SymAdjacency,
    report: &CurvatureReport,
    c_plus: f64,
    c_minus: f64,
) -> Option<RemovedEdge> {
    let (a, b) = report.max_edge;
    let ric = report.max_ric();
    if ric <= c_plus {
        return None;
    }
    let te = [(a, b), (b, a)]
        .into_iter()
        .filter(|&(cause, effect)| g.has_edge(cause, effect))
        .map(|(cause, effect)| g.te().get(effect, cause))
        .fold(f64::NEG_INFINITY, f64::max);
    if te >= c_minus {
        return None;
    }
    g.remove_edge(a, b);
    g.remove_edge(b, a);
    s.remove_edge(a, b);
    Some(RemovedEdge { i: a, j: b, ric, te })
}

/// Runs the flow on a copy of `g`. The result is a pure function of `g` and
/// `cfg` (including `cfg.seed`).
pub fn rewire(g: &CausalGraph, cfg: &RewireConfig) -> Result<(CausalGraph, RewiringLog)> {
    cfg.validate()?;
    if g.edge_count() == 0 {
        return Err(RewireError::EmptyGraph);
    }
    let mut out = g.clone();
    let mut s = symmetrized_view(&out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_iterations = cfg.max_iterations.unwrap_or(g.n());
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIterations;

    for iteration in 0..max_iterations {
        let report = match curvature::curvature_report(&s) {
            Ok(r) => r,
            Err(_) => {
                stop = StopReason::NoEdges;
                break;
            }
        };
        let bottleneck = report.min_edge;
        let bottleneck_ric = report.min_ric();
        if bottleneck_ric >= cfg.curvature_floor {
            stop = StopReason::CurvatureFloor;
            break;
        }
        let candidates = match candidate_improvements(&out, &s, bottleneck) {
            Ok(c) => c,
            Err(RewireError::NoCandidates(..)) => {
                stop = StopReason::NoCandidates;
                break;
            }
            Err(e) => return Err(e),
        };
        if candidates.iter().all(|c| c.x <= 0.0) {
            stop = StopReason::NoPositiveImprovement;
            break;
        }
        let xs: Vec<f64> = candidates.iter().map(|c| c.x).collect();
        let sampled = candidates[sample_index(&xs, cfg.tau, &mut rng)?];
        out.add_edge(sampled.src, sampled.dst);
        s.add_edge(sampled.src, sampled.dst);

        let removed = match cfg.removal_bounds() {
            Some((c_plus, c_minus)) => curvature::curvature_report(&s)
                .ok()
                .and_then(|r| removal_step(&mut out, &mut s, &r, c_plus, c_minus)),
            None => None,
        };
        records.push(RewireRecord {
            iteration,
            bottleneck,
            bottleneck_ric,
            candidates_evaluated: candidates.len(),
            sampled,
            removed,
        });
    }

    out.provenance.rewired = true;
    out.provenance.rewiring_log = records.clone();
    Ok((out, RewiringLog { records, stop }))
}
