//! Causal graphs for multichannel time series.
//!
//! The crate turns a set of channel signals into a directed causal graph with
//! pairwise transfer entropy, refines that graph with causality-weighted
//! balanced Forman curvature rewiring, and classifies the refined graphs with a
//! small graph convolutional network trained from scratch.
//!
//! Stages map onto modules:
//!
//! * [`signal`]: signal matrices, CSV ingestion, synthetic VAR(1) datasets, splits
//! * [`entropy`]: histogram plug-in entropies and transfer entropy
//! * [`graph`]: thresholded causal adjacency, node features, graph files
//! * [`curvature`]: balanced Forman curvature per edge
//! * [`rewire`]: causality-informed stochastic discrete Ricci flow
//! * [`gnn`]: GCN layers, multi-head transform, CONCAT pooling, training, metrics
//! * [`pipeline`]: configuration, end-to-end runs, ablations, sweeps, exports

pub mod curvature;
pub mod entropy;
pub mod fmt;
pub mod gnn;
pub mod graph;
pub mod pipeline;
pub mod rewire;
pub mod signal;

pub use curvature::{CurvatureReport, EdgeStructure};
pub use entropy::{BinnedSeries, TeMatrix};
pub use graph::{CausalGraph, SymAdjacency};
pub use rewire::{RewireConfig, RewiringLog};
pub use signal::{LabeledDataset, SignalMatrix, Split};
