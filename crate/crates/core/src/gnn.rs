//! Graph convolutional classifier with hand-written backpropagation.
//!
//! One layer maps node embeddings `H` (`n x f_in`) to `n x f_out`:
//!
//! ```text
//! P = A H θ                      A = D̂^-1/2 (S + I) D̂^-1/2
//! G = σ(P)                       layer activation, sigmoid by default
//! M = G · blockdiag(θ_1..θ_k)    multi-head transform, row per node
//! H' = ρ(M) + H W                ρ = skip activation, W = I when widths agree
//! ```
//!
//! The last embeddings are concatenated row by row (CONCAT pooling) and fed to
//! `fc1 -> relu -> dropout -> fc2 -> relu -> dropout -> out`, a single logit
//! trained with binary cross-entropy. Row vectors multiply matrices from the
//! left throughout.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{symmetrized_view, CausalGraph, SymAdjacency};
use crate::signal::{Labeled, LabeledDataset, Split};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("adjacency is not symmetric at ({0}, {1})")]
    AsymmetricInput(usize, usize),
    #[error("adjacency has a self-loop at node {0}")]
    SelfLoop(usize),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("width {width} is not divisible into {heads} heads")]
    IndivisibleWidth { width: usize, heads: usize },
    #[error("skip from width {from} to {to} needs a projection")]
    WidthMismatchWithoutProjection { from: usize, to: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split holds a single class; AUC is undefined")]
    SingleClassSplit,
    #[error("training diverged to NaN at step {0}")]
    DivergedToNaN(u64),
    #[error("graphs have mixed node counts ({0} and {1})")]
    MixedNodeCounts(usize, usize),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("invalid training config: {0}")]
    BadTrainConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GnnError> = std::result::Result<T, E>;

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn mismatch(what: &'static str, expected: String, found: String) -> GnnError {
    GnnError::ShapeMismatch { what, expected, found }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `pre` whose output was `post`.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub heads_per_layer: usize,
    pub dropout_rate: f64,
    pub fc_hidden_1: usize,
    pub fc_hidden_2: usize,
    pub layer_activation: Activation,
    pub skip_activation: Activation,
    /// `false` feeds node features straight to pooling.
    pub graph_convolution: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![64, 32],
            heads_per_layer: 4,
            dropout_rate: 0.5,
            fc_hidden_1: 128,
            fc_hidden_2: 64,
            layer_activation: Activation::Sigmoid,
            skip_activation: Activation::Relu,
            graph_convolution: true,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 4] = ["cobre", "acpi", "abide", "adni"];

impl ModelConfig {
    /// Shipped configurations for the four reference fMRI cohorts.
    pub fn preset(name: &str) -> Option<Self> {
        let (layers, heads, fc1, fc2): (Vec<usize>, usize, usize, usize) = match name {
            "cobre" => (vec![256, 128, 64, 32], 2, 256, 128),
            "acpi" => (vec![128, 64], 4, 512, 64),
            "abide" => (vec![128, 64, 32, 16], 4, 128, 128),
            "adni" => (vec![128, 64, 32, 16], 4, 256, 256),
            _ => return None,
        };
        Some(Self {
            layer_sizes: layers,
            heads_per_layer: heads,
            fc_hidden_1: fc1,
            fc_hidden_2: fc2,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GnnError::BadConfig(m));
        if self.heads_per_layer == 0 {
            return bad("heads_per_layer must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} is outside [0, 1)", self.dropout_rate));
        }
        if self.fc_hidden_1 == 0 || self.fc_hidden_2 == 0 {
            return bad("classifier widths must be positive".into());
        }
        if self.graph_convolution && self.layer_sizes.is_empty() {
            return bad("layer_sizes is empty".into());
        }
        for (l, &w) in self.layer_sizes.iter().enumerate() {
            if w == 0 {
                return bad(format!("layer {l} has width 0"));
            }
            if w % self.heads_per_layer != 0 {
                return Err(GnnError::IndivisibleWidth {
                    width: w,
                    heads: self.heads_per_layer,
                });
            }
            if l > 0 && w > self.layer_sizes[l - 1] {
                return bad(format!("layer_sizes must be non-increasing, layer {l} grows to {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GnnError::BadTrainConfig(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// `D̂^-1/2 (S + I) D̂^-1/2` for a symmetric 0/1 adjacency with empty diagonal.
pub fn normalize_adjacency(s: &[Vec<bool>]) -> Result<DMatrix<f64>> {
    let n = s.len();
    for (i, row) in s.iter().enumerate() {
        if row.len() != n {
            return Err(mismatch("adjacency", format!("{n} columns"), format!("{} in row {i}", row.len())));
        }
        if row[i] {
            return Err(GnnError::SelfLoop(i));
        }
        for j in 0..i {
            if row[j] != s[j][i] {
                return Err(GnnError::AsymmetricInput(i, j));
            }
        }
    }
    let deg: Vec<f64> = s
        .iter()
        .map(|row| 1.0 + row.iter().filter(|&&b| b).count() as f64)
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j || s[i][j] {
            1.0 / (deg[i] * deg[j]).sqrt()
        } else {
            0.0
        }
    }))
}

pub fn normalize_sym(s: &SymAdjacency) -> DMatrix<f64> {
    normalize_adjacency(&s.to_matrix()).expect("SymAdjacency is symmetric without self-loops")
}

/// `act(A H θ)`.
pub fn gcn_layer(
    h: &DMatrix<f64>,
    a_norm: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    activation: Activation,
) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if a_norm.nrows() != n || a_norm.ncols() != n {
        return Err(mismatch("gcn adjacency", format!("{n}x{n}"), shape(a_norm)));
    }
    if theta.nrows() != h.ncols() {
        return Err(mismatch("gcn weights", format!("{} rows", h.ncols()), shape(theta)));
    }
    Ok((a_norm * h * theta).map(|x| activation.apply(x)))
}

fn check_heads(width: usize, heads: &[DMatrix<f64>]) -> Result<usize> {
    let k = heads.len();
    if k == 0 || !width.is_multiple_of(k) {
        return Err(GnnError::IndivisibleWidth { width, heads: k });
    }
    let w = width / k;
    if let Some(bad) = heads.iter().find(|t| t.nrows() != w || t.ncols() != w) {
        return Err(mismatch("head projection", format!("{w}x{w}"), shape(bad)));
    }
    Ok(w)
}

/// Splits `h` into `k` contiguous chunks, maps chunk `j` through `θ_j` and
/// concatenates the results in order.
pub fn multi_head_transform(h: &[f64], heads: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let w = check_heads(h.len(), heads)?;
    let mut out = vec![0.0; h.len()];
    for (j, theta) in heads.iter().enumerate() {
        let chunk = &h[j * w..(j + 1) * w];
        for c in 0..w {
            out[j * w + c] = (0..w).map(|r| chunk[r] * theta[(r, c)]).sum();
        }
    }
    Ok(out)
}

/// `[f(X_1, θ_1) | ... | f(X_k, θ_k)]` over contiguous column chunks of `x`.
fn per_head<F>(x: &DMatrix<f64>, heads: &[DMatrix<f64>], f: F) -> DMatrix<f64>
where
    F: Fn(nalgebra::DMatrixView<'_, f64>, &DMatrix<f64>) -> DMatrix<f64>,
{
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut off = 0;
    for theta in heads {
        let w = theta.nrows();
        out.columns_mut(off, w).copy_from(&f(x.columns(off, w), theta));
        off += w;
    }
    out
}

/// `relu(h_new) + h_prev`, with `h_prev` first mapped through `projection`
/// (`f_prev x f_new`) when given.
pub fn skip_connect(h_new: &[f64], h_prev: &[f64], projection: Option<&DMatrix<f64>>) -> Result<Vec<f64>> {
    let carried: Vec<f64> = match projection {
        Some(p) => {
            if p.nrows() != h_prev.len() || p.ncols() != h_new.len() {
                return Err(mismatch(
                    "skip projection",
                    format!("{}x{}", h_prev.len(), h_new.len()),
                    shape(p),
                ));
            }
            (0..h_new.len())
                .map(|c| (0..h_prev.len()).map(|r| h_prev[r] * p[(r, c)]).sum())
                .collect()
        }
        None if h_prev.len() == h_new.len() => h_prev.to_vec(),
        None => {
            return Err(GnnError::WidthMismatchWithoutProjection {
                from: h_prev.len(),
                to: h_new.len(),
            })
        }
    };
    Ok(h_new.iter().zip(carried).map(|(&a, b)| a.max(0.0) + b).collect())
}

/// Row-major concatenation `z_1 || ... || z_n`.
pub fn concat_pool(z: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for i in 0..z.nrows() {
        out.extend(z.row(i).iter());
    }
    out
}

/// Normalized adjacency and node features of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub a_norm: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl GraphInput {
    pub fn new(a_norm: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = a_norm.nrows();
        if a_norm.ncols() != n || x.nrows() != n {
            return Err(mismatch("graph input", format!("{n} nodes"), format!("{} and {}", shape(&a_norm), shape(&x))));
        }
        Ok(Self { a_norm, x })
    }

    /// Symmetrized view for propagation, TE rows as features.
    pub fn from_graph(g: &CausalGraph) -> Self {
        Self {
            a_norm: normalize_sym(&symmetrized_view(g)),
            x: g.features().clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.a_norm.nrows()
    }

    pub fn feature_width(&self) -> usize {
        self.x.ncols()
    }
}

/// Converts graphs to model inputs; every graph must share `n`.
pub fn prepare(ds: &LabeledDataset<CausalGraph>) -> Result<LabeledDataset<GraphInput>> {
    let first = ds.samples.first().map(|s| s.item.n());
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let n = s.item.n();
            if let Some(f) = first.filter(|&f| f != n) {
                return Err(GnnError::MixedNodeCounts(f, n));
            }
            Ok(Labeled {
                item: GraphInput::from_graph(&s.item),
                label: s.label,
                split: s.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub theta: DMatrix<f64>,
    pub heads: Vec<DMatrix<f64>>,
    pub skip: Option<DMatrix<f64>>,
}

/// Every learnable tensor. Biases are column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    pub fc1_w: DMatrix<f64>,
    pub fc1_b: DMatrix<f64>,
    pub fc2_w: DMatrix<f64>,
    pub fc2_b: DMatrix<f64>,
    pub out_w: DMatrix<f64>,
    pub out_b: DMatrix<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    // column-major fill order is part of the seeded contract
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

impl Params {
    fn init(cfg: &ModelConfig, n: usize, in_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = in_features;
        if cfg.graph_convolution {
            for &f in &cfg.layer_sizes {
                let theta = glorot(width, f, rng);
                let w = f / cfg.heads_per_layer;
                let heads = (0..cfg.heads_per_layer).map(|_| glorot(w, w, rng)).collect();
                let skip = (width != f).then(|| glorot(width, f, rng));
                layers.push(LayerParams { theta, heads, skip });
                width = f;
            }
        }
        let m = n * width;
        let (h1, h2) = (cfg.fc_hidden_1, cfg.fc_hidden_2);
        Self {
            layers,
            fc1_w: glorot(h1, m, rng),
            fc1_b: DMatrix::zeros(h1, 1),
            fc2_w: glorot(h2, h1, rng),
            fc2_b: DMatrix::zeros(h2, 1),
            out_w: glorot(1, h2, rng),
            out_b: DMatrix::zeros(1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensor names in the order of [`Params::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(format!("layer{l}.theta"));
            for j in 0..layer.heads.len() {
                out.push(format!("layer{l}.head{j}"));
            }
            if layer.skip.is_some() {
                out.push(format!("layer{l}.skip"));
            }
        }
        for s in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "out.weight", "out.bias"] {
            out.push(s.to_string());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.theta);
            out.extend(layer.heads.iter());
            out.extend(layer.skip.iter());
        }
        out.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b, &self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.theta);
            out.extend(layer.heads.iter_mut());
            out.extend(layer.skip.iter_mut());
        }
        out.extend([
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// First tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.names()
            .into_iter()
            .zip(self.tensors())
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Inverted-dropout masks of the classifier hidden layers for one forward
/// pass: entries are `0` or `1/(1-p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub fc1: DMatrix<f64>,
    pub fc2: DMatrix<f64>,
}

fn mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if p == 0.0 {
        return DMatrix::from_element(rows, cols, 1.0);
    }
    let keep = 1.0 / (1.0 - p);
    DMatrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct LayerCache {
    input: DMatrix<f64>,
    ah: DMatrix<f64>,
    p: DMatrix<f64>,
    g: DMatrix<f64>,
    m: DMatrix<f64>,
    s: DMatrix<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    n: usize,
    width: usize,
    z: DMatrix<f64>,
    a1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    h2: DMatrix<f64>,
    logit: f64,
}

/// Numerically stable `-[y ln σ(s) + (1-y) ln(1-σ(s))]`.
pub fn bce_with_logits(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Parameters, configuration and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub n: usize,
    pub in_features: usize,
    pub params: Params,
    pub adam_m: Params,
    pub adam_v: Params,
    pub step: u64,
}

impl ModelState {
    pub fn init(cfg: &ModelConfig, n: usize, in_features: usize) -> Result<Self> {
        cfg.validate()?;
        if n == 0 || in_features == 0 {
            return Err(GnnError::BadConfig("graphs need at least one node and one feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = Params::init(cfg, n, in_features, &mut rng);
        let zeros = params.zeros_like();
        Ok(Self {
            config: cfg.clone(),
            n,
            in_features,
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
        })
    }

    /// Width of the pooled graph embedding, `n * f_last`.
    pub fn pooled_width(&self) -> usize {
        self.params.fc1_w.ncols()
    }

    fn check_input(&self, g: &GraphInput) -> Result<()> {
        if g.n() != self.n || g.feature_width() != self.in_features {
            return Err(mismatch(
                "model input",
                format!("{} nodes x {} features", self.n, self.in_features),
                format!("{} nodes x {} features", g.n(), g.feature_width()),
            ));
        }
        Ok(())
    }

    pub fn sample_masks(&self, rng: &mut ChaCha8Rng) -> DropoutMasks {
        let p = self.config.dropout_rate;
        DropoutMasks {
            fc1: mask(self.config.fc_hidden_1, 1, p, rng),
            fc2: mask(self.config.fc_hidden_2, 1, p, rng),
        }
    }

    fn forward(&self, g: &GraphInput, masks: Option<&DropoutMasks>) -> Cache {
        let cfg = &self.config;
        let mut h = g.x.clone();
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for lp in &self.params.layers {
            let ah = &g.a_norm * &h;
            let p = &ah * &lp.theta;
            let gact = p.map(|x| cfg.layer_activation.apply(x));
            let m = per_head(&gact, &lp.heads, |chunk, theta| chunk * theta);
            let s = m.map(|x| cfg.skip_activation.apply(x));
            let out = match &lp.skip {
                Some(w) => &s + &h * w,
                None => &s + &h,
            };
            layers.push(LayerCache {
                input: h,
                ah,
                p,
                g: gact,
                m,
                s,
            });
            h = out;
        }
        let (n, width) = (h.nrows(), h.ncols());
        let z = DMatrix::from_vec(n * width, 1, concat_pool(&h));
        let a1 = &self.params.fc1_w * &z + &self.params.fc1_b;
        let mut h1 = a1.map(|x| x.max(0.0));
        if let Some(mk) = masks {
            h1.component_mul_assign(&mk.fc1);
        }
        let a2 = &self.params.fc2_w * &h1 + &self.params.fc2_b;
        let mut h2 = a2.map(|x| x.max(0.0));
        if let Some(mk) = masks {
            h2.component_mul_assign(&mk.fc2);
        }
        let logit = (&self.params.out_w * &h2)[(0, 0)] + self.params.out_b[(0, 0)];
        Cache {
            layers,
            n,
            width,
            z,
            a1,
            h1,
            a2,
            h2,
            logit,
        }
    }

    /// Accumulates `dloss/dparams` for one sample into `grads`, given
    /// `dloss/dlogit`.
    fn backward(&self, g: &GraphInput, cache: &Cache, masks: Option<&DropoutMasks>, dlogit: f64, grads: &mut Params) {
        let cfg = &self.config;
        let p = &self.params;
        grads.out_w += dlogit * cache.h2.transpose();
        grads.out_b[(0, 0)] += dlogit;
        let mut dh2 = p.out_w.transpose() * dlogit;
        if let Some(mk) = masks {
            dh2.component_mul_assign(&mk.fc2);
        }
        let da2 = dh2.zip_map(&cache.a2, |d, a| if a > 0.0 { d } else { 0.0 });
        grads.fc2_w += &da2 * cache.h1.transpose();
        grads.fc2_b += &da2;
        let mut dh1 = p.fc2_w.transpose() * &da2;
        if let Some(mk) = masks {
            dh1.component_mul_assign(&mk.fc1);
        }
        let da1 = dh1.zip_map(&cache.a1, |d, a| if a > 0.0 { d } else { 0.0 });
        grads.fc1_w += &da1 * cache.z.transpose();
        grads.fc1_b += &da1;
        if p.layers.is_empty() {
            return;
        }
        let dz = p.fc1_w.transpose() * &da1;
        // dz is the row-major flattening of dZ
        let mut dh = DMatrix::from_fn(cache.n, cache.width, |i, c| dz[(i * cache.width + c, 0)]);
        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let gl = &mut grads.layers[l];
            let dout = dh;
            let dm = dout.zip_zip_map(&lc.m, &lc.s, |d, pre, post| d * cfg.skip_activation.derivative(pre, post));
            let mut off = 0;
            for dhead in gl.heads.iter_mut() {
                let w = dhead.nrows();
                *dhead += lc.g.columns(off, w).transpose() * dm.columns(off, w);
                off += w;
            }
            let dg = per_head(&dm, &lp.heads, |chunk, theta| chunk * theta.transpose());
            let dp = dg.zip_zip_map(&lc.p, &lc.g, |d, pre, post| d * cfg.layer_activation.derivative(pre, post));
            gl.theta += lc.ah.transpose() * &dp;
            if let Some(dw) = gl.skip.as_mut() {
                *dw += lc.input.transpose() * &dout;
            }
            if l == 0 {
                break;
            }
            let mut dprev = g.a_norm.transpose() * (&dp * lp.theta.transpose());
            match &lp.skip {
                Some(w) => dprev += &dout * w.transpose(),
                None => dprev += &dout,
            }
            dh = dprev;
        }
    }

    /// Pre-sigmoid output, dropout off.
    pub fn logit(&self, g: &GraphInput) -> Result<f64> {
        self.check_input(g)?;
        Ok(self.forward(g, None).logit)
    }

    /// Probability of class 1, dropout off.
    pub fn predict_proba(&self, g: &GraphInput) -> Result<f64> {
        self.logit(g).map(sigmoid)
    }

    /// Pooled embedding in eval mode.
    pub fn embed(&self, g: &GraphInput) -> Result<Vec<f64>> {
        self.check_input(g)?;
        Ok(self.forward(g, None).z.iter().copied().collect())
    }

    /// Classifier head on a pooled embedding.
    pub fn classify(&self, z_pooled: &[f64]) -> Result<f64> {
        let m = self.pooled_width();
        if z_pooled.len() != m {
            return Err(mismatch("pooled embedding", m.to_string(), z_pooled.len().to_string()));
        }
        let p = &self.params;
        let z = DMatrix::from_column_slice(m, 1, z_pooled);
        let h1 = (&p.fc1_w * z + &p.fc1_b).map(|x| x.max(0.0));
        let h2 = (&p.fc2_w * h1 + &p.fc2_b).map(|x| x.max(0.0));
        Ok(sigmoid((&p.out_w * h2)[(0, 0)] + p.out_b[(0, 0)]))
    }

    pub fn to_json(&self) -> Result<String> {
        let record = |p: &Params| -> Vec<TensorRecord> {
            p.names()
                .into_iter()
                .zip(p.tensors())
                .map(|(name, t)| TensorRecord {
                    name,
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.transpose().iter().copied().collect(),
                })
                .collect()
        };
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            n: self.n,
            in_features: self.in_features,
            step: self.step,
            params: record(&self.params),
            adam_m: record(&self.adam_m),
            adam_v: record(&self.adam_v),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_SCHEMA_VERSION)) {
            return Err(GnnError::Checkpoint(format!(
                "schema_version {version:?}, expected {CHECKPOINT_SCHEMA_VERSION}"
            )));
        }
        let file: CheckpointFile = serde_json::from_value(raw)?;
        let mut state = ModelState::init(&file.config, file.n, file.in_features)?;
        state.step = file.step;
        for (target, records) in [
            (&mut state.params, &file.params),
            (&mut state.adam_m, &file.adam_m),
            (&mut state.adam_v, &file.adam_v),
        ] {
            let names = target.names();
            if names.len() != records.len() {
                return Err(GnnError::Checkpoint(format!(
                    "{} tensors, expected {}",
                    records.len(),
                    names.len()
                )));
            }
            for ((name, t), r) in names.iter().zip(target.tensors_mut()).zip(records) {
                if &r.name != name || r.rows != t.nrows() || r.cols != t.ncols() || r.data.len() != r.rows * r.cols {
                    return Err(GnnError::Checkpoint(format!(
                        "tensor {} ({}x{}) does not match {} ({})",
                        r.name,
                        r.rows,
                        r.cols,
                        name,
                        shape(t)
                    )));
                }
                *t = DMatrix::from_row_slice(r.rows, r.cols, &r.data);
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    config: ModelConfig,
    n: usize,
    in_features: usize,
    step: u64,
    params: Vec<TensorRecord>,
    adam_m: Vec<TensorRecord>,
    adam_v: Vec<TensorRecord>,
}

/// Mean BCE loss over `batch` and its gradient. With `masks`, sample `i` uses
/// `masks[i]` (train mode); without, dropout is off. Samples accumulate in
/// batch order.
pub fn loss_and_gradient(
    state: &ModelState,
    batch: &[(&GraphInput, u8)],
    masks: Option<&[DropoutMasks]>,
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(GnnError::EmptySplit("batch"));
    }
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(mismatch("dropout masks", batch.len().to_string(), m.len().to_string()));
        }
    }
    for (g, _) in batch {
        state.check_input(g)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = state.params.zeros_like();
    let mut loss = 0.0;
    for (i, &(g, label)) in batch.iter().enumerate() {
        let mk = masks.map(|m| &m[i]);
        let cache = state.forward(g, mk);
        let y = f64::from(label);
        loss += bce_with_logits(cache.logit, y);
        state.backward(g, &cache, mk, scale * (sigmoid(cache.logit) - y), &mut total);
    }
    Ok((loss * scale, total))
}

/// One Adam update with bias correction.
pub fn adam_step(state: &mut ModelState, grads: &Params, opt: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ps = state.params.tensors_mut();
    let ms = state.adam_m.tensors_mut();
    let vs = state.adam_v.tensors_mut();
    for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
        for idx in 0..p.len() {
            let gi = g[idx];
            m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
            v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
            let mhat = m[idx] / c1;
            let vhat = v[idx] / c2;
            p[idx] -= opt.lr * mhat / (vhat.sqrt() + opt.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Hard labels at `p >= 0.5`.
    pub fn from_scores(probs: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= DECISION_THRESHOLD, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve by the rank-sum statistic with midranks for ties;
/// `None` unless both classes are present.
pub fn auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Absent when the split holds one class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

impl EvalMetrics {
    /// Threshold metrics from a confusion matrix; zero denominators give 0.
    pub fn from_confusion(c: Confusion) -> Self {
        Self {
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            auc: None,
            confusion: c,
        }
    }

    pub fn from_scores(probs: &[f64], labels: &[u8]) -> Result<Self> {
        if probs.is_empty() {
            return Err(GnnError::EmptySplit("evaluation"));
        }
        if probs.len() != labels.len() {
            return Err(mismatch("scores", labels.len().to_string(), probs.len().to_string()));
        }
        Ok(Self {
            auc: auc(probs, labels),
            ..Self::from_confusion(Confusion::from_scores(probs, labels))
        })
    }

    pub fn auc_checked(&self) -> Result<f64> {
        self.auc.ok_or(GnnError::SingleClassSplit)
    }
}

/// Eval-mode probabilities in sample order.
pub fn predict(model: &ModelState, samples: &[&Labeled<GraphInput>]) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| model.predict_proba(&s.item)).collect()
}

pub fn evaluate(model: &ModelState, samples: &[&Labeled<GraphInput>]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(GnnError::EmptySplit("evaluation"));
    }
    let probs = predict(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    EvalMetrics::from_scores(&probs, &labels)
}

pub fn split_name(tag: Split) -> &'static str {
    match tag {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn evaluate_split(model: &ModelState, ds: &LabeledDataset<GraphInput>, tag: Split) -> Result<EvalMetrics> {
    let samples: Vec<_> = ds.split(tag).collect();
    if samples.is_empty() {
        return Err(GnnError::EmptySplit(split_name(tag)));
    }
    evaluate(model, &samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingCurve {
    /// CSV `epoch,train_loss,val_loss,val_f1`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_f1\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                crate::fmt::sig12(e.train_loss),
                crate::fmt::sig12(e.val_loss),
                crate::fmt::sig12(e.val_f1)
            ));
        }
        s
    }
}

pub fn train(
    ds: &LabeledDataset<CausalGraph>,
    cfg: &ModelConfig,
    opt: &TrainConfig,
) -> Result<(ModelState, TrainingCurve)> {
    train_inputs(&prepare(ds)?, cfg, opt)
}

/// Mini-batch Adam on the train split with early stopping on validation F1.
///
/// An epoch improves on the best so far when its validation F1 is higher, or
/// equal with a lower validation loss; the returned state is the snapshot
/// from the best epoch. Training stops after `patience` epochs without
/// improvement.
pub fn train_inputs(
    ds: &LabeledDataset<GraphInput>,
    cfg: &ModelConfig,
    opt: &TrainConfig,
) -> Result<(ModelState, TrainingCurve)> {
    opt.validate()?;
    let train: Vec<&Labeled<GraphInput>> = ds.split(Split::Train).collect();
    let val: Vec<&Labeled<GraphInput>> = ds.split(Split::Val).collect();
    if train.is_empty() {
        return Err(GnnError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(GnnError::EmptySplit("val"));
    }
    let first = &train[0].item;
    let mut state = ModelState::init(cfg, first.n(), first.feature_width())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();

    let mut curve = TrainingCurve {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, f64, ModelState)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<(&GraphInput, u8)> = chunk.iter().map(|&i| (&train[i].item, train[i].label)).collect();
            let masks: Vec<DropoutMasks> = chunk.iter().map(|_| state.sample_masks(&mut rng)).collect();
            let (loss, grads) = loss_and_gradient(&state, &batch, Some(&masks))?;
            if !loss.is_finite() || grads.first_non_finite().is_some() {
                return Err(GnnError::DivergedToNaN(state.step + 1));
            }
            adam_step(&mut state, &grads, opt);
            if state.params.first_non_finite().is_some() {
                return Err(GnnError::DivergedToNaN(state.step));
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let logits: Vec<f64> = val.par_iter().map(|s| state.logit(&s.item)).collect::<Result<_>>()?;
        let probs: Vec<f64> = logits.iter().map(|&s| sigmoid(s)).collect();
        let val_loss = logits
            .iter()
            .zip(&val_labels)
            .map(|(&s, &y)| bce_with_logits(s, f64::from(y)))
            .sum::<f64>()
            / val.len() as f64;
        let val_f1 = EvalMetrics::from_scores(&probs, &val_labels)?.f1;
        curve.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_f1,
        });
        let improved = match &best {
            None => true,
            Some((f1, loss, _)) => val_f1 > *f1 || (val_f1 == *f1 && val_loss < *loss),
        };
        if improved {
            best = Some((val_f1, val_loss, state.clone()));
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opt.patience {
                curve.stopped_early = true;
                break;
            }
        }
    }
    let (_, _, snapshot) = best.expect("at least one epoch ran");
    Ok((snapshot, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> GraphInput {
        let mut s = SymAdjacency::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.5 {
                    s.add_edge(i, j);
                }
            }
        }
        let x = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(0.0..0.5) });
        GraphInput::new(normalize_sym(&s), x).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            layer_sizes: vec![4, 4],
            heads_per_layer: 2,
            dropout_rate: 0.3,
            fc_hidden_1: 6,
            fc_hidden_2: 5,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn normalize_lone_node_and_pair() {
        assert_eq!(normalize_adjacency(&[vec![false]]).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let a = normalize_adjacency(&[vec![false, true], vec![true, false]]).unwrap();
        assert!(a.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn normalize_rejects_bad_input() {
        let asym = vec![vec![false, true], vec![false, false]];
        assert!(matches!(normalize_adjacency(&asym), Err(GnnError::AsymmetricInput(1, 0))));
        let looped = vec![vec![true]];
        assert!(matches!(normalize_adjacency(&looped), Err(GnnError::SelfLoop(0))));
    }

    #[test]
    fn normalize_isolated_node_keeps_self_loop() {
        let s = SymAdjacency::from_edges(3, &[(0, 1)]);
        let a = normalize_sym(&s);
        assert_eq!(a[(2, 2)], 1.0);
        assert_eq!(a[(2, 0)], 0.0);
    }

    #[test]
    fn normalize_spectrum_within_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random_graph(7, &mut rng);
            assert_eq!(g.a_norm, g.a_norm.transpose());
            let eig = g.a_norm.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&l)));
        }
    }

    #[test]
    fn gcn_layer_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_matrix(4, 3, &mut rng);
        let out = gcn_layer(&h, &DMatrix::identity(4, 4), &DMatrix::identity(3, 3), Activation::Identity).unwrap();
        assert_eq!(out, h);
        let zero = gcn_layer(&h, &DMatrix::identity(4, 4), &DMatrix::zeros(3, 2), Activation::Sigmoid).unwrap();
        assert!(zero.iter().all(|&x| x == 0.5));
        assert!(matches!(
            gcn_layer(&h, &DMatrix::identity(3, 3), &DMatrix::zeros(3, 2), Activation::Relu),
            Err(GnnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gcn_layer_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(4, &mut rng);
        let theta = rand_matrix(4, 3, &mut rng);
        let out = gcn_layer(&g.x, &g.a_norm, &theta, Activation::Sigmoid).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    for r in 0..4 {
                        acc += g.a_norm[(i, j)] * g.x[(j, r)] * theta[(r, c)];
                    }
                }
                assert!((out[(i, c)] - 1.0 / (1.0 + (-acc).exp())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_examples() {
        let h = vec![0.5, -1.0, 2.0, 3.0];
        assert_eq!(multi_head_transform(&h, &[DMatrix::identity(4, 4)]).unwrap(), h);
        let twice = DMatrix::identity(2, 2) * 2.0;
        let out = multi_head_transform(&h, &[twice.clone(), twice]).unwrap();
        assert_eq!(out, h.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        assert!(matches!(
            multi_head_transform(&h, &vec![DMatrix::identity(1, 1); 3]),
            Err(GnnError::IndivisibleWidth { width: 4, heads: 3 })
        ));
    }

    #[test]
    fn multi_head_matches_block_diagonal_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = [rand_matrix(2, 2, &mut rng), rand_matrix(2, 2, &mut rng)];
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut bd = [[0.0; 4]; 4];
        for (j, t) in heads.iter().enumerate() {
            for r in 0..2 {
                for c in 0..2 {
                    bd[2 * j + r][2 * j + c] = t[(r, c)];
                }
            }
        }
        let out = multi_head_transform(&h, &heads).unwrap();
        for c in 0..4 {
            let want: f64 = (0..4).map(|r| h[r] * bd[r][c]).sum();
            assert!((out[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn skip_connect_examples() {
        let p = vec![0.3, -0.2, 1.0];
        assert_eq!(skip_connect(&[-1.0; 3], &p, None).unwrap(), p);
        assert_eq!(skip_connect(&[1.0, 2.0], &[0.5, 0.5], None).unwrap(), vec![1.5, 2.5]);
        assert!(matches!(
            skip_connect(&[1.0, 2.0], &p, None),
            Err(GnnError::WidthMismatchWithoutProjection { from: 3, to: 2 })
        ));
    }

    #[test]
    fn skip_connect_with_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_matrix(8, 4, &mut rng);
        let prev: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let new = vec![0.7, -0.1, 0.0, 2.0];
        let out = skip_connect(&new, &prev, Some(&w)).unwrap();
        assert_eq!(out.len(), 4);
        for c in 0..4 {
            let mut proj = 0.0;
            for r in 0..8 {
                proj += w[(r, c)] * prev[r];
            }
            assert!((out[c] - (new[c].max(0.0) + proj)).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_pool_is_row_major() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(concat_pool(&z), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let one = DMatrix::from_row_slice(1, 3, &[7.0, 8.0, 9.0]);
        assert_eq!(concat_pool(&one), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_pool_permutes_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_matrix(4, 3, &mut rng);
        let perm = [2, 0, 3, 1];
        let zp = DMatrix::from_fn(4, 3, |i, c| z[(perm[i], c)]);
        let (a, b) = (concat_pool(&z), concat_pool(&zp));
        for i in 0..4 {
            assert_eq!(b[3 * i..3 * i + 3], a[3 * perm[i]..3 * perm[i] + 3]);
        }
        assert_ne!(a, b);
    }

    #[test]
    fn classify_zero_and_saturated() {
        let mut m = ModelState::init(&small_config(), 5, 5).unwrap();
        for t in m.params.tensors_mut() {
            t.fill(0.0);
        }
        let z = vec![0.3; m.pooled_width()];
        assert_eq!(m.classify(&z).unwrap(), 0.5);
        m.params.out_b[(0, 0)] = 50.0;
        assert!(m.classify(&z).unwrap() > 1.0 - 1e-12);
        assert!(matches!(m.classify(&[0.0]), Err(GnnError::ShapeMismatch { .. })));
    }

    #[test]
    fn classify_matches_straight_line_oracle() {
        let m = ModelState::init(&small_config(), 5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f64> = (0..m.pooled_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = &m.params;
        let layer = |w: &DMatrix<f64>, b: &DMatrix<f64>, x: &[f64]| -> Vec<f64> {
            (0..w.nrows())
                .map(|r| {
                    let mut acc = b[(r, 0)];
                    for (c, xc) in x.iter().enumerate() {
                        acc += w[(r, c)] * xc;
                    }
                    acc
                })
                .collect()
        };
        let h1: Vec<f64> = layer(&p.fc1_w, &p.fc1_b, &z).into_iter().map(|v| v.max(0.0)).collect();
        let h2: Vec<f64> = layer(&p.fc2_w, &p.fc2_b, &h1).into_iter().map(|v| v.max(0.0)).collect();
        let s = layer(&p.out_w, &p.out_b, &h2)[0];
        let want = 1.0 / (1.0 + (-s).exp());
        assert!((m.classify(&z).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn forward_pipeline_agrees_with_building_blocks() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(5, &mut rng);
        let m = ModelState::init(&cfg, 5, 5).unwrap();
        let mut h = g.x.clone();
        for lp in &m.params.layers {
            let gl = gcn_layer(&h, &g.a_norm, &lp.theta, cfg.layer_activation).unwrap();
            let next = DMatrix::from_fn(5, gl.ncols(), |_, _| 0.0);
            let mut next = next;
            for i in 0..5 {
                let row: Vec<f64> = gl.row(i).iter().copied().collect();
                let mh = multi_head_transform(&row, &lp.heads).unwrap();
                let prev: Vec<f64> = h.row(i).iter().copied().collect();
                let out = skip_connect(&mh, &prev, lp.skip.as_ref()).unwrap();
                for (c, v) in out.into_iter().enumerate() {
                    next[(i, c)] = v;
                }
            }
            h = next;
        }
        let z = concat_pool(&h);
        assert!((m.embed(&g).unwrap().iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)) < 1e-12);
        assert!((m.predict_proba(&g).unwrap() - m.classify(&z).unwrap()).abs() < 1e-12);
    }

    fn gradient_check(cfg: &ModelConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let graphs = [random_graph(5, &mut rng), random_graph(5, &mut rng)];
        let batch = [(&graphs[0], 1u8), (&graphs[1], 0u8)];
        let mut state = ModelState::init(cfg, 5, 5).unwrap();
        let masks: Vec<DropoutMasks> = (0..2).map(|_| state.sample_masks(&mut rng)).collect();
        let (_, grads) = loss_and_gradient(&state, &batch, Some(&masks)).unwrap();
        let names = state.params.names();
        let step = 1e-5;
        for (ti, name) in names.iter().enumerate() {
            let len = state.params.tensors()[ti].len();
            let mut fd = Vec::with_capacity(len);
            for idx in 0..len {
                let orig = state.params.tensors()[ti][idx];
                state.params.tensors_mut()[ti][idx] = orig + step;
                let up = loss_and_gradient(&state, &batch, Some(&masks)).unwrap().0;
                state.params.tensors_mut()[ti][idx] = orig - step;
                let down = loss_and_gradient(&state, &batch, Some(&masks)).unwrap().0;
                state.params.tensors_mut()[ti][idx] = orig;
                fd.push((up - down) / (2.0 * step));
            }
            let an = grads.tensors()[ti];
            let diff: f64 = an.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
            let scale = an.norm() + fd.iter().map(|f| f * f).sum::<f64>().sqrt();
            let rel = if scale < 1e-12 { diff } else { diff / scale };
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        gradient_check(&small_config());
    }

    #[test]
    fn gradient_matches_finite_differences_relu_layers() {
        let cfg = ModelConfig {
            layer_activation: Activation::Relu,
            dropout_rate: 0.0,
            ..small_config()
        };
        gradient_check(&cfg);
    }

    #[test]
    fn gradient_matches_finite_differences_without_convolution() {
        let cfg = ModelConfig {
            graph_convolution: false,
            ..small_config()
        };
        gradient_check(&cfg);
    }

    #[test]
    fn no_convolution_pools_raw_features() {
        let cfg = ModelConfig {
            graph_convolution: false,
            ..ModelConfig::default()
        };
        let m = ModelState::init(&cfg, 7, 7).unwrap();
        assert_eq!(m.pooled_width(), 49);
        assert!(m.params.layers.is_empty());
    }

    #[test]
    fn overfits_one_sample() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = random_graph(5, &mut rng);
        let mut state = ModelState::init(&cfg, 5, 5).unwrap();
        let opt = TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let batch = [(&g, 1u8)];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (loss, grads) = loss_and_gradient(&state, &batch, None).unwrap();
            losses.push(loss);
            adam_step(&mut state, &grads, &opt);
        }
        let last = loss_and_gradient(&state, &batch, None).unwrap().0;
        assert!(last < 0.01, "final loss {last}");
        assert!(last < losses[20] && last < losses[0]);
    }

    fn toy_dataset(count: usize, seed: u64) -> LabeledDataset<GraphInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..count)
            .map(|i| {
                let mut g = random_graph(5, &mut rng);
                let label = (i % 2) as u8;
                g.x[(0, 1)] += f64::from(label);
                let split = match i % 5 {
                    0 => Split::Val,
                    1 => Split::Test,
                    _ => Split::Train,
                };
                Labeled {
                    item: g,
                    label,
                    split: Some(split),
                }
            })
            .collect();
        LabeledDataset::new(samples).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = toy_dataset(20, 12);
        let cfg = small_config();
        let opt = TrainConfig {
            lr: 0.0,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let (state, _) = train_inputs(&ds, &cfg, &opt).unwrap();
        assert_eq!(state.params, ModelState::init(&cfg, 5, 5).unwrap().params);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(30, 13);
        let opt = TrainConfig {
            lr: 1e-3,
            max_epochs: 15,
            ..TrainConfig::default()
        };
        let (a, ca) = train_inputs(&ds, &small_config(), &opt).unwrap();
        let (b, cb) = train_inputs(&ds, &small_config(), &opt).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert_eq!(ca.to_csv().lines().next(), Some("epoch,train_loss,val_loss,val_f1"));
    }

    #[test]
    fn training_returns_best_snapshot() {
        let ds = toy_dataset(30, 14);
        let opt = TrainConfig {
            lr: 1e-3,
            max_epochs: 30,
            patience: 5,
            ..TrainConfig::default()
        };
        let (state, curve) = train_inputs(&ds, &small_config(), &opt).unwrap();
        let best = curve.epochs[curve.best_epoch - 1];
        let val: Vec<_> = ds.split(Split::Val).collect();
        assert_eq!(evaluate(&state, &val).unwrap().f1, best.val_f1);
        assert!(curve.epochs.iter().all(|e| e.val_f1 <= best.val_f1));
        if curve.stopped_early {
            assert_eq!(curve.epochs.len(), curve.best_epoch + opt.patience);
        }
    }

    #[test]
    fn training_rejects_empty_splits() {
        let mut ds = toy_dataset(10, 15);
        for s in &mut ds.samples {
            if s.split == Some(Split::Val) {
                s.split = Some(Split::Train);
            }
        }
        assert!(matches!(
            train_inputs(&ds, &small_config(), &TrainConfig::default()),
            Err(GnnError::EmptySplit("val"))
        ));
    }

    #[test]
    fn diverging_training_reports_step() {
        let mut ds = toy_dataset(10, 16);
        ds.samples[2].item.x[(0, 0)] = f64::NAN;
        let r = train_inputs(&ds, &small_config(), &TrainConfig::default());
        assert!(matches!(r, Err(GnnError::DivergedToNaN(1))), "{r:?}");
    }

    #[test]
    fn dropout_contract() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_graph(5, &mut rng);
        let m = ModelState::init(&cfg, 5, 5).unwrap();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mk = m.sample_masks(&mut r);
            m.forward(&g, Some(&mk)).logit
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        assert_eq!(m.predict_proba(&g).unwrap(), m.predict_proba(&g).unwrap());
        assert_eq!(m.logit(&g).unwrap(), m.forward(&g, None).logit);
    }

    #[test]
    fn evaluation_is_pure() {
        let ds = toy_dataset(20, 18);
        let m = ModelState::init(&small_config(), 5, 5).unwrap();
        let a = evaluate_split(&m, &ds, Split::Test).unwrap();
        let b = evaluate_split(&m, &ds, Split::Test).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = toy_dataset(20, 19);
        let opt = TrainConfig {
            lr: 1e-3,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (state, _) = train_inputs(&ds, &small_config(), &opt).unwrap();
        let back = ModelState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(back, state);
        let bumped = state.to_json().unwrap().replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(ModelState::from_json(&bumped), Err(GnnError::Checkpoint(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for name in PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_none());
        let growing = ModelConfig {
            layer_sizes: vec![4, 8],
            ..small_config()
        };
        assert!(matches!(growing.validate(), Err(GnnError::BadConfig(_))));
        let odd = ModelConfig {
            layer_sizes: vec![6],
            heads_per_layer: 4,
            ..small_config()
        };
        assert!(matches!(odd.validate(), Err(GnnError::IndivisibleWidth { width: 6, heads: 4 })));
        let drop = ModelConfig {
            dropout_rate: 1.0,
            ..small_config()
        };
        assert!(drop.validate().is_err());
    }

    #[test]
    fn metrics_worked_example() {
        let c = Confusion { tp: 3, fp: 1, tn: 4, fn_: 2 };
        let m = EvalMetrics::from_confusion(c);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.sensitivity, 0.6);
        assert_eq!(m.specificity, 0.8);
    }

    #[test]
    fn metrics_perfect_and_tied() {
        let labels = [1, 0, 1, 0];
        let m = EvalMetrics::from_scores(&[0.9, 0.1, 0.8, 0.3], &labels).unwrap();
        assert_eq!((m.f1, m.auc), (1.0, Some(1.0)));
        let tied = EvalMetrics::from_scores(&[0.4; 4], &labels).unwrap();
        assert_eq!(tied.auc, Some(0.5));
        let single = EvalMetrics::from_scores(&[0.9, 0.2], &[1, 1]).unwrap();
        assert_eq!(single.auc, None);
        assert!(matches!(single.auc_checked(), Err(GnnError::SingleClassSplit)));
        assert_eq!(single.sensitivity, 0.5);
        assert!(matches!(EvalMetrics::from_scores(&[], &[]), Err(GnnError::EmptySplit(_))));
    }

    #[test]
    fn prepare_rejects_mixed_node_counts() {
        let mk = |n: usize| {
            let te = crate::entropy::TeMatrix::from_rows(&vec![vec![0.0; n]; n]).unwrap();
            Labeled {
                item: crate::graph::build_adjacency(&te, 0.1).unwrap(),
                label: 0,
                split: Some(Split::Train),
            }
        };
        let ds = LabeledDataset::new(vec![mk(3), mk(4)]).unwrap();
        assert!(matches!(prepare(&ds), Err(GnnError::MixedNodeCounts(3, 4))));
    }

    fn pairwise_auc(probs: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in probs.iter().enumerate() {
            for (j, &pj) in probs.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if pi > pj {
                        1.0
                    } else if pi == pj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            data in proptest::collection::vec((0u8..5, 0u8..2), 2..40)
        ) {
            let probs: Vec<f64> = data.iter().map(|&(b, _)| f64::from(b) / 4.0).collect();
            let labels: Vec<u8> = data.iter().map(|&(_, y)| y).collect();
            match auc(&probs, &labels) {
                Some(a) => prop_assert!((a - pairwise_auc(&probs, &labels)).abs() < 1e-12),
                None => prop_assert!(labels.iter().all(|&y| y == labels[0])),
            }
        }

        #[test]
        fn metric_identities(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let m = EvalMetrics::from_confusion(Confusion { tp, fp, tn, fn_ });
            if tp + fn_ > 0 {
                prop_assert_eq!((m.sensitivity * (tp + fn_) as f64).round() as u64, tp);
            }
            if tn + fp > 0 {
                prop_assert_eq!((m.specificity * (tn + fp) as f64).round() as u64, tn);
            }
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let hm = if precision + m.sensitivity > 0.0 {
                2.0 * precision * m.sensitivity / (precision + m.sensitivity)
            } else {
                0.0
            };
            prop_assert!((m.f1 - hm).abs() < 1e-12);
        }
    }
}
