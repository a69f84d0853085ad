//! Configuration, end-to-end runs, ablations, threshold sweeps and exports.
//!
//! A run writes into one output directory:
//!
//! ```text
//! run.status            "incomplete" until every stage finished, then "complete"
//! config.toml           resolved configuration
//! splits.csv            sample_id,label,split
//! te/<id>.csv           transfer entropy heatmap per sample
//! graphs/pre/<id>.json  thresholded graph
//! graphs/post/<id>.json graph fed to the classifier
//! rewiring/<id>.jsonl   one record per rewiring iteration
//! checkpoint.json       best model state
//! training_curve.csv    epoch,train_loss,val_loss,val_f1
//! metrics.json          run report
//! ```

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::curvature_report;
use crate::entropy::{te_matrix, TeMatrix, DEFAULT_BINS};
use crate::gnn::{self, EvalMetrics, GraphInput, ModelConfig, ModelState, TrainConfig, TrainingCurve};
use crate::graph::{
    abs_correlation_matrix, build_adjacency, edges_csv, symmetrized_view, top_fraction_edges, CausalGraph,
};
use crate::rewire::{records_csv, rewire, RewireConfig, RewireError, RewiringLog, StopReason};
use crate::signal::{
    generate_synthetic, load_manifest, save_dataset, split_dataset, Labeled, LabeledDataset, SignalMatrix, Split,
    SynthSpec,
};

/// Thresholds examined by the sensitivity sweep.
pub const DEFAULT_C_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("unknown preset `{0}` (expected one of cobre, acpi, abide, adni)")]
    UnknownPreset(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown ablation variant `{0}` (expected no_caugraph, no_csdrf or no_gconv)")]
    UnknownVariant(String),
    #[error("sweep has no threshold values")]
    EmptySweep,
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
}

fn invalid(key: &str, reason: impl Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// 1 for validation errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { .. } => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn stage<E: Display>(name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

/// Planted coupling topology of one synthetic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// Channel `i` driven by channel `i-1`.
    Chain,
    /// Every channel driven by channel 0.
    Hub,
    /// No cross-channel coupling.
    Independent,
}

impl Coupling {
    /// Transition matrix with `self_weight` on the diagonal.
    pub fn matrix(self, n: usize, weight: f64, self_weight: f64) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = self_weight;
            if i > 0 {
                match self {
                    Coupling::Chain => row[i - 1] = weight,
                    Coupling::Hub => row[0] = weight,
                    Coupling::Independent => {}
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub t: usize,
    pub samples: usize,
    pub coupling: f64,
    pub self_coupling: f64,
    pub noise_std: f64,
    pub class0: Coupling,
    pub class1: Coupling,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 8,
            t: 300,
            samples: 100,
            coupling: 0.8,
            self_coupling: 0.5,
            noise_std: 0.2,
            class0: Coupling::Chain,
            class1: Coupling::Hub,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            n: self.n,
            t: self.t,
            samples: self.samples,
            couplings: [self.class0, self.class1]
                .iter()
                .map(|c| c.matrix(self.n, self.coupling, self.self_coupling))
                .collect(),
            noise_std: self.noise_std,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; synthetic data is generated when absent. Relative
    /// paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub bins: usize,
    pub q: usize,
    pub o: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            q: 1,
            o: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Transfer entropy threshold in bits.
    pub c: f64,
    /// Threshold on |Pearson r| for the correlation-graph ablation.
    pub corr_c: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { c: 0.1, corr_c: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Reference configuration applied before the file's own values.
    pub preset: Option<String>,
    pub seed: u64,
    pub data: DataConfig,
    pub entropy: EntropyConfig,
    pub graph: GraphConfig,
    pub rewiring: RewireConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Keys owned by the top-level seed; setting them directly is rejected.
const DERIVED_KEYS: [&str; 2] = ["rewiring.seed", "model.seed"];

fn preset_threshold(name: &str) -> f64 {
    if name == "acpi" {
        0.05
    } else {
        0.1
    }
}

fn unknown_keys(value: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(table), Some(known)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    for (key, v) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            Some(s) if !DERIVED_KEYS.contains(&path.as_str()) => unknown_keys(v, s, &path, out),
            _ => out.push(path),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl PipelineConfig {
    /// Defaults with `preset` applied.
    pub fn with_preset(name: &str) -> std::result::Result<Self, ConfigError> {
        let model = ModelConfig::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        Ok(Self {
            preset: Some(name.to_string()),
            model,
            graph: GraphConfig {
                c: preset_threshold(name),
                ..GraphConfig::default()
            },
            ..Self::default()
        })
    }

    /// Every key the file format accepts, optional ones filled in.
    fn schema() -> toml::Value {
        let mut full = Self::default();
        full.preset = Some(String::new());
        full.data.manifest = Some(PathBuf::new());
        full.rewiring.max_iterations = Some(0);
        full.rewiring.c_plus = Some(0.0);
        full.rewiring.c_minus = Some(0.0);
        toml::Value::try_from(full).expect("config serializes")
    }

    /// Parses TOML over the defaults (or over `preset` when the file names
    /// one). `base_dir` anchors a relative manifest path.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> std::result::Result<Self, ConfigError> {
        let user: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&user, &Self::schema(), "", &mut unknown);
        if let Some(first) = unknown.into_iter().next() {
            return Err(ConfigError::UnknownKey(first));
        }
        let base = match user.get("preset") {
            Some(p) => {
                let name = p.as_str().ok_or_else(|| invalid("preset", "expected a string"))?;
                Self::with_preset(name)?
            }
            None => Self::default(),
        };
        let mut merged = toml::Value::try_from(base).expect("config serializes");
        merge(&mut merged, user);
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let (Some(dir), Some(m)) = (base_dir, cfg.data.manifest.as_mut()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path.parent())
    }

    /// TOML that parses back to `self`; derived seeds are left out.
    pub fn to_toml(&self) -> String {
        let mut v = toml::Value::try_from(self).expect("config serializes");
        for key in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted key");
            if let Some(t) = v.get_mut(section).and_then(|s| s.as_table_mut()) {
                t.remove(field);
            }
        }
        toml::to_string(&v).expect("config serializes")
    }

    /// Checks every field without touching data files other than the
    /// manifest's existence.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let g = &self.graph;
        if !(g.c.is_finite() && g.c >= 0.0) {
            return Err(invalid("graph.c", format!("{} must be finite and non-negative", g.c)));
        }
        if !(g.corr_c.is_finite() && (0.0..=1.0).contains(&g.corr_c)) {
            return Err(invalid("graph.corr_c", format!("{} must lie in [0, 1]", g.corr_c)));
        }
        let e = &self.entropy;
        if e.bins < 2 {
            return Err(invalid("entropy.bins", "need at least 2 bins"));
        }
        if e.q == 0 {
            return Err(invalid("entropy.q", "history length must be at least 1"));
        }
        if e.o == 0 {
            return Err(invalid("entropy.o", "history length must be at least 1"));
        }
        self.rewiring.validate().map_err(|err| invalid("rewiring", err))?;
        if self.rewiring.c_plus.is_some() != self.rewiring.c_minus.is_some() {
            return Err(invalid("rewiring", "c_plus and c_minus must be given together"));
        }
        self.model.validate().map_err(|err| invalid("model", err))?;
        self.train.validate().map_err(|err| invalid("train", err))?;
        if let Some(p) = &self.preset {
            if ModelConfig::preset(p).is_none() {
                return Err(ConfigError::UnknownPreset(p.clone()));
            }
        }
        match &self.data.manifest {
            Some(m) if !m.exists() => return Err(ConfigError::MissingArtifact(m.clone())),
            Some(_) => {}
            None => self.validate_synth()?,
        }
        Ok(())
    }

    fn validate_synth(&self) -> std::result::Result<(), ConfigError> {
        let s = &self.data.synth;
        if s.n < 2 {
            return Err(invalid("data.synth.n", "need at least 2 channels"));
        }
        let history = self.entropy.q.max(self.entropy.o);
        if s.t <= history + 1 {
            return Err(invalid("data.synth.t", format!("{} is too short for history {history}", s.t)));
        }
        if s.samples < 10 {
            return Err(invalid("data.synth.samples", "need at least 10 samples to split"));
        }
        if !(s.noise_std.is_finite() && s.noise_std > 0.0) {
            return Err(invalid("data.synth.noise_std", "must be positive"));
        }
        for (key, v) in [("data.synth.coupling", s.coupling), ("data.synth.self_coupling", s.self_coupling)] {
            if !v.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        Ok(())
    }
}

/// splitmix64 of `seed` mixed with a stream and an index.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_REWIRE: u64 = 1;
const STREAM_MODEL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCaugraph,
    NoCsdrf,
    NoGconv,
}

pub const ABLATIONS: [Variant; 3] = [Variant::NoCaugraph, Variant::NoCsdrf, Variant::NoGconv];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCaugraph => "no_caugraph",
            Variant::NoCsdrf => "no_csdrf",
            Variant::NoGconv => "no_gconv",
        }
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> std::result::Result<Self, ConfigError> {
        match s {
            "full" => Ok(Variant::Full),
            "no_caugraph" => Ok(Variant::NoCaugraph),
            "no_csdrf" => Ok(Variant::NoCsdrf),
            "no_gconv" => Ok(Variant::NoGconv),
            other => Err(ConfigError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub variant: Variant,
    pub skip_rewire: bool,
    pub skip_train: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            skip_rewire: false,
            skip_train: false,
        }
    }
}

/// Signals with their split tags and per-sample transfer entropy.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub signals: LabeledDataset<SignalMatrix>,
    pub te: Vec<TeMatrix>,
}

/// Synthetic data split with the config seed, or the manifest split with the
/// manifest's own seed.
pub fn load_data(cfg: &PipelineConfig) -> Result<LabeledDataset<SignalMatrix>> {
    let (ds, split_seed) = match &cfg.data.manifest {
        Some(path) => load_manifest(path).map_err(stage("data"))?,
        None => (
            generate_synthetic(&cfg.data.synth.spec(cfg.seed)).map_err(stage("data"))?,
            cfg.seed,
        ),
    };
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = ds.samples.iter().find(|s| !seen.insert(s.item.sample_id().to_string())) {
        return Err(PipelineError::Stage {
            stage: "data",
            message: format!("duplicate sample id {}", dup.item.sample_id()),
        });
    }
    split_dataset(ds, split_seed).map_err(stage("data"))
}

pub fn compute_te(cfg: &PipelineConfig, signals: &LabeledDataset<SignalMatrix>) -> Result<Vec<TeMatrix>> {
    let e = &cfg.entropy;
    signals
        .samples
        .par_iter()
        .map(|s| {
            te_matrix(&s.item, e.bins, e.q, e.o).map_err(|err| PipelineError::Stage {
                stage: "entropy",
                message: format!("{}: {err}", s.item.sample_id()),
            })
        })
        .collect()
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let signals = load_data(cfg)?;
    let te = compute_te(cfg, &signals)?;
    Ok(Prepared { signals, te })
}

fn relabel<T, U>(ds: &LabeledDataset<T>, items: Vec<U>) -> LabeledDataset<U> {
    LabeledDataset {
        samples: ds
            .samples
            .iter()
            .zip(items)
            .map(|(s, item)| Labeled {
                item,
                label: s.label,
                split: s.split,
            })
            .collect(),
    }
}

/// Thresholded graphs, from transfer entropy or, for `no_caugraph`, from
/// absolute correlation thresholded at `graph.corr_c`.
pub fn build_graphs(cfg: &PipelineConfig, prepared: &Prepared, variant: Variant) -> Result<LabeledDataset<CausalGraph>> {
    let graphs = prepared
        .signals
        .samples
        .par_iter()
        .zip(&prepared.te)
        .map(|(s, te)| match variant {
            Variant::NoCaugraph => build_adjacency(&abs_correlation_matrix(&s.item), cfg.graph.corr_c),
            _ => build_adjacency(te, cfg.graph.c),
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(stage("graph"))?;
    Ok(relabel(&prepared.signals, graphs))
}

/// Rewires every graph with its own derived seed. Graphs without edges pass
/// through unchanged with an empty log.
pub fn rewire_graphs(
    cfg: &PipelineConfig,
    graphs: &LabeledDataset<CausalGraph>,
) -> Result<(LabeledDataset<CausalGraph>, Vec<RewiringLog>)> {
    let results = graphs
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rc = RewireConfig {
                seed: derive_seed(cfg.seed, STREAM_REWIRE, i as u64),
                ..cfg.rewiring.clone()
            };
            match rewire(&s.item, &rc) {
                Ok(r) => Ok(r),
                Err(RewireError::EmptyGraph) => {
                    let mut g = s.item.clone();
                    g.provenance.rewired = true;
                    Ok((
                        g,
                        RewiringLog {
                            records: Vec::new(),
                            stop: StopReason::NoEdges,
                        },
                    ))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(stage("rewiring"))?;
    let (out, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((relabel(graphs, out), logs))
}

pub fn model_config(cfg: &PipelineConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        seed: derive_seed(cfg.seed, STREAM_MODEL, 0),
        graph_convolution: cfg.model.graph_convolution && variant != Variant::NoGconv,
        ..cfg.model.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub c: f64,
    pub samples: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Directed edges summed over all samples, before rewiring.
    pub edge_count: usize,
    pub edge_count_post: usize,
    pub edges_added: usize,
    pub edges_removed: usize,
    pub rewired: bool,
    pub pooled_width: Option<usize>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub val: Option<EvalMetrics>,
    pub test: Option<EvalMetrics>,
}

impl RunReport {
    pub fn test_f1(&self) -> Option<f64> {
        self.test.map(|m| m.f1)
    }
}

/// Trains on the train split, early-stops on val, and reports both val and
/// test metrics of the returned snapshot.
pub fn fit(
    cfg: &PipelineConfig,
    graphs: &LabeledDataset<CausalGraph>,
    variant: Variant,
) -> Result<(ModelState, TrainingCurve, EvalMetrics, EvalMetrics)> {
    let inputs: LabeledDataset<GraphInput> = gnn::prepare(graphs).map_err(stage("train"))?;
    let (model, curve) =
        gnn::train_inputs(&inputs, &model_config(cfg, variant), &cfg.train).map_err(stage("train"))?;
    let val = gnn::evaluate_split(&model, &inputs, Split::Val).map_err(stage("evaluate"))?;
    let test = gnn::evaluate_split(&model, &inputs, Split::Test).map_err(stage("evaluate"))?;
    Ok((model, curve, val, test))
}

fn io_stage(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage: "write",
        message: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_stage(dir))?;
    }
    fs::write(path, contents).map_err(io_stage(path))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Full-precision heatmap: row = effect, column = cause, shortest
/// round-trip decimal per value.
pub fn heatmap_csv(te: &TeMatrix) -> String {
    let mut s = String::new();
    for i in 0..te.n() {
        let row: Vec<String> = te.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn splits_csv(ds: &LabeledDataset<SignalMatrix>) -> String {
    let mut s = String::from("sample_id,label,split\n");
    for x in &ds.samples {
        let split = x.split.map(gnn::split_name).unwrap_or("none");
        s.push_str(&format!("{},{},{split}\n", x.item.sample_id(), x.label));
    }
    s
}

fn run_stages(
    cfg: &PipelineConfig,
    prepared: &Prepared,
    opts: RunOptions,
    out: Option<&Path>,
) -> Result<RunReport> {
    let ids: Vec<String> = prepared.signals.samples.iter().map(|s| file_stem(s.item.sample_id())).collect();
    if let Some(dir) = out {
        write(&dir.join("config.toml"), cfg.to_toml())?;
        write(&dir.join("splits.csv"), splits_csv(&prepared.signals))?;
        for (id, te) in ids.iter().zip(&prepared.te) {
            write(&dir.join("te").join(format!("{id}.csv")), heatmap_csv(te))?;
        }
    }
    let pre = build_graphs(cfg, prepared, opts.variant)?;
    let rewired = !(opts.skip_rewire || opts.variant == Variant::NoCsdrf);
    let (post, logs) = if rewired {
        rewire_graphs(cfg, &pre)?
    } else {
        (pre.clone(), Vec::new())
    };
    if let Some(dir) = out {
        for (i, id) in ids.iter().enumerate() {
            let name = format!("{id}.json");
            let pre_json = pre.samples[i].item.to_json().map_err(stage("write"))?;
            write(&dir.join("graphs/pre").join(&name), pre_json)?;
            let post_json = post.samples[i].item.to_json().map_err(stage("write"))?;
            write(&dir.join("graphs/post").join(&name), post_json)?;
            if let Some(log) = logs.get(i) {
                write(&dir.join("rewiring").join(format!("{id}.jsonl")), log.to_jsonl())?;
            }
        }
    }
    let count = |ds: &LabeledDataset<CausalGraph>| ds.samples.iter().map(|s| s.item.edge_count()).sum();
    let mut report = RunReport {
        variant: opts.variant,
        seed: cfg.seed,
        c: cfg.graph.c,
        samples: prepared.signals.len(),
        train_samples: prepared.signals.count(Split::Train),
        val_samples: prepared.signals.count(Split::Val),
        test_samples: prepared.signals.count(Split::Test),
        edge_count: count(&pre),
        edge_count_post: count(&post),
        edges_added: logs.iter().map(|l| l.records.len()).sum(),
        edges_removed: logs.iter().flat_map(|l| &l.records).filter(|r| r.removed.is_some()).count(),
        rewired,
        pooled_width: None,
        best_epoch: None,
        epochs_run: None,
        val: None,
        test: None,
    };
    if !opts.skip_train {
        let (model, curve, val, test) = fit(cfg, &post, opts.variant)?;
        report.pooled_width = Some(model.pooled_width());
        report.best_epoch = Some(curve.best_epoch);
        report.epochs_run = Some(curve.epochs.len());
        report.val = Some(val);
        report.test = Some(test);
        if let Some(dir) = out {
            write(&dir.join("checkpoint.json"), model.to_json().map_err(stage("write"))?)?;
            write(&dir.join("training_curve.csv"), curve.to_csv())?;
        }
    }
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(stage("write"))?;
        write(&dir.join("metrics.json"), json + "\n")?;
    }
    Ok(report)
}

fn run_in(cfg: &PipelineConfig, prepared: &Prepared, opts: RunOptions, out: &Path) -> Result<RunReport> {
    let status = out.join("run.status");
    write(&status, "incomplete\n")?;
    match run_stages(cfg, prepared, opts, Some(out)) {
        Ok(r) => {
            write(&status, "complete\n")?;
            Ok(r)
        }
        Err(e) => {
            // best effort; the original error matters more
            let _ = fs::write(&status, format!("incomplete\n{e}\n"));
            Err(e)
        }
    }
}

/// Validates, then runs every stage, writing artifacts into `out` when given.
pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions, out: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let prepared = match out {
        Some(dir) => {
            write(&dir.join("run.status"), "incomplete\n")?;
            prepare(cfg).inspect_err(|e| {
                let _ = fs::write(dir.join("run.status"), format!("incomplete\n{e}\n"));
            })?
        }
        None => prepare(cfg)?,
    };
    match out {
        Some(dir) => run_in(cfg, &prepared, opts, dir),
        None => run_stages(cfg, &prepared, opts, None),
    }
}

pub fn cmd_run(cfg: &PipelineConfig, opts: RunOptions, out: &Path) -> Result<RunReport> {
    run_pipeline(cfg, opts, Some(out))
}

/// Runs the full pipeline and each requested variant on shared data, one
/// subdirectory per variant, plus `ablation.csv`.
pub fn cmd_ablate(cfg: &PipelineConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let mut all = vec![Variant::Full];
    all.extend(variants.iter().copied().filter(|&v| v != Variant::Full));
    let mut reports = Vec::with_capacity(all.len());
    for v in all {
        let opts = RunOptions {
            variant: v,
            ..RunOptions::default()
        };
        let r = match out {
            Some(dir) => run_in(cfg, &prepared, opts, &dir.join(v.name()))?,
            None => run_stages(cfg, &prepared, opts, None)?,
        };
        reports.push(r);
    }
    if let Some(dir) = out {
        write(&dir.join("ablation.csv"), ablation_csv(&reports))?;
    }
    Ok(reports)
}

fn metric_cell(x: Option<f64>) -> String {
    x.map(crate::fmt::sig12).unwrap_or_default()
}

pub fn ablation_csv(reports: &[RunReport]) -> String {
    let mut s = String::from("variant,f1,sensitivity,specificity,auc,pooled_width\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            metric_cell(r.test.map(|m| m.f1)),
            metric_cell(r.test.map(|m| m.sensitivity)),
            metric_cell(r.test.map(|m| m.specificity)),
            metric_cell(r.test.and_then(|m| m.auc)),
            r.pooled_width.map(|w| w.to_string()).unwrap_or_default()
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub edge_count: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the highest-F1 row, first on ties.
    pub best: usize,
}

impl SweepTable {
    /// CSV `c,edge_count,f1,best` with `best` = 1 on the argmax row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("c,edge_count,f1,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.c,
                r.edge_count,
                crate::fmt::sig12(r.f1),
                u8::from(i == self.best)
            ));
        }
        s
    }
}

pub fn validate_sweep(values: &[f64]) -> std::result::Result<(), ConfigError> {
    if values.is_empty() {
        return Err(ConfigError::EmptySweep);
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid("sweep.values", "thresholds must be positive"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("sweep.values", "thresholds must be strictly ascending"));
    }
    Ok(())
}

/// One full run per threshold on shared data and seed.
pub fn cmd_sweep_c(cfg: &PipelineConfig, values: &[f64], out: Option<&Path>) -> Result<SweepTable> {
    validate_sweep(values)?;
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let mut rows = Vec::with_capacity(values.len());
    for &c in values {
        let mut run_cfg = cfg.clone();
        run_cfg.graph.c = c;
        let opts = RunOptions::default();
        let r = match out {
            Some(dir) => run_in(&run_cfg, &prepared, opts, &dir.join(format!("c-{c}")))?,
            None => run_stages(&run_cfg, &prepared, opts, None)?,
        };
        rows.push(SweepRow {
            c,
            edge_count: r.edge_count,
            f1: r.test_f1().unwrap_or(0.0),
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.f1 > rows[b].f1 { i } else { b });
    let table = SweepTable { rows, best };
    if let Some(dir) = out {
        write(&dir.join("sweep_c.csv"), table.to_csv())?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    EdgesTopk,
    TeHeatmap,
    CurvatureReport,
    RewiringLog,
}

impl FromStr for ExportKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> std::result::Result<Self, ConfigError> {
        match s {
            "edges_topk" => Ok(ExportKind::EdgesTopk),
            "te_heatmap" => Ok(ExportKind::TeHeatmap),
            "curvature_report" => Ok(ExportKind::CurvatureReport),
            "rewiring_log" => Ok(ExportKind::RewiringLog),
            other => Err(invalid("what", format!("unknown export `{other}`"))),
        }
    }
}

/// Plot-ready CSV derived from a saved graph.
pub fn cmd_export(graph_path: &Path, what: ExportKind, fraction: f64) -> Result<String> {
    if !graph_path.exists() {
        return Err(ConfigError::MissingArtifact(graph_path.to_path_buf()).into());
    }
    if what == ExportKind::EdgesTopk && !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid("fraction", format!("{fraction} must lie in (0, 1]")).into());
    }
    let g = CausalGraph::load(graph_path).map_err(stage("export"))?;
    Ok(match what {
        ExportKind::EdgesTopk => edges_csv(&top_fraction_edges(&g, fraction).map_err(stage("export"))?),
        ExportKind::TeHeatmap => heatmap_csv(g.te()),
        ExportKind::CurvatureReport => curvature_report(&symmetrized_view(&g)).map_err(stage("export"))?.to_csv(),
        ExportKind::RewiringLog => records_csv(&g.provenance.rewiring_log),
    })
}

/// Writes the configured synthetic dataset as signal CSVs plus a manifest.
pub fn cmd_gen_data(cfg: &PipelineConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate_synth()?;
    let ds = generate_synthetic(&cfg.data.synth.spec(cfg.seed)).map_err(stage("data"))?;
    save_dataset(out, &ds, cfg.seed).map_err(stage("write"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.data.synth.n = 4;
        cfg.data.synth.t = 120;
        cfg.data.synth.samples = 20;
        cfg.model = ModelConfig {
            layer_sizes: vec![8, 4],
            heads_per_layer: 2,
            fc_hidden_1: 8,
            fc_hidden_2: 4,
            ..ModelConfig::default()
        };
        cfg.train.max_epochs = 3;
        cfg
    }

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
        for p in gnn::PRESETS {
            PipelineConfig::with_preset(p).unwrap().validate().unwrap();
        }
        assert_eq!(PipelineConfig::with_preset("acpi").unwrap().graph.c, 0.05);
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 7\n[graph]\nc = 0.2\n[model]\nlayer_sizes = [16, 8]\n[rewiring]\nc_plus = 1.0\nc_minus = 0.05\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.graph.c, 0.2);
        assert_eq!(cfg.graph.corr_c, 0.5);
        assert_eq!(cfg.model.layer_sizes, vec![16, 8]);
        assert_eq!(cfg.model.heads_per_layer, 4);
        assert_eq!(cfg.rewiring.c_plus, Some(1.0));
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn preset_then_file() {
        let cfg = PipelineConfig::from_toml_str("preset = \"cobre\"\n[model]\nfc_hidden_2 = 32\n", None).unwrap();
        assert_eq!(cfg.model.layer_sizes, vec![256, 128, 64, 32]);
        assert_eq!(cfg.model.heads_per_layer, 2);
        assert_eq!(cfg.model.fc_hidden_2, 32);
        assert!(matches!(
            PipelineConfig::from_toml_str("preset = \"x\"\n", None),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn unknown_keys_name_their_path() {
        for (text, key) in [
            ("colour = 1\n", "colour"),
            ("[graph]\nthreshold = 0.1\n", "graph.threshold"),
            ("[data.synth]\nnodes = 3\n", "data.synth.nodes"),
            ("[model]\nseed = 3\n", "model.seed"),
            ("[rewiring]\nseed = 3\n", "rewiring.seed"),
        ] {
            match PipelineConfig::from_toml_str(text, None) {
                Err(ConfigError::UnknownKey(k)) => assert_eq!(k, key),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn negative_threshold_names_graph_c() {
        let cfg = PipelineConfig::from_toml_str("[graph]\nc = -0.1\n", None).unwrap();
        match cfg.validate() {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "graph.c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_are_parse_errors() {
        assert!(matches!(
            PipelineConfig::from_toml_str("[graph]\nc = \"high\"\n", None),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn relative_manifest_resolves_against_config_dir() {
        let cfg = PipelineConfig::from_toml_str("[data]\nmanifest = \"d/manifest.json\"\n", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("/cfg/d/manifest.json")));
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingArtifact(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::with_preset("abide").unwrap();
        cfg.rewiring.max_iterations = Some(3);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn coupling_matrices() {
        let chain = Coupling::Chain.matrix(3, 0.8, 0.5);
        assert_eq!(chain, vec![vec![0.5, 0.0, 0.0], vec![0.8, 0.5, 0.0], vec![0.0, 0.8, 0.5]]);
        let hub = Coupling::Hub.matrix(3, 0.8, 0.5);
        assert_eq!(hub, vec![vec![0.5, 0.0, 0.0], vec![0.8, 0.5, 0.0], vec![0.8, 0.0, 0.5]]);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, STREAM_REWIRE, 0);
        assert_ne!(a, derive_seed(1, STREAM_REWIRE, 1));
        assert_ne!(a, derive_seed(1, STREAM_MODEL, 0));
        assert_ne!(a, derive_seed(2, STREAM_REWIRE, 0));
        assert_eq!(a, derive_seed(1, STREAM_REWIRE, 0));
    }

    #[test]
    fn variants_parse() {
        for v in ABLATIONS {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no_te".parse::<Variant>(), Err(ConfigError::UnknownVariant(_))));
    }

    #[test]
    fn sweep_values_validated() {
        assert!(matches!(validate_sweep(&[]), Err(ConfigError::EmptySweep)));
        assert!(validate_sweep(&[0.1, 0.1]).is_err());
        assert!(validate_sweep(&[0.0, 0.1]).is_err());
        assert!(validate_sweep(&DEFAULT_C_GRID).is_ok());
    }

    #[test]
    fn in_memory_run_reports_metrics() {
        let r = run_pipeline(&tiny(), RunOptions::default(), None).unwrap();
        assert_eq!(r.samples, 20);
        assert_eq!(r.train_samples + r.val_samples + r.test_samples, 20);
        assert!(r.test.is_some() && r.rewired);
        assert!(r.edge_count_post >= r.edge_count);
    }

    #[test]
    fn no_gconv_pools_raw_features() {
        let opts = RunOptions {
            variant: Variant::NoGconv,
            ..RunOptions::default()
        };
        let r = run_pipeline(&tiny(), opts, None).unwrap();
        assert_eq!(r.pooled_width, Some(16));
    }

    #[test]
    fn skip_train_leaves_metrics_empty() {
        let opts = RunOptions {
            skip_train: true,
            skip_rewire: true,
            ..RunOptions::default()
        };
        let r = run_pipeline(&tiny(), opts, None).unwrap();
        assert!(r.test.is_none() && !r.rewired);
        assert_eq!(r.edge_count, r.edge_count_post);
    }

    #[test]
    fn heatmap_is_exact() {
        let te = TeMatrix::from_rows(&[vec![0.0, 0.1 + 0.2], vec![1.0 / 3.0, 0.0]]).unwrap();
        let text = heatmap_csv(&te);
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(TeMatrix::from_rows(&rows).unwrap(), te);
    }
}
