//! Multichannel signal storage, CSV ingestion, synthetic VAR(1) datasets and
//! stratified train/val/test splitting.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Steps simulated and thrown away before a synthetic sample is recorded.
pub const BURN_IN: usize = 100;

/// Smallest number of timesteps a signal matrix may carry.
pub const MIN_TIMESTEPS: usize = 4;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal file not found: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row_index} has {found} fields, header has {expected}")]
    RaggedRows {
        row_index: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumericCell {
        row: usize,
        col: usize,
        value: String,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("too few timesteps: {0} (need at least {MIN_TIMESTEPS})")]
    TooFewTimesteps(usize),
    #[error("too few channels: {0} (need at least 2)")]
    TooFewChannels(usize),
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("coupling matrix for class {class} has spectral radius {radius:.6} >= 1")]
    UnstableCoupling { class: usize, radius: f64 },
    #[error("noise_std must be positive and finite, got {0}")]
    BadNoise(f64),
    #[error("dataset has {0} samples, splitting needs at least 10")]
    TooFewSamples(usize),
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

/// An `n x t` matrix of channel time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    channels: Vec<String>,
    values: Vec<f64>,
    t: usize,
    sample_id: String,
}

impl SignalMatrix {
    /// Builds a matrix from per-channel rows, checking shape and finiteness.
    pub fn new(
        channels: Vec<String>,
        rows: Vec<Vec<f64>>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        if channels.len() != rows.len() {
            return Err(SignalError::BadDims(format!(
                "{} channel names for {} rows",
                channels.len(),
                rows.len()
            )));
        }
        if rows.len() < 2 {
            return Err(SignalError::TooFewChannels(rows.len()));
        }
        let t = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * t);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(SignalError::RaggedRows {
                    row_index: r,
                    expected: t,
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(SignalError::NonFinite { row: r, col: c });
            }
            values.extend_from_slice(row);
        }
        if t < MIN_TIMESTEPS {
            return Err(SignalError::TooFewTimesteps(t));
        }
        Ok(Self {
            channels,
            values,
            t,
            sample_id: sample_id.into(),
        })
    }

    /// Same as [`SignalMatrix::new`] with channels named `ch0..`.
    pub fn from_rows(rows: Vec<Vec<f64>>, sample_id: impl Into<String>) -> Result<Self> {
        let channels = (0..rows.len()).map(|i| format!("ch{i}")).collect();
        Self::new(channels, rows, sample_id)
    }

    pub fn n(&self) -> usize {
        self.channels.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.t..(i + 1) * self.t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.t)
    }
}

/// Reads a signals CSV: header `channel,t0,...,t{T-1}`, one channel per row.
pub fn load_signals(path: &Path) -> Result<SignalMatrix> {
    if !path.exists() {
        return Err(SignalError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let width = reader.headers()?.len();
    let mut channels = Vec::new();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(SignalError::RaggedRows {
                row_index: r,
                expected: width,
                found: record.len(),
            });
        }
        channels.push(record.get(0).unwrap_or_default().to_string());
        let row = record
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .map_err(|_| SignalError::NonNumericCell {
                        row: r,
                        col: c,
                        value: cell.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let t = width.saturating_sub(1);
    if t < MIN_TIMESTEPS {
        return Err(SignalError::TooFewTimesteps(t));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SignalMatrix::new(channels, rows, id)
}

/// Writes `m` in the format read by [`load_signals`]. Values use the shortest
/// representation that round-trips exactly.
pub fn save_signals(path: &Path, m: &SignalMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["channel".to_string()];
    header.extend((0..m.t()).map(|k| format!("t{k}")));
    w.write_record(&header)?;
    for (name, row) in m.channels().iter().zip(m.rows()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled item of a dataset together with its split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<T> {
    pub item: T,
    pub label: u8,
    pub split: Option<Split>,
}

/// Binary-labeled samples with optional split tags. Generic over the payload so
/// the same container carries signals, graphs and model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T = SignalMatrix> {
    pub samples: Vec<Labeled<T>>,
}

impl<T> LabeledDataset<T> {
    pub fn new(samples: Vec<Labeled<T>>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label > 1) {
            return Err(SignalError::BadLabel(s.label));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples carrying the given tag, in dataset order.
    pub fn split(&self, tag: Split) -> impl Iterator<Item = &Labeled<T>> {
        self.samples.iter().filter(move |s| s.split == Some(tag))
    }

    pub fn count(&self, tag: Split) -> usize {
        self.split(tag).count()
    }

    /// Converts every payload, keeping labels and tags.
    pub fn try_map<U, E, F>(self, mut f: F) -> std::result::Result<LabeledDataset<U>, E>
    where
        F: FnMut(usize, T) -> std::result::Result<U, E>,
    {
        let samples = self
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Labeled {
                    item: f(i, s.item)?,
                    label: s.label,
                    split: s.split,
                })
            })
            .collect::<std::result::Result<Vec<_>, E>>()?;
        Ok(LabeledDataset { samples })
    }
}

/// Parameters of the planted-causality VAR(1) generator.
///
/// `couplings[c]` is the `n x n` transition matrix of class `c`; entry
/// `[i][j]` is the weight of channel `j` at step `τ` on channel `i` at `τ+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub t: usize,
    pub samples: usize,
    pub couplings: Vec<Vec<Vec<f64>>>,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let dm = DMatrix::from_fn(n, n, |i, j| m[i][j]);
    dm.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Generates `spec.samples` labeled series, labels alternating `0, 1, 0, ...`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    let SynthSpec { n, t, samples, .. } = *spec;
    if spec.couplings.len() != 2 {
        return Err(SignalError::BadDims(format!(
            "expected 2 class couplings, got {}",
            spec.couplings.len()
        )));
    }
    if n < 2 {
        return Err(SignalError::TooFewChannels(n));
    }
    if t < MIN_TIMESTEPS {
        return Err(SignalError::TooFewTimesteps(t));
    }
    if samples < 2 {
        return Err(SignalError::BadDims(format!(
            "need at least 2 samples, got {samples}"
        )));
    }
    if !(spec.noise_std > 0.0 && spec.noise_std.is_finite()) {
        return Err(SignalError::BadNoise(spec.noise_std));
    }
    for (class, c) in spec.couplings.iter().enumerate() {
        if c.len() != n || c.iter().any(|r| r.len() != n) {
            return Err(SignalError::BadDims(format!(
                "coupling of class {class} is not {n}x{n}"
            )));
        }
        let radius = spectral_radius(c);
        if radius >= 1.0 {
            return Err(SignalError::UnstableCoupling { class, radius });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|_| SignalError::BadNoise(spec.noise_std))?;
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let label = (s % 2) as u8;
        let c = &spec.couplings[label as usize];
        let mut state = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut rows = vec![Vec::with_capacity(t); n];
        for step in 0..BURN_IN + t {
            for (i, slot) in next.iter_mut().enumerate() {
                let drift: f64 = c[i].iter().zip(&state).map(|(w, v)| w * v).sum();
                *slot = drift + noise.sample(&mut rng);
            }
            std::mem::swap(&mut state, &mut next);
            if step >= BURN_IN {
                for (row, v) in rows.iter_mut().zip(&state) {
                    row.push(*v);
                }
            }
        }
        out.push(Labeled {
            item: SignalMatrix::from_rows(rows, format!("synth-{s:04}"))?,
            label,
            split: None,
        });
    }
    LabeledDataset::new(out)
}

/// Tags every sample train/val/test: 20% of each class goes to test, then 15%
/// of the remainder to validation. Deterministic given `seed`.
pub fn split_dataset<T>(mut ds: LabeledDataset<T>, seed: u64) -> Result<LabeledDataset<T>> {
    if ds.len() < 10 {
        return Err(SignalError::TooFewSamples(ds.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = [Vec::new(), Vec::new()];
    for (i, s) in ds.samples.iter().enumerate() {
        classes[s.label as usize].push(i);
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(SignalError::SingleClassDataset);
    }
    for idx in classes.iter_mut() {
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_test = (0.2 * m as f64).round() as usize;
        let n_val = (0.15 * (m - n_test) as f64).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            ds.samples[i].split = Some(if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub signals_path: String,
    pub label: u8,
}

/// Dataset manifest: signal files (relative to the manifest) with labels and
/// the seed used for splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(SignalError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SignalError::Manifest(e.to_string()))
}

/// Loads every signal file listed in the manifest. Returns the dataset and the
/// manifest seed.
pub fn load_manifest(path: &Path) -> Result<(LabeledDataset, u64)> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            Ok(Labeled {
                item: load_signals(&base.join(&e.signals_path))?,
                label: e.label,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((LabeledDataset::new(samples)?, manifest.seed))
}

/// Writes each sample to `dir/signals/<id>.csv` plus `dir/manifest.json`.
pub fn save_dataset(dir: &Path, ds: &LabeledDataset, seed: u64) -> Result<PathBuf> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SignalError::Io { path, source }
    };
    let sig_dir = dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(io_err(&sig_dir))?;
    let mut entries = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let rel = format!("signals/{}.csv", s.item.sample_id());
        save_signals(&dir.join(&rel), &s.item)?;
        entries.push(ManifestEntry {
            signals_path: rel,
            label: s.label,
        });
    }
    let manifest = Manifest {
        seed,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SignalError::Manifest(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}
