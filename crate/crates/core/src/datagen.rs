//! Seeded synthetic data: spiked activation traces with spectral drift, and a
//! linearly embedded Gaussian-mixture classification set.
//!
//! Everything is a pure function of the seed. Per-trace seeds in a corpus are
//! the successive `next_u64` outputs of a [`Rng64`] seeded with the master
//! seed; trace `i` takes the `i`-th output and traces alternate
//! negative/positive class starting with the negative class.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::monitor::{ActivationTrace, Label};
use crate::rmt::{draw_spiked_row, random_orthonormal, SpikeSpec};
use crate::rng::Rng64;

pub const DEFAULT_SPIKE_STRENGTHS: [f64; 5] = [30.0, 20.0, 15.0, 10.0, 8.0];
pub const DEFAULT_OOD_SIGMA_SQ: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    StayStructured,
    DecayToNoise,
    StayNoise,
}

impl DriftMode {
    fn label(self) -> Label {
        match self {
            DriftMode::StayStructured => Label::Factual,
            DriftMode::DecayToNoise | DriftMode::StayNoise => Label::Hallucinated,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DriftMode::StayStructured => "stay_structured",
            DriftMode::DecayToNoise => "decay_to_noise",
            DriftMode::StayNoise => "stay_noise",
        }
    }
}

/// Parameters of one synthetic activation trace.
///
/// When `directions` is `None` each trace draws its own orthonormal spike
/// directions from its seed, so structured traces do not share a subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenConfig {
    pub dim: usize,
    pub length: usize,
    pub sigma_sq: f64,
    pub strengths: Vec<f64>,
    pub directions: Option<Vec<Vec<f64>>>,
    pub drift_mode: DriftMode,
    pub decay_rate: f64,
    pub seed: u64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            length: 120,
            sigma_sq: 1.0,
            strengths: DEFAULT_SPIKE_STRENGTHS.to_vec(),
            directions: None,
            drift_mode: DriftMode::StayStructured,
            decay_rate: 0.03,
            seed: 0,
        }
    }
}

impl TraceGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.length == 0 {
            return Err(Error::Config("dim and length must be positive".into()));
        }
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return Err(Error::Config(format!("sigma_sq must be positive, got {}", self.sigma_sq)));
        }
        if self.strengths.len() > self.dim {
            return Err(Error::Config(format!(
                "{} spikes do not fit in dimension {}",
                self.strengths.len(),
                self.dim
            )));
        }
        if self.strengths.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Config("spike strengths must be finite and nonnegative".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay_rate must lie in (0,1], got {}", self.decay_rate)));
        }
        if let Some(dirs) = &self.directions {
            if dirs.len() != self.strengths.len() {
                return Err(Error::Config("one direction per spike strength required".into()));
            }
            let spikes = self.spike_specs(dirs.clone());
            crate::rmt::validate_spikes(&spikes, self.dim).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn spike_specs(&self, directions: Vec<Vec<f64>>) -> Vec<SpikeSpec> {
        self.strengths
            .iter()
            .zip(directions)
            .map(|(&strength, direction)| SpikeSpec { strength, direction })
            .collect()
    }

    /// Spike strengths in effect at token `t`.
    pub fn strengths_at(&self, t: usize) -> Vec<f64> {
        match self.drift_mode {
            DriftMode::StayStructured => self.strengths.clone(),
            DriftMode::StayNoise => vec![0.0; self.strengths.len()],
            DriftMode::DecayToNoise => {
                let f = (1.0 - self.decay_rate).powi(t as i32);
                self.strengths.iter().map(|s| s * f).collect()
            }
        }
    }
}

/// Draws one trace. Token `t` comes from `σ²I + Σ θᵢ(t) uᵢuᵢᵀ`.
pub fn gen_trace(config: &TraceGenConfig) -> Result<ActivationTrace> {
    config.validate()?;
    let mut rng = Rng64::new(config.seed);
    let directions = match &config.directions {
        Some(d) => d.clone(),
        None => random_orthonormal(config.dim, config.strengths.len(), &mut rng),
    };
    let spikes = config.spike_specs(directions);
    let sigma = config.sigma_sq.sqrt();
    let mut tokens = Vec::with_capacity(config.length);
    for t in 0..config.length {
        let mut row = vec![0.0; config.dim];
        draw_spiked_row(&mut row, sigma, &spikes, &config.strengths_at(t), &mut rng);
        tokens.push(row);
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), "synthetic".to_string());
    meta.insert("drift_mode".to_string(), config.drift_mode.as_str().to_string());
    meta.insert("seed".to_string(), config.seed.to_string());
    Ok(ActivationTrace {
        trace_id: format!("trace-{}", config.seed),
        label: config.drift_mode.label(),
        dim: config.dim,
        tokens,
        meta,
    })
}

/// Which contrast a corpus realizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusFamily {
    /// factual (stay_structured) vs hallucinated (decay_to_noise).
    #[default]
    Hallucination,
    /// in_distribution (stay_structured) vs out_of_distribution (stay_noise at `sigma_sq`).
    Ood { sigma_sq: f64 },
}


/// Data split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Stratified 70/15/15 assignment. Within each class the members are
/// shuffled, then the first `round(0.7 n)` go to train and the next
/// `round(0.15 n)` to val.
pub fn stratified_split(labels: &[usize], rng: &mut Rng64) -> Vec<Split> {
    let mut out = vec![Split::Test; labels.len()];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let n_train = (0.7 * n).round() as usize;
        let n_val = ((0.15 * n).round() as usize).min(members.len() - n_train);
        for (j, &i) in members.iter().enumerate() {
            out[i] = if j < n_train {
                Split::Train
            } else if j < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Split tag stored in a trace's metadata, if any.
pub fn trace_split(trace: &ActivationTrace) -> Option<Split> {
    trace.meta.get("split").and_then(|s| Split::parse(s).ok())
}

/// Corpus settings as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_per_class: usize,
    pub family: CorpusFamily,
    pub template: TraceGenConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            family: CorpusFamily::Hallucination,
            template: TraceGenConfig::default(),
        }
    }
}

/// Balanced corpus of `2 · n_per_class` traces with stratified split tags
/// in `meta["split"]`. The template's drift mode and seed are overridden.
pub fn gen_trace_corpus(
    n_per_class: usize,
    template: &TraceGenConfig,
    family: CorpusFamily,
    seed: u64,
) -> Result<Vec<ActivationTrace>> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    template.validate()?;
    if let CorpusFamily::Ood { sigma_sq } = family {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::Config(format!("OOD sigma_sq must be positive, got {sigma_sq}")));
        }
    }
    let mut seeds = Rng64::new(seed);
    let trace_seeds: Vec<u64> = (0..2 * n_per_class).map(|_| seeds.next_u64()).collect();
    let classes: Vec<usize> = (0..2 * n_per_class).map(|i| i % 2).collect();
    let splits = stratified_split(&classes, &mut seeds);

    let mut traces = Vec::with_capacity(classes.len());
    for (i, (&s, &class)) in trace_seeds.iter().zip(&classes).enumerate() {
        let mut cfg = template.clone();
        cfg.seed = s;
        let label = match (family, class) {
            (CorpusFamily::Hallucination, 0) => {
                cfg.drift_mode = DriftMode::StayStructured;
                Label::Factual
            }
            (CorpusFamily::Hallucination, _) => {
                cfg.drift_mode = DriftMode::DecayToNoise;
                Label::Hallucinated
            }
            (CorpusFamily::Ood { .. }, 0) => {
                cfg.drift_mode = DriftMode::StayStructured;
                Label::InDistribution
            }
            (CorpusFamily::Ood { sigma_sq }, _) => {
                cfg.drift_mode = DriftMode::StayNoise;
                cfg.sigma_sq = sigma_sq;
                Label::OutOfDistribution
            }
        };
        let mut trace = gen_trace(&cfg)?;
        trace.trace_id = format!("trace-{i:05}");
        trace.label = label;
        trace.meta.insert("split".to_string(), splits[i].as_str().to_string());
        traces.push(trace);
    }
    Ok(traces)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureDatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub center_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for MixtureDatasetConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 16,
            samples_per_class: 500,
            center_scale: 2.0,
            noise_std: 0.3,
            seed: 0,
            embed_dim: 64,
        }
    }
}

impl MixtureDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes required".into()));
        }
        if self.dim == 0 || self.embed_dim < self.dim {
            return Err(Error::Config(format!(
                "need 0 < dim <= embed_dim, got dim {} embed_dim {}",
                self.dim, self.embed_dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.center_scale > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("center_scale must be positive and noise_std nonnegative".into()));
        }
        Ok(())
    }
}

/// Labeled inputs with split tags, row `i` ↔ `labels[i]` ↔ `split[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub classes: usize,
}

impl MixtureDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows and labels of one split, in dataset order.
    pub fn subset(&self, split: Split) -> (Matrix, Vec<usize>) {
        self.gather(&self.indices(split))
    }

    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let mut m = Matrix::zeros(idx.len(), self.inputs.cols);
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.inputs.row(i));
        }
        (m, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.inputs.cols).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header).map_err(csv_error)?;
        for i in 0..self.labels.len() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.split[i].as_str().to_string());
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r.headers().map_err(csv_error)?.len();
        if width < 3 {
            return Err(Error::Parse {
                line: 1,
                message: "expected feature columns followed by label,split".into(),
            });
        }
        let cols = width - 2;
        let (mut data, mut labels, mut split) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let bad = |message: String| Error::Parse { line, message };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            for j in 0..cols {
                let v: f64 = rec[j].parse().map_err(|_| bad(format!("bad value in column {j}")))?;
                data.push(v);
            }
            labels.push(rec[cols].parse::<usize>().map_err(|_| bad("bad label".into()))?);
            split.push(Split::parse(&rec[cols + 1]).map_err(|e| bad(e.to_string()))?);
        }
        let rows = labels.len();
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        Ok(Self {
            inputs: Matrix::from_vec(rows, cols, data)?,
            labels,
            split,
            classes,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Class centers on a sphere, isotropic noise, then a fixed map with
/// orthonormal columns into `embed_dim`. Draw order: centers, embedding,
/// samples (class-major), split.
pub fn gen_mixture_dataset(config: &MixtureDatasetConfig) -> Result<MixtureDataset> {
    config.validate()?;
    let mut rng = Rng64::new(config.seed);
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let v: Vec<f64> = (0..config.dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x * config.center_scale / norm).collect()
        })
        .collect();
    // Columns of the embedding, each of length embed_dim.
    let embed = random_orthonormal(config.embed_dim, config.dim, &mut rng);

    let n = config.classes * config.samples_per_class;
    let mut inputs = Matrix::zeros(n, config.embed_dim);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; config.dim];
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..config.samples_per_class {
            for (zj, mu) in z.iter_mut().zip(center) {
                *zj = mu + config.noise_std * rng.normal();
            }
            let row = inputs.row_mut(labels.len());
            for (col, zj) in embed.iter().zip(&z) {
                for (x, e) in row.iter_mut().zip(col) {
                    *x += zj * e;
                }
            }
            labels.push(c);
        }
    }
    let split = stratified_split(&labels, &mut rng);
    Ok(MixtureDataset {
        inputs,
        labels,
        split,
        classes: config.classes,
    })
}
