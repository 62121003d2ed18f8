//! Streaming spectral monitor.
//!
//! A [`Monitor`] keeps the last `N` activation vectors of one stream in a ring
//! buffer. Once the buffer is full it fits (or receives) a Marchenko–Pastur
//! baseline, freezes it, and emits one [`SpectralDescriptor`] per pushed
//! token. Work per token depends only on `(N, d)`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::{trace_split, Split};
use crate::error::{Error, Result};
use crate::features::{
    build_descriptor, FeatureConfig, MpReference, SpectralDescriptor, DESCRIPTOR_DIM,
    FEATURE_NAMES,
};
use crate::linalg::{window_spectrum, Matrix, Window};
use crate::rmt::{fit_mp_sigma, MpModel, DEFAULT_FIT_QUANTILE};

pub const DEFAULT_WINDOW_LEN: usize = 30;
pub const MIN_WINDOW_LEN: usize = 4;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Factual,
    Hallucinated,
    InDistribution,
    OutOfDistribution,
    Unlabeled,
}

impl Label {
    /// Binary risk target: hallucinated / out-of-distribution are positive.
    pub fn risk(self) -> Option<bool> {
        match self {
            Label::Factual | Label::InDistribution => Some(false),
            Label::Hallucinated | Label::OutOfDistribution => Some(true),
            Label::Unlabeled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Factual => "factual",
            Label::Hallucinated => "hallucinated",
            Label::InDistribution => "in_distribution",
            Label::OutOfDistribution => "out_of_distribution",
            Label::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown label {s:?}")))
    }
}

/// One monitored stream: a labeled sequence of per-token activation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub trace_id: String,
    pub label: Label,
    pub dim: usize,
    pub tokens: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ActivationTrace {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.tokens.iter().position(|t| t.len() != self.dim) {
            return Err(Error::Contract(format!(
                "trace {}: token {i} has dimension {}, expected {}",
                self.trace_id,
                self.tokens[i].len(),
                self.dim
            )));
        }
        if self.tokens.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "trace {}: non-finite activation",
                self.trace_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads the JSON Lines trace format, one trace object per line.
pub fn read_traces_jsonl<R: BufRead>(reader: R) -> Result<Vec<ActivationTrace>> {
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ActivationTrace = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        trace.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

pub fn write_traces_jsonl<W: Write>(mut writer: W, traces: &[ActivationTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// How the frozen MP baseline of a stream is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Fit on the first full window with the given quantile, then freeze.
    FirstWindow { quantile: f64 },
    /// Use a caller-provided model (known noise floor).
    External { model: MpModel },
}

impl Default for BaselinePolicy {
    fn default() -> Self {
        BaselinePolicy::FirstWindow {
            quantile: DEFAULT_FIT_QUANTILE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub window_len: usize,
    pub features: FeatureConfig,
    pub baseline: BaselinePolicy,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            features: FeatureConfig::default(),
            baseline: BaselinePolicy::default(),
        }
    }
}

/// Sliding-window state of one stream. Single writer.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    buffer: VecDeque<Vec<f64>>,
    dim: Option<usize>,
    baseline: Option<MpReference>,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Result<Self> {
        if config.window_len < MIN_WINDOW_LEN {
            return Err(Error::Config(format!(
                "window_len must be at least {MIN_WINDOW_LEN}, got {}",
                config.window_len
            )));
        }
        let baseline = match config.baseline {
            BaselinePolicy::External { model } => Some(MpReference::new(model)),
            BaselinePolicy::FirstWindow { quantile } => {
                if !(quantile > 0.0 && quantile < 1.0) {
                    return Err(Error::Config(format!("baseline quantile {quantile} not in (0,1)")));
                }
                None
            }
        };
        Ok(Self {
            config,
            buffer: VecDeque::with_capacity(config.window_len),
            dim: None,
            baseline,
        })
    }

    pub fn capacity(&self) -> usize {
        self.config.window_len
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn baseline(&self) -> Option<&MpModel> {
        self.baseline.as_ref().map(|r| &r.model)
    }

    /// Advances the window by one token; returns a descriptor once full.
    pub fn push_token(&mut self, activation: &[f64]) -> Result<Option<SpectralDescriptor>> {
        match self.dim {
            Some(d) if d != activation.len() => {
                return Err(Error::Contract(format!(
                    "activation has dimension {}, stream has {d}",
                    activation.len()
                )));
            }
            None => self.dim = Some(activation.len()),
            _ => {}
        }
        if self.buffer.len() == self.config.window_len {
            // Reuse the evicted allocation for the incoming token.
            let mut slot = self.buffer.pop_front().expect("full buffer");
            slot.copy_from_slice(activation);
            self.buffer.push_back(slot);
        } else {
            self.buffer.push_back(activation.to_vec());
        }
        if self.buffer.len() < self.config.window_len {
            return Ok(None);
        }
        let window = self.window()?;
        if self.baseline.is_none() {
            self.baseline = Some(self.fit_baseline(&window)?);
        }
        let baseline = self.baseline.as_ref().expect("baseline fitted");
        build_descriptor(&window, baseline, &self.config.features).map(Some)
    }

    fn window(&self) -> Result<Window> {
        let dim = self.dim.expect("dimension known after first push");
        let mut m = Matrix::zeros(self.buffer.len(), dim);
        for (r, token) in self.buffer.iter().enumerate() {
            m.row_mut(r).copy_from_slice(token);
        }
        Window::new(m)
    }

    fn fit_baseline(&self, window: &Window) -> Result<MpReference> {
        let quantile = match self.config.baseline {
            BaselinePolicy::FirstWindow { quantile } => quantile,
            BaselinePolicy::External { model } => return Ok(MpReference::new(model)),
        };
        let spectrum = window_spectrum(window, self.config.features.centered, false)?;
        let model = fit_mp_sigma(&spectrum.eigenvalues, spectrum.aspect, quantile)?;
        Ok(MpReference::new(model))
    }
}

/// Per-feature z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; DESCRIPTOR_DIM],
    pub std: [f64; DESCRIPTOR_DIM],
}

impl Standardization {
    /// Statistics over every step of every series (std floored at 1e-8).
    pub fn fit<'a, I>(series: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DescriptorSeries>,
    {
        let mut count = 0usize;
        let mut mean = [0.0; DESCRIPTOR_DIM];
        let mut m2 = [0.0; DESCRIPTOR_DIM];
        // Welford's update keeps the variance stable for large top_eigenvalue.
        for s in series {
            for step in &s.steps {
                count += 1;
                let v = step.to_vector();
                for j in 0..DESCRIPTOR_DIM {
                    let delta = v[j] - mean[j];
                    mean[j] += delta / count as f64;
                    m2[j] += delta * (v[j] - mean[j]);
                }
            }
        }
        if count == 0 {
            return Err(Error::Degenerate("no descriptor steps to standardize".into()));
        }
        let std = m2.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &[f64; DESCRIPTOR_DIM]) -> [f64; DESCRIPTOR_DIM] {
        std::array::from_fn(|j| (v[j] - self.mean[j]) / self.std[j])
    }
}

/// Descriptor time series of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSeries {
    pub trace_id: String,
    pub label: Label,
    pub window_len: usize,
    pub steps: Vec<SpectralDescriptor>,
    /// Statistics applied by [`DescriptorSeries::model_inputs`], if any.
    pub standardization: Option<Standardization>,
    /// Frozen baseline used for the divergence features.
    pub baseline: Option<MpModel>,
    /// Split tag carried over from the trace metadata.
    #[serde(default)]
    pub split: Option<Split>,
}

impl DescriptorSeries {
    pub fn raw_rows(&self) -> Vec<[f64; DESCRIPTOR_DIM]> {
        self.steps.iter().map(SpectralDescriptor::to_vector).collect()
    }

    /// Rows fed to a recurrent head: z-scored when statistics are attached.
    pub fn model_inputs(&self) -> Vec<[f64; DESCRIPTOR_DIM]> {
        match &self.standardization {
            Some(s) => self.steps.iter().map(|d| s.apply(&d.to_vector())).collect(),
            None => self.raw_rows(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Streams a whole trace through a fresh monitor.
pub fn run_trace(
    trace: &ActivationTrace,
    config: &MonitorConfig,
    standardization: Option<&Standardization>,
) -> Result<DescriptorSeries> {
    trace.validate()?;
    if trace.len() < config.window_len {
        return Err(Error::Degenerate(format!(
            "trace {} has {} tokens; at least {} required for window length {}",
            trace.trace_id,
            trace.len(),
            config.window_len,
            config.window_len
        )));
    }
    let mut monitor = Monitor::new(*config)?;
    let mut steps = Vec::with_capacity(trace.len() + 1 - config.window_len);
    for token in &trace.tokens {
        if let Some(d) = monitor.push_token(token)? {
            steps.push(d);
        }
    }
    Ok(DescriptorSeries {
        trace_id: trace.trace_id.clone(),
        label: trace.label,
        window_len: config.window_len,
        steps,
        standardization: standardization.cloned(),
        baseline: monitor.baseline().copied(),
        split: trace_split(trace),
    })
}

/// Keeps the descriptors whose windows end within the first `max_tokens`.
pub fn truncate_series(series: &DescriptorSeries, max_tokens: usize) -> Result<DescriptorSeries> {
    if max_tokens < series.window_len {
        return Err(Error::Config(format!(
            "token budget {max_tokens} is shorter than the window length {}",
            series.window_len
        )));
    }
    let keep = (max_tokens + 1 - series.window_len).min(series.steps.len());
    let mut out = series.clone();
    out.steps.truncate(keep);
    Ok(out)
}

/// CSV header of the descriptor export.
pub fn descriptor_csv_header() -> Vec<&'static str> {
    let mut h = vec!["trace_id", "step", "label"];
    h.extend_from_slice(&FEATURE_NAMES);
    h
}

/// Writes raw descriptors, one row per (trace, step).
pub fn write_descriptor_csv<W: Write>(writer: W, series: &[DescriptorSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(descriptor_csv_header()).map_err(csv_err)?;
    for s in series {
        for (i, d) in s.steps.iter().enumerate() {
            let mut rec = vec![s.trace_id.clone(), i.to_string(), s.label.as_str().to_string()];
            rec.extend(d.to_vector().iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a descriptor CSV back into per-trace series (in first-seen order).
pub fn read_descriptor_csv<R: std::io::Read>(reader: R, window_len: usize) -> Result<Vec<DescriptorSeries>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != descriptor_csv_header() {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected descriptor CSV header".into(),
        });
    }
    let mut out: Vec<DescriptorSeries> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let bad = |m: String| Error::Parse { line, message: m };
        let id = rec.get(0).ok_or_else(|| bad("missing trace_id".into()))?.to_string();
        let label = Label::parse(rec.get(2).unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; DESCRIPTOR_DIM];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = rec
                .get(3 + j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad value in column {}", FEATURE_NAMES[j])))?;
        }
        let k = *index.entry(id.clone()).or_insert_with(|| {
            out.push(DescriptorSeries {
                trace_id: id,
                label,
                window_len,
                steps: Vec::new(),
                standardization: None,
                baseline: None,
                split: None,
            });
            out.len() - 1
        });
        out[k].steps.push(SpectralDescriptor::from_vector(&v));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}
