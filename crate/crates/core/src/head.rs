//! Recurrent risk heads (tanh RNN, GRU, LSTM) over descriptor series.
//!
//! Parameters are one flat vector. For each gate, in the cell's gate order,
//! the block is `W` (hidden × input, row-major), `U` (hidden × hidden,
//! row-major), `b` (hidden). The readout `w` (hidden) and scalar bias follow
//! the last gate block.
//!
//! Gate orders: rnn `[h]`; gru `[z, r, n]` with `n = tanh(Wₙx + Uₙ(r⊙h) + bₙ)`
//! and `h' = (1−z)⊙n + z⊙h`; lstm `[i, f, g, o]`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_trace_corpus, trace_split, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::features::{SpectralDescriptor, DESCRIPTOR_DIM};
use crate::monitor::{run_trace, truncate_series, DescriptorSeries, Monitor, MonitorConfig, Standardization};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::rng::Rng64;

pub const DEFAULT_HIDDEN_DIM: usize = 16;
/// Parameter budget of a "lightweight" head.
pub const MAX_HEAD_PARAMS: usize = 10_000;
const LSTM_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Rnn, CellKind::Gru, CellKind::Lstm];

    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn gate_order(self) -> &'static [&'static str] {
        match self {
            CellKind::Rnn => &["h"],
            CellKind::Gru => &["z", "r", "n"],
            CellKind::Lstm => &["i", "f", "g", "o"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::Config(format!("unknown cell kind {s:?} (rnn|gru|lstm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentHeadParams {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: Vec<f64>,
    pub standardization: Option<Standardization>,
}

impl RecurrentHeadParams {
    pub fn param_count(cell: CellKind, input_dim: usize, hidden_dim: usize) -> usize {
        let (i, h) = (input_dim, hidden_dim);
        cell.gates() * (h * i + h * h + h) + h + 1
    }

    pub fn zeros(cell: CellKind, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("input and hidden dimensions must be positive".into()));
        }
        let n = Self::param_count(cell, input_dim, hidden_dim);
        if n > MAX_HEAD_PARAMS {
            return Err(Error::Config(format!(
                "{} head with hidden {hidden_dim} has {n} parameters (limit {MAX_HEAD_PARAMS})",
                cell.as_str()
            )));
        }
        Ok(Self {
            cell,
            input_dim,
            hidden_dim,
            weights: vec![0.0; n],
            standardization: None,
        })
    }

    /// Uniform(±1/√hidden) weights, zero biases, LSTM forget bias 1.
    pub fn init(cell: CellKind, input_dim: usize, hidden_dim: usize, rng: &mut Rng64) -> Result<Self> {
        let mut p = Self::zeros(cell, input_dim, hidden_dim)?;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let (i, h) = (input_dim, hidden_dim);
        for g in 0..cell.gates() {
            let base = p.gate_base(g);
            for w in &mut p.weights[base..base + h * i + h * h] {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        if cell == CellKind::Lstm {
            let b = p.gate_base(1) + h * i + h * h;
            p.weights[b..b + h].fill(LSTM_FORGET_BIAS);
        }
        let r = p.readout_base();
        for w in &mut p.weights[r..r + h] {
            *w = rng.uniform_range(-bound, bound);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn gate_base(&self, g: usize) -> usize {
        let (i, h) = (self.input_dim, self.hidden_dim);
        g * (h * i + h * h + h)
    }

    fn readout_base(&self) -> usize {
        self.gate_base(self.cell.gates())
    }

    pub fn readout_bias(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }

    pub fn set_readout_bias(&mut self, b: f64) {
        let n = self.weights.len();
        self.weights[n - 1] = b;
    }

    pub fn validate(&self) -> Result<()> {
        let n = Self::param_count(self.cell, self.input_dim, self.hidden_dim);
        if self.weights.len() != n {
            return Err(Error::Contract(format!(
                "{} head ({}, {}) needs {n} weights, found {}",
                self.cell.as_str(),
                self.input_dim,
                self.hidden_dim,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite head weight".into()));
        }
        Ok(())
    }

    /// Rows fed to the cell. Statistics stored with the head take precedence
    /// over statistics attached to the series.
    pub fn series_inputs(&self, series: &DescriptorSeries) -> Result<Vec<Vec<f64>>> {
        if self.input_dim != DESCRIPTOR_DIM {
            return Err(Error::Contract(format!(
                "head expects width {}, descriptor series have width {DESCRIPTOR_DIM}",
                self.input_dim
            )));
        }
        let rows = match &self.standardization {
            Some(st) => series.steps.iter().map(|d| st.apply(&d.to_vector())).collect(),
            None => series.model_inputs(),
        };
        Ok(rows.into_iter().map(|r| r.to_vec()).collect())
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `softplus(a) − y·a`, the BCE of `sigmoid(a)` against `y`.
fn bce_logit(a: f64, y: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p() - y * a
}

/// `out = W_g x + U_g hr + b_g`.
fn gate_affine(p: &RecurrentHeadParams, g: usize, x: &[f64], hr: &[f64], out: &mut [f64]) {
    let (ni, nh) = (p.input_dim, p.hidden_dim);
    let base = p.gate_base(g);
    let w = &p.weights[base..base + nh * ni];
    let u = &p.weights[base + nh * ni..base + nh * ni + nh * nh];
    let b = &p.weights[base + nh * ni + nh * nh..base + nh * ni + nh * nh + nh];
    for j in 0..nh {
        let mut s = b[j];
        for (wk, xk) in w[j * ni..(j + 1) * ni].iter().zip(x) {
            s += wk * xk;
        }
        for (uk, hk) in u[j * nh..(j + 1) * nh].iter().zip(hr) {
            s += uk * hk;
        }
        out[j] = s;
    }
}

/// Forward record of one time step.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gate values, gate-major.
    gates: Vec<f64>,
    /// GRU only: r ⊙ h_prev.
    rh: Vec<f64>,
    h: Vec<f64>,
    /// LSTM only: tanh(c).
    tanh_c: Vec<f64>,
    c: Vec<f64>,
    logit: f64,
}

fn cell_step(p: &RecurrentHeadParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let nh = p.hidden_dim;
    let mut gates = vec![0.0; p.cell.gates() * nh];
    let mut rh = Vec::new();
    let mut c = Vec::new();
    let mut tanh_c = Vec::new();
    let mut h = vec![0.0; nh];
    match p.cell {
        CellKind::Rnn => {
            gate_affine(p, 0, x, h_prev, &mut gates);
            gates.iter_mut().for_each(|a| *a = a.tanh());
            h.copy_from_slice(&gates);
        }
        CellKind::Gru => {
            let (zr, n) = gates.split_at_mut(2 * nh);
            gate_affine(p, 0, x, h_prev, &mut zr[..nh]);
            gate_affine(p, 1, x, h_prev, &mut zr[nh..]);
            zr.iter_mut().for_each(|a| *a = sigmoid(*a));
            rh = zr[nh..].iter().zip(h_prev).map(|(r, h)| r * h).collect();
            gate_affine(p, 2, x, &rh, n);
            n.iter_mut().for_each(|a| *a = a.tanh());
            for j in 0..nh {
                let z = zr[j];
                h[j] = (1.0 - z) * n[j] + z * h_prev[j];
            }
        }
        CellKind::Lstm => {
            for g in 0..4 {
                gate_affine(p, g, x, h_prev, &mut gates[g * nh..(g + 1) * nh]);
            }
            for (g, chunk) in gates.chunks_mut(nh).enumerate() {
                if g == 2 {
                    chunk.iter_mut().for_each(|a| *a = a.tanh());
                } else {
                    chunk.iter_mut().for_each(|a| *a = sigmoid(*a));
                }
            }
            c = vec![0.0; nh];
            tanh_c = vec![0.0; nh];
            for j in 0..nh {
                let (i, f, g, o) = (gates[j], gates[nh + j], gates[2 * nh + j], gates[3 * nh + j]);
                c[j] = f * c_prev[j] + i * g;
                tanh_c[j] = c[j].tanh();
                h[j] = o * tanh_c[j];
            }
        }
    }
    let r = p.readout_base();
    let logit = p.weights[r + nh] + p.weights[r..r + nh].iter().zip(&h).map(|(w, h)| w * h).sum::<f64>();
    StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        rh,
        h,
        tanh_c,
        c,
        logit,
    }
}

fn forward_cached(p: &RecurrentHeadParams, inputs: &[Vec<f64>]) -> Vec<StepCache> {
    let nh = p.hidden_dim;
    let mut h = vec![0.0; nh];
    let mut c = if p.cell == CellKind::Lstm { vec![0.0; nh] } else { Vec::new() };
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let s = cell_step(p, x, &h, &c);
        h.clone_from(&s.h);
        c.clone_from(&s.c);
        out.push(s);
    }
    out
}

fn check_width(p: &RecurrentHeadParams, inputs: &[Vec<f64>]) -> Result<()> {
    if let Some(x) = inputs.iter().find(|x| x.len() != p.input_dim) {
        return Err(Error::Contract(format!(
            "input width {} does not match head input_dim {}",
            x.len(),
            p.input_dim
        )));
    }
    Ok(())
}

/// Per-step risk scores for raw input rows.
pub fn forward_inputs(p: &RecurrentHeadParams, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    p.validate()?;
    check_width(p, inputs)?;
    Ok(forward_cached(p, inputs).iter().map(|s| sigmoid(s.logit)).collect())
}

/// Per-step risk scores of a descriptor series.
pub fn head_forward(p: &RecurrentHeadParams, series: &DescriptorSeries) -> Result<Vec<f64>> {
    forward_inputs(p, &p.series_inputs(series)?)
}

/// Streaming evaluation, one descriptor at a time.
#[derive(Debug, Clone)]
pub struct HeadRunner<'a> {
    params: &'a RecurrentHeadParams,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl<'a> HeadRunner<'a> {
    pub fn new(params: &'a RecurrentHeadParams) -> Result<Self> {
        params.validate()?;
        if params.input_dim != DESCRIPTOR_DIM {
            return Err(Error::Contract(format!("head input_dim {} is not {DESCRIPTOR_DIM}", params.input_dim)));
        }
        let nh = params.hidden_dim;
        let c = if params.cell == CellKind::Lstm { vec![0.0; nh] } else { Vec::new() };
        Ok(Self {
            params,
            h: vec![0.0; nh],
            c,
        })
    }

    pub fn step(&mut self, d: &SpectralDescriptor) -> f64 {
        let v = d.to_vector();
        let x = match &self.params.standardization {
            Some(st) => st.apply(&v),
            None => v,
        };
        let s = cell_step(self.params, &x, &self.h, &self.c);
        self.h = s.h;
        self.c = s.c;
        sigmoid(s.logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    LastStep,
    MeanSteps,
}

/// Accumulates `∂(scale·loss)/∂θ` of one sequence into `grad`; returns the loss.
fn backward_one(
    p: &RecurrentHeadParams,
    steps: &[StepCache],
    y: f64,
    mode: LossMode,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let (ni, nh) = (p.input_dim, p.hidden_dim);
    let t_len = steps.len();
    let step_weight = |t: usize| match mode {
        LossMode::LastStep => (t + 1 == t_len) as u8 as f64,
        LossMode::MeanSteps => 1.0 / t_len as f64,
    };
    let mut loss = 0.0;
    for (t, s) in steps.iter().enumerate() {
        let w = step_weight(t);
        if w > 0.0 {
            loss += w * bce_logit(s.logit, y);
        }
    }

    let r = p.readout_base();
    let mut dh_next = vec![0.0; nh];
    let mut dc_next = vec![0.0; nh];
    let mut da = vec![0.0; p.cell.gates() * nh];
    let mut dhr = vec![0.0; nh];

    // Adds the contribution of gate g (pre-activation grad `dag`) and writes
    // Uᵀ·dag into `dhr`.
    let accum = |grad: &mut [f64], g: usize, dag: &[f64], x: &[f64], hr: &[f64], dhr: &mut [f64]| {
        let base = p.gate_base(g);
        let u_base = base + nh * ni;
        let b_base = u_base + nh * nh;
        dhr.fill(0.0);
        for j in 0..nh {
            let d = dag[j];
            if d == 0.0 {
                continue;
            }
            for k in 0..ni {
                grad[base + j * ni + k] += d * x[k];
            }
            for k in 0..nh {
                grad[u_base + j * nh + k] += d * hr[k];
                dhr[k] += p.weights[u_base + j * nh + k] * d;
            }
            grad[b_base + j] += d;
        }
    };

    for t in (0..t_len).rev() {
        let s = &steps[t];
        let mut dh = std::mem::take(&mut dh_next);
        let w = step_weight(t);
        if w > 0.0 {
            let dlogit = scale * w * (sigmoid(s.logit) - y);
            for j in 0..nh {
                grad[r + j] += dlogit * s.h[j];
                dh[j] += dlogit * p.weights[r + j];
            }
            grad[r + nh] += dlogit;
        }
        let mut dh_prev = vec![0.0; nh];
        match p.cell {
            CellKind::Rnn => {
                for j in 0..nh {
                    da[j] = dh[j] * (1.0 - s.h[j] * s.h[j]);
                }
                accum(grad, 0, &da, &s.x, &s.h_prev, &mut dhr);
                dh_prev.copy_from_slice(&dhr);
            }
            CellKind::Gru => {
                let (z, rg, n) = (&s.gates[..nh], &s.gates[nh..2 * nh], &s.gates[2 * nh..]);
                let mut da_n = vec![0.0; nh];
                let mut da_z = vec![0.0; nh];
                for j in 0..nh {
                    da_n[j] = dh[j] * (1.0 - z[j]) * (1.0 - n[j] * n[j]);
                    da_z[j] = dh[j] * (s.h_prev[j] - n[j]) * z[j] * (1.0 - z[j]);
                    dh_prev[j] = dh[j] * z[j];
                }
                accum(grad, 2, &da_n, &s.x, &s.rh, &mut dhr);
                let mut da_r = vec![0.0; nh];
                for j in 0..nh {
                    da_r[j] = dhr[j] * s.h_prev[j] * rg[j] * (1.0 - rg[j]);
                    dh_prev[j] += dhr[j] * rg[j];
                }
                accum(grad, 0, &da_z, &s.x, &s.h_prev, &mut dhr);
                dh_prev.iter_mut().zip(&dhr).for_each(|(a, b)| *a += b);
                accum(grad, 1, &da_r, &s.x, &s.h_prev, &mut dhr);
                dh_prev.iter_mut().zip(&dhr).for_each(|(a, b)| *a += b);
            }
            CellKind::Lstm => {
                let mut dc_prev = vec![0.0; nh];
                for j in 0..nh {
                    let (i, f, g, o) = (s.gates[j], s.gates[nh + j], s.gates[2 * nh + j], s.gates[3 * nh + j]);
                    let tc = s.tanh_c[j];
                    let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                    da[j] = dc * g * i * (1.0 - i);
                    da[nh + j] = dc * s.c_prev[j] * f * (1.0 - f);
                    da[2 * nh + j] = dc * i * (1.0 - g * g);
                    da[3 * nh + j] = dh[j] * tc * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                for g in 0..4 {
                    accum(grad, g, &da[g * nh..(g + 1) * nh], &s.x, &s.h_prev, &mut dhr);
                    dh_prev.iter_mut().zip(&dhr).for_each(|(a, b)| *a += b);
                }
                dc_next = dc_prev;
            }
        }
        dh_next = dh_prev;
    }
    loss
}

/// One labeled input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    pub inputs: Vec<Vec<f64>>,
    pub positive: bool,
}

/// Mean BCE over the batch.
pub fn batch_loss(p: &RecurrentHeadParams, batch: &[LabeledSequence], mode: LossMode) -> Result<f64> {
    Ok(loss_and_grad(p, batch, mode)?.0)
}

/// Mean BCE over the batch and its exact gradient (BPTT).
pub fn loss_and_grad(
    p: &RecurrentHeadParams,
    batch: &[LabeledSequence],
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    p.validate()?;
    let mut grad = vec![0.0; p.weights.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for seq in batch {
        if seq.inputs.is_empty() {
            return Err(Error::Contract(format!("sequence {} has no steps", seq.id)));
        }
        check_width(p, &seq.inputs)?;
        let steps = forward_cached(p, &seq.inputs);
        let y = if seq.positive { 1.0 } else { 0.0 };
        let l = backward_one(p, &steps, y, mode, scale, &mut grad);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on trace {}", seq.id)));
        }
        total += l;
    }
    Ok((total * scale, grad))
}

fn risk_label(s: &DescriptorSeries) -> Result<bool> {
    s.label
        .risk()
        .ok_or_else(|| Error::Config(format!("trace {} is unlabeled", s.trace_id)))
}

pub fn labeled_sequences(p: &RecurrentHeadParams, series: &[DescriptorSeries]) -> Result<Vec<LabeledSequence>> {
    series
        .iter()
        .map(|s| {
            Ok(LabeledSequence {
                id: s.trace_id.clone(),
                inputs: p.series_inputs(s)?,
                positive: risk_label(s)?,
            })
        })
        .collect()
}

/// Loss and gradient for a batch of descriptor series.
pub fn head_backward(
    p: &RecurrentHeadParams,
    batch: &[DescriptorSeries],
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    loss_and_grad(p, &labeled_sequences(p, batch)?, mode)
}

/// Mann–Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            loss_mode: LossMode::LastStep,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

/// Last-step risk score of each series.
pub fn trace_scores(p: &RecurrentHeadParams, series: &[DescriptorSeries]) -> Result<Vec<f64>> {
    series
        .iter()
        .map(|s| {
            let scores = head_forward(p, s)?;
            scores
                .last()
                .copied()
                .ok_or_else(|| Error::Degenerate(format!("trace {} has no descriptors", s.trace_id)))
        })
        .collect()
}

/// AUROC of last-step scores against the risk labels.
pub fn evaluate_auroc(p: &RecurrentHeadParams, series: &[DescriptorSeries]) -> Result<f64> {
    let labels = series.iter().map(risk_label).collect::<Result<Vec<_>>>()?;
    auroc(&trace_scores(p, series)?, &labels)
}

fn check_both_classes(series: &[DescriptorSeries], what: &str) -> Result<()> {
    let labels = series.iter().map(risk_label).collect::<Result<Vec<_>>>()?;
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Config(format!("{what} split must contain both classes")));
    }
    Ok(())
}

/// Splits a corpus by its split tags into (train, val, test).
pub fn partition(
    corpus: &[DescriptorSeries],
) -> Result<(Vec<DescriptorSeries>, Vec<DescriptorSeries>, Vec<DescriptorSeries>)> {
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for s in corpus {
        match s.split {
            Some(Split::Train) => tr.push(s.clone()),
            Some(Split::Val) => va.push(s.clone()),
            Some(Split::Test) => te.push(s.clone()),
            None => {
                return Err(Error::Config(format!("trace {} carries no split tag", s.trace_id)));
            }
        }
    }
    Ok((tr, va, te))
}

/// Trains a head on the train split, selecting the epoch with the best
/// validation AUROC (ties broken by lower validation loss, then earlier).
/// Standardization statistics are fitted on the train split and stored in
/// the returned parameters.
pub fn head_train(
    corpus: &[DescriptorSeries],
    config: &TrainConfig,
    cell: CellKind,
    hidden_dim: usize,
) -> Result<(RecurrentHeadParams, TrainHistory)> {
    config.validate()?;
    let (train, val, _) = partition(corpus)?;
    check_both_classes(&train, "train")?;
    check_both_classes(&val, "validation")?;

    let mut rng = Rng64::new(config.seed);
    let mut params = RecurrentHeadParams::init(cell, DESCRIPTOR_DIM, hidden_dim, &mut rng)?;
    params.standardization = Some(Standardization::fit(&train)?);
    let train_seqs = labeled_sequences(&params, &train)?;
    let val_seqs = labeled_sequences(&params, &val)?;
    let val_labels: Vec<bool> = val_seqs.iter().map(|s| s.positive).collect();

    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, params.num_params())?;
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut best: Option<(f64, f64, RecurrentHeadParams)> = None;
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_auroc: f64::NAN,
    };

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledSequence> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let (loss, mut grad) = loss_and_grad(&params, &batch, config.loss_mode)?;
            loss_sum += loss * chunk.len() as f64;
            clip_grad_norm(&mut [&mut grad], config.grad_clip);
            opt.step(&mut params.weights, &grad);
        }
        let train_loss = loss_sum / train_seqs.len() as f64;
        let val_loss = batch_loss(&params, &val_seqs, config.loss_mode)?;
        let scores: Vec<f64> = val_seqs
            .iter()
            .map(|s| forward_inputs(&params, &s.inputs).map(|v| *v.last().expect("nonempty")))
            .collect::<Result<_>>()?;
        let val_auroc = auroc(&scores, &val_labels)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
        });
        let better = match &best {
            None => true,
            Some((a, l, _)) => val_auroc > *a || (val_auroc == *a && val_loss < *l),
        };
        if better {
            best = Some((val_auroc, val_loss, params.clone()));
            history.best_epoch = epoch;
            history.best_val_auroc = val_auroc;
        }
    }
    let (_, _, best_params) = best.expect("at least one epoch");
    Ok((best_params, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectionPoint {
    pub budget: usize,
    pub auroc: f64,
}

/// AUROC when only the first `budget` tokens of each trace are available,
/// scored at the last descriptor that fits in the budget.
pub fn eval_early_detection(
    p: &RecurrentHeadParams,
    corpus: &[DescriptorSeries],
    budgets: &[usize],
) -> Result<Vec<EarlyDetectionPoint>> {
    budgets
        .iter()
        .map(|&budget| {
            let truncated = corpus
                .iter()
                .map(|s| truncate_series(s, budget))
                .collect::<Result<Vec<_>>>()?;
            Ok(EarlyDetectionPoint {
                budget,
                auroc: evaluate_auroc(p, &truncated)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub window_len: usize,
    pub auroc: f64,
    /// Median over repetitions of descriptor + head time per streamed token.
    pub latency_us_per_token: f64,
}

pub const LATENCY_REPETITIONS: usize = 5;

/// Runs the monitor over every trace.
pub fn extract_corpus(
    traces: &[crate::monitor::ActivationTrace],
    config: &MonitorConfig,
) -> Result<Vec<DescriptorSeries>> {
    traces.iter().map(|t| run_trace(t, config, None)).collect()
}

/// Median wall-clock cost per token of streaming `trace` through a fresh
/// monitor and head.
pub fn measure_latency(
    p: &RecurrentHeadParams,
    trace: &crate::monitor::ActivationTrace,
    config: &MonitorConfig,
    repetitions: usize,
) -> Result<f64> {
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        let start = Instant::now();
        let mut monitor = Monitor::new(*config)?;
        let mut runner = HeadRunner::new(p)?;
        let mut sink = 0.0;
        for tok in &trace.tokens {
            if let Some(d) = monitor.push_token(tok)? {
                sink += runner.step(&d);
            }
        }
        std::hint::black_box(sink);
        times.push(start.elapsed().as_secs_f64() * 1e6 / trace.tokens.len() as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Regenerates the corpus descriptors per window length, trains a fresh head
/// with the same seed policy, and reports test AUROC and streaming latency.
pub fn eval_window_ablation(
    cell: CellKind,
    hidden_dim: usize,
    window_lens: &[usize],
    corpus: &CorpusConfig,
    corpus_seed: u64,
    monitor: &MonitorConfig,
    train: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let traces = gen_trace_corpus(corpus.n_per_class, &corpus.template, corpus.family, corpus_seed)?;
    let probe = traces
        .iter()
        .find(|t| trace_split(t) == Some(Split::Test))
        .unwrap_or(&traces[0]);
    let mut rows = Vec::with_capacity(window_lens.len());
    for &n in window_lens {
        let cfg = MonitorConfig {
            window_len: n,
            ..*monitor
        };
        let series = extract_corpus(&traces, &cfg)?;
        let (params, _) = head_train(&series, train, cell, hidden_dim)?;
        let (_, _, test) = partition(&series)?;
        rows.push(AblationRow {
            window_len: n,
            auroc: evaluate_auroc(&params, &test)?,
            latency_us_per_token: measure_latency(&params, probe, &cfg, LATENCY_REPETITIONS)?,
        });
    }
    Ok(rows)
}

/// Serialized trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub params: RecurrentHeadParams,
    pub gate_order: Vec<String>,
    pub layout: String,
    pub window_len: usize,
    pub train_config: TrainConfig,
    pub history: TrainHistory,
    pub metrics: BTreeMap<String, f64>,
}

impl HeadCheckpoint {
    pub fn new(
        params: RecurrentHeadParams,
        window_len: usize,
        train_config: TrainConfig,
        history: TrainHistory,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        Self {
            gate_order: params.cell.gate_order().iter().map(|s| s.to_string()).collect(),
            layout: "per gate: W[hidden][input], U[hidden][hidden], b[hidden]; then readout w[hidden], b".into(),
            params,
            window_len,
            train_config,
            history,
            metrics,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        ck.params.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::Label;

    fn toy_batch(rng: &mut Rng64, input_dim: usize, steps: usize, n: usize) -> Vec<LabeledSequence> {
        (0..n)
            .map(|i| LabeledSequence {
                id: format!("s{i}"),
                inputs: (0..steps)
                    .map(|_| (0..input_dim).map(|_| rng.normal()).collect())
                    .collect(),
                positive: i % 2 == 0,
            })
            .collect()
    }

    fn max_rel_error(p: &RecurrentHeadParams, batch: &[LabeledSequence], mode: LossMode) -> f64 {
        let (_, g) = loss_and_grad(p, batch, mode).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.weights.len() {
            let mut plus = p.clone();
            plus.weights[i] += h;
            let mut minus = p.clone();
            minus.weights[i] -= h;
            let fd = (batch_loss(&plus, batch, mode).unwrap() - batch_loss(&minus, batch, mode).unwrap()) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_check_all_cells() {
        for cell in CellKind::ALL {
            for mode in [LossMode::LastStep, LossMode::MeanSteps] {
                let mut rng = Rng64::new(7);
                let mut p = RecurrentHeadParams::init(cell, 3, 4, &mut rng).unwrap();
                // Nonzero biases exercise every path.
                for w in p.weights.iter_mut() {
                    *w += 0.1 * rng.normal();
                }
                let batch = toy_batch(&mut rng, 3, 3, 2);
                let e = max_rel_error(&p, &batch, mode);
                assert!(e <= 1e-4, "{cell:?} {mode:?}: {e}");
            }
        }
    }

    #[test]
    fn gru_param_count() {
        assert_eq!(RecurrentHeadParams::param_count(CellKind::Gru, 10, 16), 1313);
        assert_eq!(RecurrentHeadParams::param_count(CellKind::Rnn, 10, 16), 160 + 256 + 16 + 17);
        assert!(RecurrentHeadParams::zeros(CellKind::Lstm, 10, 64).is_err());
    }

    #[test]
    fn zero_weights_score_half_and_bias() {
        let x = vec![vec![1.0, -2.0, 3.0]; 4];
        for cell in CellKind::ALL {
            let mut p = RecurrentHeadParams::zeros(cell, 3, 5).unwrap();
            assert!(forward_inputs(&p, &x).unwrap().iter().all(|&s| s == 0.5));
            p.set_readout_bias(1.3);
            let want = 1.0 / (1.0 + (-1.3f64).exp());
            for s in forward_inputs(&p, &x).unwrap() {
                assert!((s - want).abs() < 1e-15);
            }
        }
    }

    /// Direct single-step GRU/LSTM/RNN evaluation from h = c = 0.
    fn one_step_oracle(p: &RecurrentHeadParams, x: &[f64]) -> f64 {
        let (ni, nh) = (p.input_dim, p.hidden_dim);
        let blk = nh * ni + nh * nh + nh;
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        // With h = 0 the recurrent matrices contribute nothing.
        let pre = |g: usize, j: usize| {
            let w = &p.weights[g * blk..];
            let mut s = w[nh * ni + nh * nh + j];
            for k in 0..ni {
                s += w[j * ni + k] * x[k];
            }
            s
        };
        let h: Vec<f64> = (0..nh)
            .map(|j| match p.cell {
                CellKind::Rnn => pre(0, j).tanh(),
                CellKind::Gru => (1.0 - sig(pre(0, j))) * pre(2, j).tanh(),
                CellKind::Lstm => {
                    let c = sig(pre(0, j)) * pre(2, j).tanh();
                    sig(pre(3, j)) * c.tanh()
                }
            })
            .collect();
        let r = p.cell.gates() * blk;
        sig(p.weights[r + nh] + (0..nh).map(|j| p.weights[r + j] * h[j]).sum::<f64>())
    }

    #[test]
    fn single_step_matches_oracle() {
        let mut rng = Rng64::new(3);
        for cell in CellKind::ALL {
            let mut p = RecurrentHeadParams::init(cell, 4, 6, &mut rng).unwrap();
            p.weights.iter_mut().for_each(|w| *w += 0.2 * rng.normal());
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let got = forward_inputs(&p, std::slice::from_ref(&x)).unwrap()[0];
            assert!((got - one_step_oracle(&p, &x)).abs() < 1e-14, "{cell:?}");
        }
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let mut rng = Rng64::new(5);
        let p = RecurrentHeadParams::init(CellKind::Lstm, 3, 4, &mut rng).unwrap();
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.normal() * 5.0; 3]).collect();
        assert!(forward_inputs(&p, &x).unwrap().iter().all(|&s| s > 0.0 && s < 1.0));
        assert!(matches!(forward_inputs(&p, &[vec![1.0; 2]]), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let mut rng = Rng64::new(9);
        let p = RecurrentHeadParams::init(CellKind::Gru, 3, 4, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 3, 5, 3);
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (l1, g1) = loss_and_grad(&p, &batch, LossMode::LastStep).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled, LossMode::LastStep).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn label_flip_symmetry() {
        // BCE(p, 1) = BCE(1 − p, 0): negating the readout while flipping
        // labels leaves the loss unchanged and negates the readout-bias grad.
        let mut rng = Rng64::new(11);
        let p = RecurrentHeadParams::init(CellKind::Rnn, 3, 4, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 3, 4, 4);
        let mut q = p.clone();
        let r = q.readout_base();
        q.weights[r..].iter_mut().for_each(|w| *w = -*w);
        let flipped: Vec<_> = batch
            .iter()
            .map(|s| LabeledSequence {
                positive: !s.positive,
                ..s.clone()
            })
            .collect();
        let (l1, g1) = loss_and_grad(&p, &batch, LossMode::LastStep).unwrap();
        let (l2, g2) = loss_and_grad(&q, &flipped, LossMode::LastStep).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let b = p.weights.len() - 1;
        assert!((g1[b] + g2[b]).abs() < 1e-14);
    }

    #[test]
    fn auroc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Config(_))));
    }

    #[test]
    fn nan_loss_names_trace() {
        let mut p = RecurrentHeadParams::zeros(CellKind::Rnn, 2, 2).unwrap();
        p.set_readout_bias(1.0);
        let batch = vec![LabeledSequence {
            id: "bad-one".into(),
            inputs: vec![vec![f64::NAN, 0.0]],
            positive: true,
        }];
        p.weights[0] = 1.0;
        match loss_and_grad(&p, &batch, LossMode::LastStep) {
            Err(Error::Numerical(m)) => assert!(m.contains("bad-one")),
            other => panic!("{other:?}"),
        }
    }

    fn toy_series(id: &str, label: Label, split: Split, level: f64, rng: &mut Rng64) -> DescriptorSeries {
        let steps = (0..6)
            .map(|_| {
                let v: [f64; DESCRIPTOR_DIM] = std::array::from_fn(|_| level + 0.3 * rng.normal());
                SpectralDescriptor::from_vector(&v)
            })
            .collect();
        DescriptorSeries {
            trace_id: id.into(),
            label,
            window_len: 30,
            steps,
            standardization: None,
            baseline: None,
            split: Some(split),
        }
    }

    fn toy_corpus(seed: u64) -> Vec<DescriptorSeries> {
        let mut rng = Rng64::new(seed);
        let mut out = Vec::new();
        for i in 0..40 {
            let split = match i % 10 {
                0..=6 => Split::Train,
                7 | 8 => Split::Val,
                _ => Split::Test,
            };
            let (label, level) = if i % 2 == 0 { (Label::Factual, 0.0) } else { (Label::Hallucinated, 1.0) };
            out.push(toy_series(&format!("t{i}"), label, split, level, &mut rng));
        }
        out
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let corpus = toy_corpus(1);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let (p1, h1) = head_train(&corpus, &cfg, CellKind::Gru, 8).unwrap();
        let (p2, h2) = head_train(&corpus, &cfg, CellKind::Gru, 8).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.epochs.len(), 15);
        assert!(h1.best_val_auroc >= 0.9, "{h1:?}");
        assert!(h1.epochs.last().unwrap().train_loss < h1.epochs[0].train_loss);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let corpus = toy_corpus(2);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (p, _) = head_train(&corpus, &cfg, CellKind::Lstm, 4).unwrap();
        let mut rng = Rng64::new(cfg.seed);
        let init = RecurrentHeadParams::init(CellKind::Lstm, DESCRIPTOR_DIM, 4, &mut rng).unwrap();
        assert_eq!(p.weights, init.weights);
    }

    #[test]
    fn single_class_rejected() {
        let corpus: Vec<_> = toy_corpus(3).into_iter().filter(|s| s.label == Label::Factual).collect();
        assert!(matches!(
            head_train(&corpus, &TrainConfig::default(), CellKind::Gru, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn streaming_runner_matches_forward() {
        let corpus = toy_corpus(4);
        let mut rng = Rng64::new(0);
        let mut p = RecurrentHeadParams::init(CellKind::Lstm, DESCRIPTOR_DIM, 5, &mut rng).unwrap();
        p.standardization = Some(Standardization::fit(&corpus).unwrap());
        let batch = head_forward(&p, &corpus[0]).unwrap();
        let mut runner = HeadRunner::new(&p).unwrap();
        let streamed: Vec<f64> = corpus[0].steps.iter().map(|d| runner.step(d)).collect();
        assert_eq!(batch, streamed);
    }

    #[test]
    fn early_detection_endpoints() {
        let corpus = toy_corpus(5);
        let mut rng = Rng64::new(0);
        let p = RecurrentHeadParams::init(CellKind::Gru, DESCRIPTOR_DIM, 4, &mut rng).unwrap();
        let curve = eval_early_detection(&p, &corpus, &[30, 35]).unwrap();
        assert_eq!(curve[1].auroc, evaluate_auroc(&p, &corpus).unwrap());
        let first: Vec<_> = corpus.iter().map(|s| truncate_series(s, 30).unwrap()).collect();
        assert!(first.iter().all(|s| s.len() == 1));
        assert_eq!(curve[0].auroc, evaluate_auroc(&p, &first).unwrap());
        assert!(eval_early_detection(&p, &corpus, &[10]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng64::new(0);
        let p = RecurrentHeadParams::init(CellKind::Gru, DESCRIPTOR_DIM, 4, &mut rng).unwrap();
        let ck = HeadCheckpoint::new(
            p,
            30,
            TrainConfig::default(),
            TrainHistory {
                epochs: vec![],
                best_epoch: 1,
                best_val_auroc: 0.9,
            },
            BTreeMap::new(),
        );
        let dir = std::env::temp_dir().join(format!("eigenkit-head-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("head.json");
        ck.save(&path).unwrap();
        assert_eq!(HeadCheckpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(dir).ok();
    }
}
