//! Spectral width reduction of MLP hidden layers with self-distillation.
//!
//! A hidden layer's activations on a calibration set are compared against a
//! fitted Marchenko–Pastur bulk; the eigenvectors of the eigenvalues above
//! the bulk edge span the kept subspace `P` (width × k). The projection is
//! folded into the adjacent weights (`W → PᵀW`, `b → Pᵀb`,
//! `W_next → W_next·P`), then the smaller student is distilled against the
//! pre-reduction teacher.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{MixtureDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{window_spectrum, Matrix, Window};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rmt::{count_outliers, fit_mp_sigma, MpModel, DEFAULT_FIT_QUANTILE};
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out × in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

/// Cached forward pass: `pre[l]` and `post[l]` for each layer.
struct ForwardCache {
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

/// Per-layer `(dW, db)`.
pub type LayerGrads = Vec<(Matrix, Vec<f64>)>;

impl MlpModel {
    /// ReLU hidden layers, identity logits; He-normal weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = Rng64::new(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| scale * rng.normal()).collect();
                DenseLayer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("shape"),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("model has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Contract(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && self.layers[l - 1].out_dim() != layer.in_dim() {
                return Err(Error::Contract(format!("layer {l}: input width does not chain")));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numerical(format!("layer {l}: non-finite parameter")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    fn forward_cache(&self, x: &Matrix) -> Result<ForwardCache> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().unwrap_or(x);
            let mut z = input.matmul_t(&layer.weight)?;
            for r in 0..z.rows {
                z.row_mut(r).iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
            }
            let a = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => {
                    let mut a = z.clone();
                    a.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    a
                }
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache { pre, post })
    }

    /// Logits, one row per input row.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cache(x)?.post.pop().expect("nonempty"))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows)
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Degenerate("accuracy of an empty set".into()));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Gradients of a loss whose derivative w.r.t. the logits is `dlogits`.
    fn backprop(&self, x: &Matrix, cache: &ForwardCache, dlogits: Matrix) -> Result<LayerGrads> {
        let n = self.layers.len();
        let mut grads: LayerGrads = Vec::with_capacity(n);
        let mut dz = dlogits;
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { x } else { &cache.post[l - 1] };
            let dw = dz.t_matmul(input)?;
            let mut db = vec![0.0; layer.out_dim()];
            for r in 0..dz.rows {
                db.iter_mut().zip(dz.row(r)).for_each(|(a, b)| *a += b);
            }
            grads.push((dw, db));
            if l > 0 {
                let mut da = dz.matmul(&layer.weight)?;
                if self.layers[l - 1].activation == Activation::Relu {
                    for (g, z) in da.data.iter_mut().zip(&cache.pre[l - 1].data) {
                        if *z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                dz = da;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    fn apply_update(&mut self, opt: &mut Optimizer, grads: &LayerGrads) {
        opt.begin_step();
        let mut offset = 0;
        for (layer, (dw, db)) in self.layers.iter_mut().zip(grads) {
            opt.update(offset, &mut layer.weight.data, &dw.data);
            offset += dw.data.len();
            opt.update(offset, &mut layer.bias, db);
            offset += db.len();
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(path)?), self)?;
        Ok(())
    }
}

/// Row-wise `log softmax(logits / tau)`.
fn log_softmax_rows(logits: &Matrix, tau: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        row.iter_mut().for_each(|v| *v /= tau);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    distill_objective(logits, None, labels, 1.0, 1.0)
}

/// `α·CE(labels, s) + (1−α)·τ²·KL(softmax(t/τ) ‖ softmax(s/τ))`, batch mean,
/// with its gradient w.r.t. the student logits `s`.
pub fn distill_objective(
    student: &Matrix,
    teacher: Option<&Matrix>,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> (f64, Matrix) {
    let n = student.rows as f64;
    let logp = log_softmax_rows(student, 1.0);
    let mut grad = Matrix::zeros(student.rows, student.cols);
    let mut loss = 0.0;
    for r in 0..student.rows {
        loss -= alpha * logp.get(r, labels[r]);
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let y = (j == labels[r]) as u8 as f64;
            *g = alpha * (logp.get(r, j).exp() - y) / n;
        }
    }
    if let Some(t) = teacher {
        let ls = log_softmax_rows(student, tau);
        let lt = log_softmax_rows(t, tau);
        let w = (1.0 - alpha) * tau * tau;
        for r in 0..student.rows {
            let mut kl = 0.0;
            for j in 0..student.cols {
                let pt = lt.get(r, j).exp();
                kl += pt * (lt.get(r, j) - ls.get(r, j));
                let ps = ls.get(r, j).exp();
                grad.data[r * student.cols + j] += w / tau * (ps - pt) / n;
            }
            loss += w * kl;
        }
    }
    (loss / n, grad)
}

/// Mean cross-entropy and exact parameter gradients (used by gradient checks).
pub fn mlp_loss_and_grad(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<(f64, LayerGrads)> {
    let cache = model.forward_cache(x)?;
    let (loss, dl) = cross_entropy(cache.post.last().expect("nonempty"), labels);
    Ok((loss, model.backprop(x, &cache, dl)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training stops once validation accuracy reaches this level.
    pub target_accuracy: f64,
    pub optimizer: OptimizerKind,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 40,
            batch_size: 64,
            seed: 0,
            target_accuracy: 0.99,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// One pass of shuffled mini-batches. `objective(batch_rows, logits)`
/// returns the batch loss and its logit gradient.
fn train_epoch<F>(
    model: &mut MlpModel,
    x: &Matrix,
    batch_size: usize,
    rng: &mut Rng64,
    opt: &mut Optimizer,
    mut objective: F,
) -> Result<f64>
where
    F: FnMut(&[usize], &Matrix) -> (f64, Matrix),
{
    let mut order: Vec<usize> = (0..x.rows).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let mut xb = Matrix::zeros(chunk.len(), x.cols);
        for (r, &i) in chunk.iter().enumerate() {
            xb.row_mut(r).copy_from_slice(x.row(i));
        }
        let cache = model.forward_cache(&xb)?;
        let (loss, dl) = objective(chunk, cache.post.last().expect("nonempty"));
        if !loss.is_finite() {
            return Err(Error::Numerical("training loss diverged (non-finite)".into()));
        }
        total += loss * chunk.len() as f64;
        let grads = model.backprop(&xb, &cache, dl)?;
        model.apply_update(opt, &grads);
    }
    Ok(total / x.rows as f64)
}

fn check_dataset(model: &MlpModel, data: &MixtureDataset) -> Result<()> {
    model.validate()?;
    if data.inputs.cols != model.input_dim() {
        return Err(Error::Contract(format!(
            "dataset width {} does not match model input {}",
            data.inputs.cols,
            model.input_dim()
        )));
    }
    if data.classes > model.output_dim() {
        return Err(Error::Contract("model has fewer outputs than classes".into()));
    }
    if data.indices(Split::Train).is_empty() || data.indices(Split::Val).is_empty() {
        return Err(Error::Config("dataset needs train and val splits".into()));
    }
    Ok(())
}

/// Softmax cross-entropy training until validation accuracy reaches the
/// target or `max_epochs` passes.
pub fn mlp_train(
    model: &MlpModel,
    data: &MixtureDataset,
    config: &MlpTrainConfig,
) -> Result<(MlpModel, Vec<MlpEpoch>)> {
    check_dataset(model, data)?;
    let (xtr, ytr) = data.subset(Split::Train);
    let (xva, yva) = data.subset(Split::Val);
    let mut m = model.clone();
    let mut rng = Rng64::new(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, m.param_count())?;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(&mut m, &xtr, config.batch_size, &mut rng, &mut opt, |rows, logits| {
            let y: Vec<usize> = rows.iter().map(|&i| ytr[i]).collect();
            cross_entropy(logits, &y)
        })?;
        let val_accuracy = m.accuracy(&xva, &yva)?;
        history.push(MlpEpoch {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy >= config.target_accuracy {
            break;
        }
    }
    Ok((m, history))
}

/// Post-activation outputs of layer `layer_index` (n × width).
pub fn collect_activations(model: &MlpModel, inputs: &Matrix, layer_index: usize) -> Result<Window> {
    if layer_index >= model.layers.len() {
        return Err(Error::Config(format!(
            "layer index {layer_index} out of range (model has {} layers)",
            model.layers.len()
        )));
    }
    if inputs.rows == 0 {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let mut cache = model.forward_cache(inputs)?;
    Window::new(cache.post.swap_remove(layer_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStageReport {
    pub layer_index: usize,
    pub eigenvalues: Vec<f64>,
    pub fitted: MpModel,
    pub outliers: usize,
    pub kept_k: usize,
    pub width_before: usize,
    pub width_after: usize,
    pub acc_before: Option<f64>,
    pub acc_after_projection: Option<f64>,
    pub acc_after_distill: Option<f64>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Folds the outlier subspace of layer `layer_index`'s activations into the
/// layer and its successor.
pub fn reduce_layer(
    model: &MlpModel,
    layer_index: usize,
    calibration: &Matrix,
    quantile: f64,
    k_min: usize,
) -> Result<(MlpModel, CompressionStageReport)> {
    model.validate()?;
    if layer_index + 1 >= model.layers.len() {
        return Err(Error::Config(format!(
            "layer {layer_index} is the logits layer or out of range; only hidden layers can be reduced"
        )));
    }
    let width = model.layers[layer_index].out_dim();
    if calibration.rows <= width {
        return Err(Error::Config(format!(
            "calibration size {} must exceed layer width {width}",
            calibration.rows
        )));
    }
    let acts = collect_activations(model, calibration, layer_index)?;
    let spectrum = window_spectrum(&acts, false, true)?;
    let fitted = fit_mp_sigma(&spectrum.eigenvalues, spectrum.aspect, quantile)?;
    let outliers = count_outliers(&spectrum.eigenvalues, &fitted, 0.0)?;
    let k = k_min.max(outliers).min(width);
    let params_before = model.param_count();
    let mut report = CompressionStageReport {
        layer_index,
        eigenvalues: spectrum.eigenvalues.clone(),
        fitted,
        outliers,
        kept_k: k,
        width_before: width,
        width_after: width,
        acc_before: None,
        acc_after_projection: None,
        acc_after_distill: None,
        params_before,
        params_after: params_before,
    };
    if k == width {
        return Ok((model.clone(), report));
    }
    let vectors = spectrum.eigenvectors.as_ref().expect("covariance form has vectors");
    let p = vectors.leading_columns(k);

    let mut out = model.clone();
    let layer = &mut out.layers[layer_index];
    layer.weight = p.t_matmul(&layer.weight)?;
    layer.bias = (0..k)
        .map(|c| (0..width).map(|r| p.get(r, c) * model.layers[layer_index].bias[r]).sum())
        .collect();
    let next = &mut out.layers[layer_index + 1];
    next.weight = next.weight.matmul(&p)?;
    out.validate()?;

    report.width_after = k;
    report.params_after = out.param_count();
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 2.0,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl DistillConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "need alpha in [0,1] and tau > 0, got alpha {} tau {}",
                self.alpha, self.tau
            )));
        }
        Ok(())
    }
}

fn distill_loop(
    student: &MlpModel,
    teacher: Option<&MlpModel>,
    data: &MixtureDataset,
    config: &DistillConfig,
) -> Result<MlpModel> {
    config.validate()?;
    check_dataset(student, data)?;
    if let Some(t) = teacher {
        if t.input_dim() != student.input_dim() || t.output_dim() != student.output_dim() {
            return Err(Error::Contract(format!(
                "teacher {}→{} and student {}→{} differ in input/output width",
                t.input_dim(),
                t.output_dim(),
                student.input_dim(),
                student.output_dim()
            )));
        }
    }
    let (xtr, ytr) = data.subset(Split::Train);
    let (xva, yva) = data.subset(Split::Val);
    let teacher_logits = teacher.map(|t| t.forward(&xtr)).transpose()?;
    let mut m = student.clone();
    let mut rng = Rng64::new(config.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate, m.param_count())?;
    let mut best_acc = m.accuracy(&xva, &yva)?;
    let mut best = m.clone();
    for _ in 0..config.epochs {
        train_epoch(&mut m, &xtr, config.batch_size, &mut rng, &mut opt, |rows, logits| {
            let y: Vec<usize> = rows.iter().map(|&i| ytr[i]).collect();
            let t = teacher_logits.as_ref().map(|tl| {
                let mut tb = Matrix::zeros(rows.len(), tl.cols);
                for (r, &i) in rows.iter().enumerate() {
                    tb.row_mut(r).copy_from_slice(tl.row(i));
                }
                tb
            });
            distill_objective(logits, t.as_ref(), &y, config.alpha, config.tau)
        })?;
        let acc = m.accuracy(&xva, &yva)?;
        if acc >= best_acc {
            best_acc = acc;
            best = m.clone();
        }
    }
    Ok(best)
}

/// Fine-tunes `student` on the task loss plus temperature-scaled KL to the
/// frozen `teacher`; returns the best-validation-accuracy student.
pub fn self_distill(
    student: &MlpModel,
    teacher: &MlpModel,
    data: &MixtureDataset,
    config: &DistillConfig,
) -> Result<MlpModel> {
    distill_loop(student, Some(teacher), data, config)
}

/// Same loop as [`self_distill`] with the cross-entropy term only.
pub fn fine_tune(student: &MlpModel, data: &MixtureDataset, config: &DistillConfig) -> Result<MlpModel> {
    distill_loop(student, None, data, &DistillConfig { alpha: 1.0, ..config.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub quantile: f64,
    pub k_min: usize,
    pub target_reduction: f64,
    /// Hidden layers to visit, first to last when absent.
    pub layer_order: Option<Vec<usize>>,
    pub passes: usize,
    pub calibration_size: usize,
    /// Minimum validation accuracy of the input model.
    pub accuracy_gate: f64,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quantile: DEFAULT_FIT_QUANTILE,
            k_min: 4,
            target_reduction: 0.4,
            layer_order: None,
            passes: 1,
            calibration_size: 512,
            accuracy_gate: 0.9,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub params_before: usize,
    pub params_after: usize,
    pub reduction: f64,
    pub acc_before: f64,
    pub acc_after: f64,
    pub stages: usize,
    pub widths_before: Vec<usize>,
    pub widths_after: Vec<usize>,
}

/// `n` training rows chosen by a seeded shuffle of the train split.
pub fn calibration_inputs(data: &MixtureDataset, n: usize, seed: u64) -> Result<Matrix> {
    let mut idx = data.indices(Split::Train);
    if idx.len() < n {
        return Err(Error::Config(format!(
            "calibration size {n} exceeds the {} training rows",
            idx.len()
        )));
    }
    Rng64::new(seed).shuffle(&mut idx);
    idx.truncate(n);
    Ok(data.gather(&idx).0)
}

/// Reduce → distill over the hidden layers until the parameter reduction
/// reaches the target or no layer shrinks in a pass. Accuracies in the
/// reports and summary are on the test split.
pub fn compress_pipeline(
    model: &MlpModel,
    data: &MixtureDataset,
    config: &PipelineConfig,
) -> Result<(MlpModel, Vec<CompressionStageReport>, CompressionSummary)> {
    check_dataset(model, data)?;
    if !(config.quantile > 0.0 && config.quantile < 1.0) {
        return Err(Error::Config(format!("quantile {} not in (0,1)", config.quantile)));
    }
    if !(0.0..=1.0).contains(&config.target_reduction) {
        return Err(Error::Config("target_reduction must lie in [0,1]".into()));
    }
    let hidden = model.layers.len() - 1;
    let order = config.layer_order.clone().unwrap_or_else(|| (0..hidden).collect());
    if let Some(&bad) = order.iter().find(|&&l| l >= hidden) {
        return Err(Error::Config(format!("layer {bad} is not a hidden layer (0..{hidden})")));
    }

    let (xva, yva) = data.subset(Split::Val);
    let val_acc = model.accuracy(&xva, &yva)?;
    if val_acc < config.accuracy_gate {
        return Err(Error::Gate(format!(
            "model validation accuracy {val_acc:.4} is below the gate {:.4}; train longer before compressing",
            config.accuracy_gate
        )));
    }
    let (xte, yte) = data.subset(Split::Test);
    let calib = calibration_inputs(data, config.calibration_size, config.seed)?;
    let params_before = model.param_count();
    let acc_before = model.accuracy(&xte, &yte)?;
    let reduction_of = |m: &MlpModel| 1.0 - m.param_count() as f64 / params_before as f64;

    let mut current = model.clone();
    let mut reports = Vec::new();
    'passes: for _ in 0..config.passes {
        let mut shrunk = false;
        for &l in &order {
            if reduction_of(&current) >= config.target_reduction {
                break 'passes;
            }
            let (student, mut report) = reduce_layer(&current, l, &calib, config.quantile, config.k_min)?;
            let acc_stage = current.accuracy(&xte, &yte)?;
            report.acc_before = Some(acc_stage);
            if report.width_after == report.width_before {
                report.acc_after_projection = Some(acc_stage);
                report.acc_after_distill = Some(acc_stage);
                reports.push(report);
                continue;
            }
            report.acc_after_projection = Some(student.accuracy(&xte, &yte)?);
            let distilled = self_distill(&student, &current, data, &config.distill)?;
            report.acc_after_distill = Some(distilled.accuracy(&xte, &yte)?);
            reports.push(report);
            current = distilled;
            shrunk = true;
        }
        if !shrunk {
            break;
        }
    }
    let summary = CompressionSummary {
        params_before,
        params_after: current.param_count(),
        reduction: reduction_of(&current),
        acc_before,
        acc_after: current.accuracy(&xte, &yte)?,
        stages: reports.len(),
        widths_before: model.widths(),
        widths_after: current.widths(),
    };
    Ok((current, reports, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub quantile: f64,
    pub reduction: f64,
    pub accuracy: f64,
    pub params_after: usize,
    pub widths_after: Vec<usize>,
}

/// One pipeline run per quantile, all from the same starting model.
pub fn quantile_sweep(
    model: &MlpModel,
    data: &MixtureDataset,
    quantiles: &[f64],
    base: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::Config(format!("quantile {q} not in (0,1)")));
    }
    quantiles
        .iter()
        .map(|&quantile| {
            let cfg = PipelineConfig {
                quantile,
                ..base.clone()
            };
            let (_, _, s) = compress_pipeline(model, data, &cfg)?;
            Ok(SweepRow {
                quantile,
                reduction: s.reduction,
                accuracy: s.acc_after,
                params_after: s.params_after,
                widths_after: s.widths_after,
            })
        })
        .collect()
}

fn widths_field(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_stage_csv<W: Write>(writer: W, reports: &[CompressionStageReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header = [
        "layer_index",
        "width_before",
        "width_after",
        "outliers",
        "kept_k",
        "sigma_sq",
        "lambda_plus",
        "acc_before",
        "acc_after_projection",
        "acc_after_distill",
        "params_before",
        "params_after",
    ];
    w.write_record(header).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.layer_index.to_string(),
            r.width_before.to_string(),
            r.width_after.to_string(),
            r.outliers.to_string(),
            r.kept_k.to_string(),
            r.fitted.sigma_sq.to_string(),
            r.fitted.lambda_plus.to_string(),
            opt_field(r.acc_before),
            opt_field(r.acc_after_projection),
            opt_field(r.acc_after_distill),
            r.params_before.to_string(),
            r.params_after.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["quantile", "reduction", "accuracy", "params_after", "widths_after"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.quantile.to_string(),
            r.reduction.to_string(),
            r.accuracy.to_string(),
            r.params_after.to_string(),
            widths_field(&r.widths_after),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
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
