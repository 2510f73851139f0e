//! Linear probing on frozen embeddings.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected ADAM update with step size `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("ADAM parameter, gradient and state shapes differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::invalid(format!("non-finite gradient at index {i}")));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total {total_steps}")));
    }
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { classes, dim, weights: vec![0.0; classes * dim], bias: vec![0.0; classes] }
    }

    fn param_count(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    fn to_params(&self) -> Vec<f64> {
        [self.weights.as_slice(), &self.bias].concat()
    }

    fn set_params(&mut self, p: &[f64]) {
        let w = self.classes * self.dim;
        self.weights.copy_from_slice(&p[..w]);
        self.bias.copy_from_slice(&p[w..]);
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Arg-max class; ties go to the lower class id.
    pub fn predict_one(&self, x: &[f64]) -> u32 {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn predict(&self, data: &[f64]) -> Vec<u32> {
        data.chunks_exact(self.dim).map(|x| self.predict_one(x)).collect()
    }
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Mean softmax cross-entropy over `rows` and its gradient, laid out as the
/// weights (row-major) followed by the bias.
pub fn loss_and_grad(model: &LinearModel, data: &[f64], labels: &[u32], rows: &[usize]) -> (f64, Vec<f64>) {
    let d = model.dim;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for &i in rows {
        let x = &data[i * d..(i + 1) * d];
        let y = labels[i] as usize;
        let mut p = model.logits(x);
        softmax(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        p[y] -= 1.0;
        for (c, &dz) in p.iter().enumerate() {
            grad[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(g, v)| *g += dz * v);
            grad[model.classes * d + c] += dz;
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled, scaled by the scheduled learning rate.
    pub weight_decay: f64,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 128,
            epochs: 10,
            weight_decay: 0.0,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate, batch size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Mean batch loss per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

fn check_data(data: &[f64], labels: &[u32], dim: usize) -> Result<usize> {
    if dim == 0 || data.len() != labels.len() * dim {
        return Err(Error::invalid(format!("{} values for {} labels of dim {dim}", data.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no training rows"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("embeddings contain non-finite values"));
    }
    Ok(labels.len())
}

fn class_count(labels: &[u32]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m as usize + 1)
}

/// Trains a softmax-regression probe with minibatch ADAM and a cosine
/// schedule. Rows are reshuffled every epoch from `cfg.seed`.
pub fn train_probe(data: &[f64], labels: &[u32], dim: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_probe_classes(data, labels, dim, class_count(labels), cfg)
}

fn train_probe_classes(
    data: &[f64],
    labels: &[u32],
    dim: usize,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let n = check_data(data, labels, dim)?;
    cfg.validate()?;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::invalid("training labels contain a single class"));
    }
    let mut model = LinearModel::zeros(classes, dim);
    let mut params = model.to_params();
    let mut state = AdamState::new(params.len());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.set_params(&params);
            let (loss, grad) = loss_and_grad(&model, data, labels, batch);
            loss_sum += loss;
            let lr = cosine_lr(step, total, cfg.learning_rate)?;
            if cfg.weight_decay > 0.0 {
                let w = classes * dim;
                params[..w].iter_mut().for_each(|p| *p -= lr * cfg.weight_decay * *p);
            }
            adam_step(&mut params, &grad, &mut state, lr, &cfg.adam)?;
            step += 1;
        }
        epoch_losses.push(loss_sum / steps_per_epoch as f64);
    }
    model.set_params(&params);
    if model.weights.iter().chain(&model.bias).any(|p| !p.is_finite()) {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(TrainOutcome { model, epoch_losses })
}

/// Hyperparameter grid search over `(learning_rate, weight_decay)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub grid: Vec<(f64, f64)>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// `(learning_rate, weight_decay, validation balanced accuracy)`.
    pub scores: Vec<(f64, f64, f64)>,
    pub best: (f64, f64),
    /// Retrained on all rows with the best setting.
    pub model: LinearModel,
}

/// Picks the grid point with the best balanced accuracy on a seeded
/// validation split (first wins on ties), then retrains on everything.
pub fn sweep(data: &[f64], labels: &[u32], dim: usize, base: &TrainConfig, sweep: &SweepConfig) -> Result<SweepOutcome> {
    let n = check_data(data, labels, dim)?;
    if sweep.grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if !(sweep.val_fraction > 0.0 && sweep.val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction must be in (0, 1)"));
    }
    let classes = class_count(labels);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(base.seed ^ 0x5EED_5711));
    let n_val = ((n as f64 * sweep.val_fraction).ceil() as usize).clamp(1, n - 1);
    let (val, train) = order.split_at(n_val);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<u32>) {
        let x = idx.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect();
        (x, idx.iter().map(|&i| labels[i]).collect())
    };
    let (tx, ty) = gather(train);
    let (vx, vy) = gather(val);
    let mut scores = Vec::with_capacity(sweep.grid.len());
    let mut best: Option<(f64, (f64, f64))> = None;
    for &(lr, wd) in &sweep.grid {
        let cfg = TrainConfig { learning_rate: lr, weight_decay: wd, ..base.clone() };
        let out = train_probe_classes(&tx, &ty, dim, classes, &cfg)?;
        let acc = balanced_accuracy(&out.model.predict(&vx), &vy)?;
        scores.push((lr, wd, acc));
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, (lr, wd)));
        }
    }
    let (_, (lr, wd)) = best.expect("grid is non-empty");
    let cfg = TrainConfig { learning_rate: lr, weight_decay: wd, ..base.clone() };
    let model = train_probe_classes(data, labels, dim, classes, &cfg)?.model;
    Ok(SweepOutcome { scores, best: (lr, wd), model })
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(preds: &[u32], labels: &[u32]) -> Result<Vec<Vec<u64>>> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let c = class_count(preds).max(class_count(labels));
    let mut m = vec![vec![0u64; c]; c];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    let m = confusion_matrix(preds, labels)?;
    let hits: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    Ok(balanced_from_confusion(&confusion_matrix(preds, labels)?))
}

pub fn balanced_from_confusion(m: &[Vec<u64>]) -> f64 {
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[i] as f64 / support as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// F1 per class id; 0 where precision or recall is undefined.
pub fn per_class_f1(preds: &[u32], labels: &[u32]) -> Result<Vec<f64>> {
    let m = confusion_matrix(preds, labels)?;
    Ok(f1_from_confusion(&m).into_iter().map(|f| f.unwrap_or(0.0)).collect())
}

/// `None` for classes with neither support nor predictions.
fn f1_from_confusion(m: &[Vec<u64>]) -> Vec<Option<f64>> {
    (0..m.len())
        .map(|c| {
            let tp = m[c][c];
            let support: u64 = m[c].iter().sum();
            let predicted: u64 = m.iter().map(|row| row[c]).sum();
            if support == 0 && predicted == 0 {
                None
            } else {
                Some(2.0 * tp as f64 / (support + predicted) as f64)
            }
        })
        .collect()
}

/// Mean F1 over classes that occur in `labels` or `preds`.
pub fn macro_f1(preds: &[u32], labels: &[u32]) -> Result<f64> {
    let f: Vec<f64> = f1_from_confusion(&confusion_matrix(preds, labels)?).into_iter().flatten().collect();
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl ProbeReport {
    pub fn evaluate(preds: &[u32], labels: &[u32]) -> Result<Self> {
        Ok(Self {
            n: preds.len(),
            accuracy: accuracy(preds, labels)?,
            balanced_accuracy: balanced_accuracy(preds, labels)?,
            macro_f1: macro_f1(preds, labels)?,
            per_class_f1: per_class_f1(preds, labels)?,
            confusion: confusion_matrix(preds, labels)?,
        })
    }

    /// `metric,value` rows, one per headline metric and per-class F1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(["metric", "value"]).map_err(csv_err)?;
        out.write_record(["n", &self.n.to_string()]).map_err(csv_err)?;
        out.write_record(["accuracy", &self.accuracy.to_string()]).map_err(csv_err)?;
        out.write_record(["balanced_accuracy", &self.balanced_accuracy.to_string()]).map_err(csv_err)?;
        out.write_record(["macro_f1", &self.macro_f1.to_string()]).map_err(csv_err)?;
        for (c, f) in self.per_class_f1.iter().enumerate() {
            out.write_record([format!("f1_class_{c}"), f.to_string()]).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "n={}  accuracy={:.4}  balanced_accuracy={:.4}  macro_f1={:.4}\n",
            self.n, self.accuracy, self.balanced_accuracy, self.macro_f1
        );
        for (c, f) in self.per_class_f1.iter().enumerate() {
            s.push_str(&format!("  class {c}: f1={f:.4}\n"));
        }
        s
    }
}
