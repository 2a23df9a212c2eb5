//! Desk-scale experiment runner: config parsing, the SGD loop, evaluation,
//! and the per-epoch diagnostics (loss/accuracy, per-group gradient
//! magnitudes, branch-weight trajectories).
//!
//! Everything downstream of (seed, config) is deterministic: model init,
//! subset selection, batch order, and every reduction are seeded or
//! fixed-order, so repeated runs produce bit-identical metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{ActivationKind, ConvBlockSpec, ModelSpec, ParamId, TinyCnn};
use crate::tensor::Tensor;

pub const SGD_MOMENTUM: f64 = 0.9;
/// L2 decay applied to conv/linear weights only; activation parameters,
/// norm scalars, and biases are left undecayed.
pub const WEIGHT_DECAY: f64 = 5e-4;
pub const EVAL_BATCH: usize = 256;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub dir: std::path::PathBuf,
    pub train_subset: usize,
    pub test_subset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_pad() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: Vec<ConvBlockConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Cosine,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub kind: LrKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl LrSchedule {
    /// Learning rate for `epoch` (0-based) out of `epochs`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.kind {
            LrKind::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                self.initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrKind::Step => {
                let step = self.step_size.expect("validated");
                let gamma = self.gamma.expect("validated");
                self.initial * gamma.powi((epoch / step) as i32)
            }
        }
    }
}

/// Full experiment description. Unknown keys anywhere in the document are
/// rejected up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub activation: ActivationKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Learning rate override for the activation parameters (branch weights
    /// and slope); the global rate applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_lr: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Steps between progress lines on stderr; 0 silences them.
    #[serde(default)]
    pub log_cadence: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.dataset.train_subset == 0 || self.dataset.test_subset == 0 {
            return Err(Error::config("dataset subsets must be >= 1"));
        }
        if self.model.blocks.is_empty() {
            return Err(Error::config("model needs at least one conv block"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr.initial.is_finite() && self.lr.initial > 0.0) {
            return Err(Error::config("lr.initial must be positive and finite"));
        }
        if let Some(alpha_lr) = self.alpha_lr {
            if !(alpha_lr.is_finite() && alpha_lr > 0.0) {
                return Err(Error::config("alpha_lr must be positive and finite"));
            }
        }
        match self.lr.kind {
            LrKind::Step => {
                let step_ok = self.lr.step_size.is_some_and(|s| s >= 1);
                let gamma_ok = self
                    .lr
                    .gamma
                    .is_some_and(|g| g.is_finite() && g > 0.0);
                if !step_ok || !gamma_ok {
                    return Err(Error::config(
                        "step schedule requires step_size >= 1 and gamma > 0",
                    ));
                }
            }
            LrKind::Cosine => {
                if self.lr.step_size.is_some() || self.lr.gamma.is_some() {
                    return Err(Error::config(
                        "cosine schedule takes no step_size/gamma",
                    ));
                }
            }
        }
        self.model_spec().validate()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset.kind {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input: self.input_shape(),
            classes: data::NUM_CLASSES,
            blocks: self
                .model
                .blocks
                .iter()
                .map(|b| ConvBlockSpec {
                    out_channels: b.out_channels,
                    kernel: b.kernel,
                    stride: b.stride,
                    pad: b.pad,
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset.kind {
            DatasetKind::Mnist => data::load_mnist(
                &data::MnistFiles::in_dir(&self.dataset.dir),
                self.dataset.train_subset,
                self.dataset.test_subset,
                self.seed,
            ),
            DatasetKind::Cifar10 => data::load_cifar10(
                &data::Cifar10Files::in_dir(&self.dataset.dir),
                self.dataset.train_subset,
                self.dataset.test_subset,
                self.seed,
            ),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub epoch: usize,
    pub group: String,
    pub abs_mean: f64,
}

/// Snapshot of one adaptive layer's scalars at the start of an epoch, so the
/// epoch-0 row shows the initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow {
    pub epoch: usize,
    pub layer: String,
    pub alphas: Vec<f32>,
    pub slope: f32,
    pub bn: Option<(f32, f32)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRow>,
    pub grads: Vec<GradRow>,
    pub alphas: Vec<AlphaRow>,
    pub repact_layers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GradCurve {
    pub group: String,
    /// One absolute-mean gradient per epoch.
    pub values: Vec<f64>,
}

impl MetricsLog {
    /// Ordered (epoch, α, t) rows for one adaptive layer.
    pub fn alpha_trajectory(&self, layer: &str) -> Result<Vec<&AlphaRow>> {
        if !self.repact_layers.iter().any(|l| l == layer) {
            return Err(Error::invalid(format!(
                "unknown adaptive activation layer '{layer}' (have: {})",
                self.repact_layers.join(", ")
            )));
        }
        Ok(self.alphas.iter().filter(|r| r.layer == layer).collect())
    }

    /// Per-parameter-group |gradient| means over the epochs, in the model's
    /// parameter order.
    pub fn grad_magnitude_curves(&self) -> Vec<GradCurve> {
        let mut order: Vec<&str> = Vec::new();
        for row in &self.grads {
            if !order.contains(&row.group.as_str()) {
                order.push(&row.group);
            }
        }
        order
            .into_iter()
            .map(|group| GradCurve {
                group: group.to_string(),
                values: self
                    .grads
                    .iter()
                    .filter(|r| r.group == group)
                    .map(|r| r.abs_mean)
                    .collect(),
            })
            .collect()
    }

    pub fn train_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_top1,lr\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.test_top1, r.lr);
        }
        out
    }

    pub fn grads_csv(&self) -> String {
        let mut out = String::from("epoch,group,abs_mean_grad\n");
        for r in &self.grads {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.group, r.abs_mean);
        }
        out
    }

    pub fn alpha_csv(&self) -> String {
        let k = self.alphas.first().map_or(4, |r| r.alphas.len());
        let mut out = String::from("epoch,layer");
        for i in 0..k {
            let _ = write!(out, ",a{i}");
        }
        out.push_str(",t,bn_gamma,bn_beta\n");
        for r in &self.alphas {
            let _ = write!(out, "{},{}", r.epoch, r.layer);
            for a in &r.alphas {
                let _ = write!(out, ",{a}");
            }
            let _ = write!(out, ",{}", r.slope);
            match r.bn {
                Some((g, b)) => {
                    let _ = writeln!(out, ",{g},{b}");
                }
                None => {
                    let _ = writeln!(out, ",,");
                }
            }
        }
        out
    }

    /// Write `train.csv`, `grads.csv`, and `alpha.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("train.csv", self.train_csv()),
            ("grads.csv", self.grads_csv()),
            ("alpha.csv", self.alpha_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

/// Parse an `alpha.csv` back into rows (used by the curves exporter).
pub fn load_alpha_csv(path: &Path) -> Result<Vec<AlphaRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, 0, "empty alpha.csv"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let k = columns.iter().filter(|c| c.starts_with('a') && c[1..].chars().all(|ch| ch.is_ascii_digit())).count();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 5 {
            return Err(Error::format(
                path,
                0,
                format!("alpha.csv line {}: expected {} fields, got {}", lineno + 2, k + 5, fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f32> {
            s.parse::<f32>()
                .map_err(|e| Error::format(path, 0, format!("alpha.csv line {}: {e}", lineno + 2)))
        };
        let epoch: usize = fields[0]
            .parse()
            .map_err(|e| Error::format(path, 0, format!("alpha.csv line {}: {e}", lineno + 2)))?;
        let alphas: Vec<f32> = fields[2..2 + k]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_>>()?;
        let slope = parse(fields[2 + k])?;
        let bn = if fields[3 + k].is_empty() {
            None
        } else {
            Some((parse(fields[3 + k])?, parse(fields[4 + k])?))
        };
        rows.push(AlphaRow {
            epoch,
            layer: fields[1].to_string(),
            alphas,
            slope,
            bn,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutput {
    pub model: TinyCnn<f32>,
    pub metrics: MetricsLog,
    pub final_test_top1: f64,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64 ^ (epoch as u64).wrapping_mul(0xa24b_aed4_963e_e407)
}

/// Run the full experiment: SGD with momentum 0.9, the configured schedule,
/// weight decay on conv/linear weights, per-epoch metrics. Aborts with a
/// numeric error naming the epoch and step if the loss leaves the floats.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutput> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    train_on(config, &dataset)
}

/// Same as [`train`] but with a pre-loaded dataset (the test suites reuse one
/// dataset across many runs).
pub fn train_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let mut model = TinyCnn::<f32>::init(config.model_spec(), config.seed)?;
    let infos = model.param_infos();
    let mut velocity: Vec<Tensor<f32>> = infos
        .iter()
        .map(|p| Tensor::zeros(model.param_value(p.id).shape()))
        .collect::<Result<_>>()?;

    let mut metrics = MetricsLog {
        repact_layers: model.repact_layer_names(),
        ..Default::default()
    };

    let n_train = dataset.train.len();
    let momentum = SGD_MOMENTUM as f32;
    let decay = WEIGHT_DECAY as f32;

    for epoch in 0..config.epochs {
        snapshot_alphas(&model, epoch, &mut metrics);
        let lr_epoch = config.lr.at(epoch, config.epochs);
        let alpha_lr = config.alpha_lr.unwrap_or(lr_epoch);

        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(config.seed, epoch)));

        let mut loss_sum = 0.0f64;
        let mut grad_sums: Vec<f64> = vec![0.0; infos.len()];
        let steps = order.chunks(config.batch_size).len();

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (batch, labels) = dataset.train.batch(chunk);
            let mut tape = Tape::<f32>::new();
            let leaves: Vec<_> = infos
                .iter()
                .map(|p| tape.param(model.param_value(p.id)))
                .collect();
            let x = tape.constant(batch);
            let logits = model.build_logits(&mut tape, &leaves, x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels, config.label_smoothing)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "loss became {loss_value} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss_value as f64;
            tape.backward(loss)?;

            for (i, info) in infos.iter().enumerate() {
                let Some(grad) = tape.grad(leaves[i]) else {
                    continue;
                };
                let mut g = grad.clone();
                let mut p = model.param_value(info.id);
                if info.weight_decay {
                    for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += decay * pv;
                    }
                }
                let abs_mean: f64 = g
                    .data()
                    .iter()
                    .map(|v| v.abs() as f64)
                    .sum::<f64>()
                    / g.numel() as f64;
                grad_sums[i] += abs_mean;
                let lr = if matches!(info.id, ParamId::ActAlphas(_) | ParamId::ActSlope(_)) {
                    alpha_lr
                } else {
                    lr_epoch
                } as f32;
                let v = &mut velocity[i];
                for ((vv, &gv), pv) in v
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(p.data_mut())
                {
                    *vv = momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
                if p.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric(format!(
                        "parameter {} became non-finite at epoch {epoch}, step {step}",
                        info.name
                    )));
                }
                model.set_param(info.id, p)?;
            }

            if config.log_cadence > 0 && step % config.log_cadence == 0 {
                eprintln!(
                    "epoch {epoch} step {step}/{steps} loss {loss_value:.4} lr {lr_epoch:.5}"
                );
            }
        }

        let test_top1 = evaluate_split(&model, &dataset.test, false)?;
        metrics.epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / steps as f64,
            test_top1,
            lr: lr_epoch,
        });
        for (i, info) in infos.iter().enumerate() {
            metrics.grads.push(GradRow {
                epoch,
                group: info.name.clone(),
                abs_mean: grad_sums[i] / steps as f64,
            });
        }
    }

    let final_test_top1 = metrics.epochs.last().map_or(0.0, |r| r.test_top1);
    Ok(TrainOutput {
        model,
        metrics,
        final_test_top1,
    })
}

fn snapshot_alphas(model: &TinyCnn<f32>, epoch: usize, metrics: &mut MetricsLog) {
    for (i, _) in model.blocks.iter().enumerate() {
        if let Some(act) = model.repact_params(i) {
            metrics.alphas.push(AlphaRow {
                epoch,
                layer: format!("block{i}.act"),
                alphas: act.alphas.clone(),
                slope: act.prelu_slope,
                bn: act.bn.as_ref().map(|bn| (bn.gamma, bn.beta)),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Inference-mode logits for a whole split, `[N, classes]`. With
/// `fused = true` every activation is replaced by its fused piecewise form
/// before evaluation.
pub fn predict_logits(model: &TinyCnn<f32>, split: &DatasetSplit, fused: bool) -> Result<Tensor<f32>> {
    let polys = if fused {
        Some(
            model
                .fuse_activations()?
                .into_iter()
                .map(|(_, p)| p)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let classes = model.spec.classes;
    let mut out = Vec::with_capacity(split.len() * classes);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, _) = split.batch(chunk);
        let logits = model.forward_eval(&batch, polys.as_deref())?;
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![split.len(), classes], out)
}

pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Top-1 accuracy in percent.
pub fn evaluate_split(model: &TinyCnn<f32>, split: &DatasetSplit, fused: bool) -> Result<f64> {
    let logits = predict_logits(model, split, fused)?;
    let preds = argmax_rows(&logits);
    let correct = preds
        .iter()
        .zip(&split.labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(100.0 * correct as f64 / split.len() as f64)
}
