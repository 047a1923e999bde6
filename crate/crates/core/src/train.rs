//! Training harness: AdamW with decoupled weight decay, linear warmup into a
//! cosine learning-rate schedule, label-smoothed cross entropy, best-model
//! checkpointing, evaluation, and the ablation runner.

use crate::checkpoint;
use crate::config;
use crate::data::{BatchSource, Split};
use crate::error::{Error, Result};
use crate::model::{ClassTokenPos, KwmModel, ModelConfig};
use crate::tensor::{cross_entropy_label_smoothed, Parameter, Tensor};
use crate::bimamba::DirectionalityMode;
use serde::Serialize;
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub warmup_epochs: usize,
    pub weight_decay: f32,
    pub label_smoothing: f32,
    pub seed: u64,
    pub runs: usize,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f32>,
    /// Stop once per-epoch train accuracy reaches this percentage.
    pub early_stop_train_acc: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr0: 1e-3,
            warmup_epochs: 10,
            weight_decay: 0.1,
            label_smoothing: 0.1,
            seed: 42,
            runs: 3,
            grad_clip: None,
            early_stop_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return Err(Error::Config(
                "epochs, batch_size and runs must be positive".into(),
            ));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to lr0 over the warmup epochs, then cosine decay to 0
/// over the remaining steps. Continuous at the junction (both sides hit lr0).
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f32 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warm {
        return cfg.lr0 * step as f32 / warm as f32;
    }
    let span = (total - warm).max(1);
    let progress = ((step - warm) as f32 / span as f32).min(1.0);
    cfg.lr0 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Decay applies to weight matrices only; norms, biases, the scan's A and D
/// parameters, and the class/positional embeddings are exempt.
pub fn wants_decay(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !matches!(last, "bias" | "gain" | "a" | "d" | "class" | "pos")
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    state: HashMap<String, Moments>,
    step_count: u32,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
            step_count: 0,
        }
    }

    /// One update over `params` at learning rate `lr`, reading the gradients
    /// accumulated on each parameter. A missing gradient counts as zero.
    pub fn step(&mut self, params: &[Parameter], lr: f32) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for p in params {
            let value = p.value();
            let grad = value.grad().unwrap_or_else(|| vec![0.0; value.numel()]);
            if let Some(i) = grad.iter().position(|g| g.is_nan()) {
                return Err(Error::Numeric(format!(
                    "NaN gradient in parameter `{}` at index {i}",
                    p.name()
                )));
            }
            let st = self.state.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let decay = if wants_decay(p.name()) {
                self.weight_decay
            } else {
                0.0
            };
            let mut next = value.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                next[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * next[i]);
            }
            p.set_value(Tensor::from_vec(&value.shape().to_vec(), next)?);
        }
        Ok(())
    }
}

/// Scales all gradients so their global norm does not exceed `max_norm`.
fn clip_gradients(params: &[Parameter], max_norm: f32) {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += (v as f64) * (v as f64);
            }
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params {
            p.scale_grad(factor);
        }
    }
}

/// Per-run training record.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub label: String,
    /// Mean train loss per epoch.
    pub train_loss: Vec<f32>,
    /// Train accuracy (percent) per epoch, from the training forward passes.
    pub train_accuracy: Vec<f32>,
    /// Validation accuracy (percent) per epoch.
    pub val_accuracy: Vec<f32>,
    /// Test accuracy (percent) of the best checkpoint.
    pub test_accuracy: f32,
    pub parameter_count: usize,
    pub wall_secs: f64,
    pub config_hash: String,
    pub steps: usize,
}

/// Anything that maps a feature batch to logits. Lets evaluation run against
/// stub models in tests.
pub trait Classifier {
    fn classify_batch(&self, features: &Tensor) -> Result<Tensor>;
}

impl Classifier for KwmModel {
    fn classify_batch(&self, features: &Tensor) -> Result<Tensor> {
        self.classify(features)
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Argmax accuracy (percent) of a model over a split.
pub fn evaluate(
    model: &dyn Classifier,
    data: &dyn BatchSource,
    split: Split,
    batch_size: usize,
) -> Result<f32> {
    if data.len_of(split) == 0 {
        return Err(Error::Usage(format!(
            "evaluate: split {} is empty",
            split.as_str()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in data.batches(split, batch_size, 0)? {
        let batch = batch?;
        let logits = model.classify_batch(&batch.features)?;
        correct += count_correct(&logits, &batch.labels);
        total += batch.labels.len();
    }
    Ok(100.0 * correct as f32 / total as f32)
}

/// Full training loop for one run: seeded model build, AdamW with the warmup
/// + cosine schedule, label-smoothed cross entropy, best-validation
/// checkpointing (when `out_dir` is given), and a final test evaluation with
/// the best checkpoint.
///
/// On divergence (non-finite loss) the error is returned and the best
/// checkpoint written so far stays on disk.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "model expects {} classes but the data source provides {}",
            model_cfg.num_classes,
            data.num_classes()
        )));
    }

    let started = Instant::now();
    let model = KwmModel::new(model_cfg, train_cfg.seed)?;
    let params = model.parameters();
    let mut opt = AdamW::new(train_cfg.weight_decay);
    let ntrain = data.len_of(Split::Train);
    if ntrain == 0 {
        return Err(Error::Usage("train split is empty".into()));
    }
    let steps_per_epoch = ntrain.div_ceil(train_cfg.batch_size);
    let ckpt_path = out_dir.map(|d| d.join("best.ckpt"));
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    if let Some(p) = &metrics_path {
        std::fs::write(p, "epoch,train_loss,train_acc,val_acc,lr\n")?;
    }

    let has_val = data.len_of(Split::Val) > 0;
    let mut report = RunReport {
        label: String::new(),
        train_loss: Vec::new(),
        train_accuracy: Vec::new(),
        val_accuracy: Vec::new(),
        test_accuracy: 0.0,
        parameter_count: model.param_count(),
        wall_secs: 0.0,
        config_hash: config::hash_for(model_cfg, train_cfg),
        steps: 0,
    };
    let mut best_val = f32::NEG_INFINITY;
    let mut step = 0usize;

    'epochs: for epoch in 0..train_cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut last_lr = 0.0f32;
        for batch in data.batches(Split::Train, train_cfg.batch_size, epoch)? {
            let batch = batch?;
            let lr = lr_schedule(step, steps_per_epoch, train_cfg);
            last_lr = lr;
            let logits = model.forward(&batch.features)?;
            let loss = cross_entropy_label_smoothed(
                &logits,
                &batch.labels,
                train_cfg.label_smoothing,
            )?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at step {step} (loss {loss_value}); last good checkpoint retained"
                )));
            }
            correct += count_correct(&logits, &batch.labels);
            loss_sum += loss_value as f64 * batch.labels.len() as f64;
            seen += batch.labels.len();
            loss.backward()?;
            if let Some(c) = train_cfg.grad_clip {
                clip_gradients(&params, c);
            }
            opt.step(&params, lr)?;
            model.zero_grads();
            step += 1;
        }
        let train_loss = (loss_sum / seen.max(1) as f64) as f32;
        let train_acc = 100.0 * correct as f32 / seen.max(1) as f32;
        report.train_loss.push(train_loss);
        report.train_accuracy.push(train_acc);

        let val_acc = if has_val {
            evaluate(&model, data, Split::Val, train_cfg.batch_size)?
        } else {
            train_acc
        };
        report.val_accuracy.push(val_acc);
        if val_acc >= best_val {
            best_val = val_acc;
            if let Some(p) = &ckpt_path {
                checkpoint::save(p, &model, &[])?;
            }
        }
        if let Some(p) = &metrics_path {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{epoch},{train_loss},{train_acc},{val_acc},{last_lr}")?;
        }
        if let Some(target) = train_cfg.early_stop_train_acc {
            if train_acc >= target {
                break 'epochs;
            }
        }
    }
    report.steps = step;

    report.test_accuracy = if data.len_of(Split::Test) > 0 {
        // evaluate the best checkpoint when one exists, else the final model
        match &ckpt_path {
            Some(p) if p.exists() => {
                let (best_model, _) = checkpoint::load(p)?;
                evaluate(&best_model, data, Split::Test, train_cfg.batch_size)?
            }
            _ => evaluate(&model, data, Split::Test, train_cfg.batch_size)?,
        }
    } else {
        *report.train_accuracy.last().unwrap_or(&0.0)
    };
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Averages `cfg.runs` independent runs (seeds `seed`, `seed+1`, ...): curves
/// elementwise over the common prefix, accuracies by mean, wall time summed.
pub fn train_runs(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    let mut reports = Vec::with_capacity(train_cfg.runs);
    for run in 0..train_cfg.runs {
        let mut cfg = train_cfg.clone();
        cfg.seed = train_cfg.seed + run as u64;
        let run_dir = if train_cfg.runs == 1 {
            out_dir.map(Path::to_path_buf)
        } else {
            out_dir.map(|d| d.join(format!("run{run}")))
        };
        reports.push(train(model_cfg, &cfg, data, run_dir.as_deref())?);
    }
    if reports.len() == 1 {
        return Ok(reports.pop().unwrap());
    }
    let epochs = reports.iter().map(|r| r.train_loss.len()).min().unwrap_or(0);
    let mean_curve = |f: &dyn Fn(&RunReport) -> &Vec<f32>| -> Vec<f32> {
        (0..epochs)
            .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f32>() / reports.len() as f32)
            .collect()
    };
    Ok(RunReport {
        label: format!("mean of {} runs", reports.len()),
        train_loss: mean_curve(&|r| &r.train_loss),
        train_accuracy: mean_curve(&|r| &r.train_accuracy),
        val_accuracy: mean_curve(&|r| &r.val_accuracy),
        test_accuracy: reports.iter().map(|r| r.test_accuracy).sum::<f32>() / reports.len() as f32,
        parameter_count: reports[0].parameter_count,
        wall_secs: reports.iter().map(|r| r.wall_secs).sum(),
        config_hash: reports[0].config_hash.clone(),
        steps: reports.iter().map(|r| r.steps).max().unwrap_or(0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Patch,
    TokenPos,
    Directionality,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<AblationAxis> {
        match s.to_ascii_lowercase().as_str() {
            "patch" => Ok(AblationAxis::Patch),
            "token_pos" | "token-pos" | "token" => Ok(AblationAxis::TokenPos),
            "directionality" | "direction" => Ok(AblationAxis::Directionality),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// Patch shapes swept by the patch axis; every entry divides (40, 98).
pub const PATCH_SWEEP: [(usize, usize); 4] = [(40, 1), (1, 98), (8, 7), (4, 14)];

/// Runs one sweep along the requested axis, one report per cell.
pub fn ablate(
    axis: AblationAxis,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    data: &dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<Vec<RunReport>> {
    let cells: Vec<(String, ModelConfig)> = match axis {
        AblationAxis::Patch => PATCH_SWEEP
            .iter()
            .map(|&(f, t)| {
                let mut cfg = base_model.clone();
                cfg.patch_f = f;
                cfg.patch_t = t;
                (format!("patch-{f}x{t}"), cfg)
            })
            .collect(),
        AblationAxis::TokenPos => [ClassTokenPos::Mid, ClassTokenPos::Head, ClassTokenPos::End]
            .iter()
            .map(|&pos| {
                let mut cfg = base_model.clone();
                cfg.class_token_pos = pos;
                (format!("token-{}", pos.as_str()), cfg)
            })
            .collect(),
        AblationAxis::Directionality => [
            DirectionalityMode::BiBi,
            DirectionalityMode::FoBi,
            DirectionalityMode::FoFo,
        ]
        .iter()
        .map(|&mode| {
            let mut cfg = base_model.clone();
            cfg.directionality = mode;
            (format!("mamba-{}", mode.as_str()), cfg)
        })
        .collect(),
    };
    let mut out = Vec::with_capacity(cells.len());
    for (label, cfg) in cells {
        cfg.validate()?;
        let cell_dir = out_dir.map(|d| d.join(&label));
        let mut report = train_runs(&cfg, base_train, data, cell_dir.as_deref())?;
        report.label = label;
        out.push(report);
    }
    Ok(out)
}
