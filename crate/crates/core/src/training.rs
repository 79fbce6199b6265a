//! Losses and training drivers.
//!
//! All drivers share [`fit`]: a temporal validation holdout, seeded
//! shuffled mini-batches, Adam, and early stopping on validation loss.
//! What differs is the objective applied to the head output.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::{make_batches, sort_by_time, MiniBatch, TrainingExample, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, ModelConfig};
use crate::tensor::{adam_step, dot, softmax_in_place, AdamConfig, Matrix};

const PROB_FLOOR: f64 = 1e-12;

pub fn onehot(label: usize, size: usize) -> Result<Vec<f64>> {
    if label == PADDING_INDEX || label >= size {
        return Err(Error::Index {
            index: label,
            max: size.saturating_sub(1),
        });
    }
    let mut v = vec![0.0; size];
    v[label] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to the logits (or the predicted vector).
    pub grad: Vec<f64>,
    /// Set when a probability had to be floored before taking the log.
    pub clamped: bool,
}

/// `−ln pred[label]` with the fused softmax gradient `pred − onehot`.
pub fn cross_entropy_loss(pred: &[f64], label: usize) -> Result<LossGrad> {
    if label == PADDING_INDEX || label >= pred.len() {
        return Err(Error::Index {
            index: label,
            max: pred.len().saturating_sub(1),
        });
    }
    let p = pred[label];
    let clamped = p < PROB_FLOOR;
    let loss = -p.max(PROB_FLOOR).ln();
    let mut grad = pred.to_vec();
    grad[label] -= 1.0;
    Ok(LossGrad {
        loss,
        grad,
        clamped,
    })
}

pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Precompute teacher distributions once instead of per batch.
    pub cache_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.2,
            temperature: 1.0,
            cache_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// `(1 − λ)·CE(softmax(s), label) + λ·CE(softmax(s/T), teacher)`, where
/// `teacher` is already tempered. Gradient is with respect to `s`.
pub fn distillation_loss(
    student_logits: &[f64],
    label: usize,
    teacher_probs: &[f64],
    cfg: &DistillConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    let mut p = student_logits.to_vec();
    softmax_in_place(&mut p);
    let hard = cross_entropy_loss(&p, label)?;
    if cfg.lambda == 0.0 {
        return Ok(hard);
    }
    if teacher_probs.len() != student_logits.len() {
        return Err(Error::Dimension {
            op: "distillation_loss",
            left: (1, student_logits.len()),
            right: (1, teacher_probs.len()),
        });
    }

    let t = cfg.temperature;
    let scaled: Vec<f64> = student_logits.iter().map(|x| x / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let mut soft_loss = 0.0;
    for (&q, &s) in teacher_probs.iter().zip(&scaled) {
        if q > 0.0 {
            soft_loss -= q * (s - log_z);
        }
    }

    let lambda = cfg.lambda;
    let grad = hard
        .grad
        .iter()
        .zip(&scaled)
        .zip(teacher_probs)
        .map(|((&g, &s), &q)| (1.0 - lambda) * g + lambda * ((s - log_z).exp() - q) / t)
        .collect();
    Ok(LossGrad {
        loss: (1.0 - lambda) * hard.loss + lambda * soft_loss,
        grad,
        clamped: hard.clamped,
    })
}

/// `1 − cos(pred, target)` and its gradient with respect to `pred`. A
/// zero prediction gets loss 1 and gradient `−target/‖target‖`.
pub fn cosine_loss(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    let nt = dot(target, target).sqrt();
    if !(nt > 0.0) {
        return Err(Error::data("cosine target has zero norm"));
    }
    let np = dot(pred, pred).sqrt();
    if np < 1e-12 {
        return Ok(LossGrad {
            loss: 1.0,
            grad: target.iter().map(|t| -t / nt).collect(),
            clamped: false,
        });
    }
    let cos = dot(pred, target) / (np * nt);
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -(t / (np * nt) - cos * p / (np * np)))
        .collect();
    Ok(LossGrad {
        loss: 1.0 - cos,
        grad,
        clamped: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            max_epochs: 20,
            early_stop_patience: 2,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the starting parameters (epoch 0).
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Everything except wall-clock timings.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.initial_val_loss.to_bits() == other.initial_val_loss.to_bits()
            && self.best_epoch == other.best_epoch
            && self.stopped_epoch == other.stopped_epoch
            && self.best_val_loss.to_bits() == other.best_val_loss.to_bits()
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
            })
    }

    /// `epoch train_loss val_loss seconds` per line.
    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| format!("{} {} {} {:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds))
            .collect()
    }

    /// Deterministic `key=value` summary; timings are in [`Self::timing_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("train_examples={}\n", self.train_examples));
        out.push_str(&format!("val_examples={}\n", self.val_examples));
        out.push_str(&format!("initial_val_loss={}\n", self.initial_val_loss));
        out.push_str(&format!("best_epoch={}\n", self.best_epoch));
        out.push_str(&format!("best_val_loss={}\n", self.best_val_loss));
        out.push_str(&format!("stopped_epoch={}\n", self.stopped_epoch));
        for e in &self.epochs {
            out.push_str(&format!("epoch.{}.train_loss={}\n", e.epoch, e.train_loss));
            out.push_str(&format!("epoch.{}.val_loss={}\n", e.epoch, e.val_loss));
        }
        out
    }

    pub fn timing_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!("epoch.{}.seconds={:.6}\n", e.epoch, e.seconds));
        }
        out.push_str(&format!("wall_seconds={:.6}\n", self.wall_seconds));
        out
    }
}

/// What the head output is scored against.
pub enum Objective<'a> {
    CrossEntropy,
    Distill {
        teacher: &'a Model,
        cfg: DistillConfig,
    },
    Cosine {
        targets: &'a Matrix,
        freeze_input_embedding: bool,
    },
}

impl Objective<'_> {
    fn needs_privileged(&self) -> bool {
        matches!(self, Objective::Distill { cfg, .. } if cfg.lambda > 0.0)
    }
}

/// Splits off the most recent `fraction` of examples (by session start) as
/// validation data.
pub fn temporal_holdout(
    mut examples: Vec<TrainingExample>,
    fraction: f64,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
    if examples.len() < 2 {
        return Err(Error::data("need at least two examples to hold out validation data"));
    }
    sort_by_time(&mut examples);
    let n_val = ((examples.len() as f64 * fraction).round() as usize).clamp(1, examples.len() - 1);
    let val = examples.split_off(examples.len() - n_val);
    Ok((examples, val))
}

/// Teacher distributions at the distillation temperature for every row
/// with a non-empty privileged sequence.
fn teacher_probs(teacher: &Model, batch: &MiniBatch, temperature: f64) -> Vec<Option<Vec<f64>>> {
    let (Some(inputs), Some(mask)) = (&batch.privileged_inputs, &batch.privileged_mask) else {
        return vec![None; batch.len()];
    };
    let w = batch.window;
    let rows: Vec<usize> = (0..batch.len())
        .filter(|&r| mask[r * w..(r + 1) * w].contains(&1))
        .collect();
    let mut out = vec![None; batch.len()];
    if rows.is_empty() {
        return out;
    }
    let sub_inputs: Vec<usize> = rows
        .iter()
        .flat_map(|&r| inputs[r * w..(r + 1) * w].iter().copied())
        .collect();
    let sub_mask: Vec<u8> = rows
        .iter()
        .flat_map(|&r| mask[r * w..(r + 1) * w].iter().copied())
        .collect();
    let pass = teacher.forward(&sub_inputs, &sub_mask, w);
    for (i, &r) in rows.iter().enumerate() {
        out[r] = Some(tempered_softmax(pass.output().row(i), temperature));
    }
    out
}

fn batch_loss(
    objective: &Objective,
    output: &Matrix,
    batch: &MiniBatch,
    teacher: Option<&[Option<Vec<f64>>]>,
) -> Result<(f64, Matrix)> {
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_out = Matrix::zeros(n, output.cols());
    for r in 0..n {
        let label = batch.labels[r];
        let lg = match objective {
            Objective::CrossEntropy => {
                let mut p = output.row(r).to_vec();
                softmax_in_place(&mut p);
                cross_entropy_loss(&p, label)?
            }
            Objective::Distill { cfg, .. } => {
                match teacher.and_then(|t| t[r].as_deref()) {
                    Some(q) => distillation_loss(output.row(r), label, q, cfg)?,
                    // No privileged future: hard label only.
                    None => {
                        let mut p = output.row(r).to_vec();
                        softmax_in_place(&mut p);
                        cross_entropy_loss(&p, label)?
                    }
                }
            }
            Objective::Cosine { targets, .. } => cosine_loss(output.row(r), targets.row(label))?,
        };
        total += lg.loss;
        for (d, g) in d_out.row_mut(r).iter_mut().zip(&lg.grad) {
            *d = g * scale;
        }
    }
    Ok((total * scale, d_out))
}

/// Mean per-example validation loss (hard-label CE for softmax heads,
/// cosine loss for the embedding head), no dropout.
pub fn validation_loss(model: &Model, examples: &[TrainingExample], batch_size: usize, objective: &Objective) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    let batches = crate::dataset::batches_in_order(examples, &order, batch_size, model.config.window, false);
    let hard = match objective {
        Objective::Cosine { .. } => objective,
        _ => &Objective::CrossEntropy,
    };
    let mut total = 0.0;
    for b in &batches {
        let pass = model.forward(&b.inputs, &b.mask, b.window);
        let (loss, _) = batch_loss(hard, pass.output(), b, None)?;
        total += loss * b.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains `model` in place of a fresh copy and returns the parameters of
/// the epoch with the lowest validation loss (epoch 0 = the starting
/// parameters).
pub fn fit(
    mut model: Model,
    examples: Vec<TrainingExample>,
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if let Objective::Distill { cfg: d, .. } = objective {
        d.validate()?;
    }
    let started = Instant::now();
    let (train, val) = temporal_holdout(examples, cfg.validation_fraction)?;
    let window = model.config.window;

    let teacher_cache: Option<Vec<Option<Vec<f64>>>> = match objective {
        Objective::Distill { teacher, cfg: d } if d.cache_teacher && d.lambda > 0.0 => {
            let order: Vec<usize> = (0..train.len()).collect();
            let mut cache = Vec::with_capacity(train.len());
            for b in crate::dataset::batches_in_order(&train, &order, cfg.batch_size, window, true) {
                cache.extend(teacher_probs(teacher, &b, d.temperature));
            }
            Some(cache)
        }
        _ => None,
    };

    let frozen_embedding = matches!(
        objective,
        Objective::Cosine {
            freeze_input_embedding: true,
            ..
        }
    );
    let mut adam = AdamConfig {
        step_count: 0,
        ..cfg.adam
    };
    model.params.iter_mut().into_iter().for_each(|p| {
        p.zero_grad();
        p.reset_optimizer_state();
    });

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11_0000_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let initial_val_loss = validation_loss(&model, &val, cfg.batch_size, objective)?;
    let mut best_val = initial_val_loss;
    let mut best_epoch = 0;
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let shuffle_seed: u64 = master.gen();
        let batches = make_batches(&train, cfg.batch_size, window, shuffle_seed, objective.needs_privileged());
        let mut loss_sum = 0.0;
        for batch in &batches {
            let pass = model.forward_train(&batch.inputs, &batch.mask, batch.window, &mut dropout_rng);
            let teacher: Option<Vec<Option<Vec<f64>>>> = match (objective, &teacher_cache) {
                (_, Some(cache)) => Some(batch.example_indices.iter().map(|&i| cache[i].clone()).collect()),
                (Objective::Distill { teacher, cfg: d }, None) if d.lambda > 0.0 => {
                    Some(teacher_probs(teacher, batch, d.temperature))
                }
                _ => None,
            };
            let (loss, d_out) = batch_loss(objective, pass.output(), batch, teacher.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;

            model.backward(&pass, &d_out);
            adam.begin_step();
            for p in model.params.iter_mut() {
                if !(frozen_embedding && p.name == "embedding") {
                    adam_step(p, &adam)?;
                }
                p.zero_grad();
            }
        }

        let val_loss = validation_loss(&model, &val, cfg.batch_size, objective)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss at epoch {epoch}")));
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        stopped_epoch = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params.clone();
        } else if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }

    best_params.iter_mut().into_iter().for_each(|p| {
        p.zero_grad();
        p.reset_optimizer_state();
    });
    model.params = best_params;
    let report = TrainReport {
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_epoch,
        train_examples: train.len(),
        val_examples: val.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Softmax model on cross-entropy with embedding dropout.
pub fn train_m1(
    examples: Vec<TrainingExample>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if model_cfg.head != HeadKind::Softmax {
        return Err(Error::config("train_m1 needs the softmax head"));
    }
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    let (model, report) = fit(model, examples, cfg, &Objective::CrossEntropy)?;
    Ok((Checkpoint::new(model), report))
}

/// Continues training `base` on `recent` examples with a fresh optimizer.
pub fn finetune_m2(
    base: &Checkpoint,
    recent: Vec<TrainingExample>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    base.check_config(model_cfg)?;
    let (model, report) = fit(base.model.clone(), recent, cfg, &Objective::CrossEntropy)?;
    Ok((Checkpoint::new(model), report))
}

/// The teacher's view of an example: its reversed future predicts the
/// same label.
pub fn privileged_examples(examples: &[TrainingExample]) -> Vec<TrainingExample> {
    examples
        .iter()
        .filter(|e| !e.privileged.is_empty())
        .map(|e| TrainingExample {
            prefix: e.privileged.clone(),
            label: e.label,
            privileged: Vec::new(),
            session_start: e.session_start,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub teacher: Checkpoint,
    pub student: Checkpoint,
    pub teacher_report: TrainReport,
    pub student_report: TrainReport,
}

/// Trains a teacher on privileged sequences, then a student on the
/// blended hard/soft objective.
pub fn train_m3(
    examples: Vec<TrainingExample>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    distill: &DistillConfig,
) -> Result<DistillOutcome> {
    distill.validate()?;
    let teacher_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let (teacher, teacher_report) = train_m1(privileged_examples(&examples), model_cfg, &teacher_cfg)?;
    let student = Model::new(model_cfg.clone(), cfg.seed)?;
    let objective = Objective::Distill {
        teacher: &teacher.model,
        cfg: *distill,
    };
    let (student, student_report) = fit(student, examples, cfg, &objective)?;
    Ok(DistillOutcome {
        teacher,
        student: Checkpoint::new(student),
        teacher_report,
        student_report,
    })
}

/// Embedding-output model trained with cosine loss against frozen item
/// embeddings (typically an M1 embedding table). The input table starts
/// from the same matrix.
pub fn train_m4(
    examples: Vec<TrainingExample>,
    model_cfg: &ModelConfig,
    targets: &Matrix,
    cfg: &TrainConfig,
    freeze_input_embedding: bool,
) -> Result<(Checkpoint, TrainReport)> {
    if model_cfg.head != HeadKind::Embedding {
        return Err(Error::config("train_m4 needs the embedding head"));
    }
    let want = (model_cfg.vocab_size_with_pad, model_cfg.embed_dim);
    if targets.shape() != want {
        return Err(Error::Dimension {
            op: "train_m4 targets",
            left: targets.shape(),
            right: want,
        });
    }
    let degenerate: Vec<usize> = (1..targets.rows())
        .filter(|&i| !(dot(targets.row(i), targets.row(i)) > 0.0))
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::data(format!("zero target embeddings for items {degenerate:?}")));
    }

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    model.params.embedding.value = targets.clone();
    model.params.embedding.value.row_mut(PADDING_INDEX).fill(0.0);
    let objective = Objective::Cosine {
        targets,
        freeze_input_embedding,
    };
    let (model, report) = fit(model, examples, cfg, &objective)?;
    Ok((
        Checkpoint {
            model,
            item_targets: Some(targets.clone()),
        },
        report,
    ))
}
