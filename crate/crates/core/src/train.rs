//! Two-phase training protocol: per-epoch loop with paired augmentation,
//! masked normalization, gradient accumulation, the warmup + polynomial
//! schedule, best-validation checkpointing and line-delimited JSON logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::autodiff::{Graph, Mode, ParamStore};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::augment::{paired_augment, AugmentConfig};
use crate::data::{compute_norm_stats, normalize, NormStats, SamplePair};
use crate::decoder::{argmax_classes, resize_logits};
use crate::error::{BcafError, Result};
use crate::losses::{median_freq_weights, total_loss, LossConfig};
use crate::metrics::{iou_report, ConfusionTally, MetricsReport};
use crate::model::{inputs_from_sample, Model};
use crate::optim::{build_param_groups, AdamW, GradAccum};
use crate::schedule::lr_schedule;
use crate::util::derive_rng;

// RNG stream tags; every stream derives from (seed, tag, ...).
const STREAM_ORDER: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_MODEL: u64 = 3;

/// Optimization protocol configuration.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub lr_backbone_pretrained: f64,
    pub lr_backbone_random: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub poly_power: f64,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Off by default; the protocol does not clip gradients.
    pub grad_clip: Option<f64>,
    /// Accepted for config parity; this build computes in f64 only and
    /// rejects `true`.
    pub mixed_precision: bool,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 1e-4,
            lr_backbone_pretrained: 1e-5,
            lr_backbone_random: 1e-4,
            weight_decay: 0.01,
            warmup_epochs: 5,
            poly_power: 0.9,
            micro_batch: 2,
            accum_steps: 4,
            epochs: 200,
            seed: 40,
            grad_clip: None,
            mixed_precision: false,
            eval_interval: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.micro_batch == 0 || self.accum_steps == 0 {
            return Err(BcafError::Config("epochs, micro_batch and accum_steps must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(BcafError::Config(format!(
                "warmup_epochs {} must be smaller than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.mixed_precision {
            return Err(BcafError::Config(
                "mixed precision is not supported by this build; all computation is f64".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(BcafError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }
}

/// One log line per epoch.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochEvent {
    pub event: &'static str,
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

/// Result of one training phase.
pub struct TrainOutcome {
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub final_val_miou: f64,
    pub events: Vec<EpochEvent>,
    pub norm_stats: NormStats,
    pub class_weights: Vec<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Pixel frequencies per class over raw training labels.
pub fn class_frequencies(train: &[SamplePair], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes + 1];
    let mut total = 0u64;
    for s in train {
        for &m in s.mask.iter() {
            counts[m as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Evaluate a model over a split: normalize, forward in eval mode, resize
/// logits to the label grid, argmax, accumulate IoU.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[SamplePair],
    stats: &NormStats,
    num_classes: usize,
) -> Result<(MetricsReport, ConfusionTally)> {
    let mut tally = ConfusionTally::new(num_classes + 1);
    for s in samples {
        let normed = normalize(s, stats)?;
        let mut g = Graph::new();
        let inputs = inputs_from_sample(&mut g, &normed);
        let out = model.forward(&mut g, store, &inputs, Mode::Eval)?;
        let (mh, mw) = s.mask.dim();
        let logits = resize_logits(&mut g, out.logits, mh, mw);
        let pred = argmax_classes(g.value(logits));
        let labels = Array2::from_shape_fn((mh, mw), |(i, j)| s.mask[[i, j]] as usize);
        tally.update(&pred, &labels)?;
    }
    let report = iou_report(&tally, None)?;
    Ok((report, tally))
}

/// Everything train_phase needs besides the data.
pub struct TrainSetup<'a> {
    pub model: &'a Model,
    pub cfg: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub num_classes: usize,
    pub out_dir: Option<&'a Path>,
    pub config_hash: String,
    pub quiet: bool,
}

/// Train one phase; logs per-epoch events, tracks the best validation mIoU,
/// and writes `best.ckpt` / `last.ckpt` when an output directory is given.
pub fn train_phase(
    setup: &TrainSetup,
    store: &mut ParamStore,
    train: &[SamplePair],
    val: &[SamplePair],
) -> Result<TrainOutcome> {
    let cfg = setup.cfg;
    cfg.validate()?;
    if train.is_empty() {
        return Err(BcafError::Data("empty training split".into()));
    }
    let stats = compute_norm_stats(train)?;
    let freqs = class_frequencies(train, setup.num_classes);
    let weights = median_freq_weights(&freqs, 1e-6)?;
    let loss_cfg = LossConfig::new(weights.clone());
    build_param_groups(store)?;
    let mut adam = AdamW::new(
        store,
        cfg.lr_head,
        cfg.lr_backbone_pretrained,
        cfg.lr_backbone_random,
        cfg.weight_decay,
    );
    let batch = cfg.effective_batch();
    let steps_per_epoch = (train.len() / batch).max(1);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let warmup_steps = (steps_per_epoch * cfg.warmup_epochs) as u64;

    let mut log_file = match setup.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| BcafError::io(dir.display().to_string(), e))?;
            Some(
                std::fs::File::create(dir.join("log.jsonl"))
                    .map_err(|e| BcafError::io(dir.join("log.jsonl").display().to_string(), e))?,
            )
        }
        None => None,
    };

    let mut events = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut final_val = f64::NEG_INFINITY;
    let mut global_step = 0u64;
    let mut last_lr = 0.0f64;
    let mut accum = GradAccum::new(store);

    for epoch in 0..cfg.epochs {
        // Deterministic shuffle of sample indices for this epoch.
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut orng = derive_rng(cfg.seed, &[STREAM_ORDER, epoch as u64]);
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = orng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for step in 0..steps_per_epoch {
            accum.clear();
            let mut step_loss = 0.0f64;
            for within in 0..batch {
                let idx = order[step * batch + within];
                let mut arng = derive_rng(cfg.seed, &[STREAM_AUG, epoch as u64, idx as u64]);
                let aug = paired_augment(&train[idx], setup.augment, &mut arng)?;
                let normed = normalize(&aug, &stats)?;
                let model_rng = std::cell::RefCell::new(derive_rng(
                    cfg.seed,
                    &[STREAM_MODEL, epoch as u64, (step * batch + within) as u64],
                ));
                let mut g = Graph::new();
                let inputs = inputs_from_sample(&mut g, &normed);
                let out = model_forward_checked(setup.model, &mut g, store, &inputs, Mode::Train { rng: &model_rng })?;
                let (mh, mw) = normed.mask.dim();
                let logits = resize_logits(&mut g, out, mh, mw);
                let labels = Array2::from_shape_fn((mh, mw), |(i, j)| normed.mask[[i, j]] as usize);
                let loss = total_loss(&mut g, logits, &labels, &loss_cfg)?;
                let loss_val = g.scalar_value(loss);
                if !loss_val.is_finite() {
                    let gnorm = accum.global_norm();
                    return Err(BcafError::Training(format!(
                        "non-finite loss {loss_val} at epoch {epoch} step {step} (last lr {last_lr:.3e}, accumulated grad norm {gnorm:.3e})"
                    )));
                }
                step_loss += loss_val;
                let grads = g.backward(loss);
                accum.add(&grads, 1.0 / batch as f64);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = accum.global_norm();
                if norm > clip {
                    accum.scale_all(clip / norm);
                }
            }
            let mult = lr_schedule(global_step, total_steps, warmup_steps, cfg.poly_power)?;
            last_lr = cfg.lr_head * mult;
            adam.step(store, &accum, mult);
            global_step += 1;
            epoch_loss += step_loss;
            seen += batch;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;

        let do_eval = (epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs;
        let mut val_miou = None;
        if do_eval && !val.is_empty() {
            let (report, _) = evaluate(setup.model, store, val, &stats, setup.num_classes)?;
            val_miou = Some(report.miou);
            final_val = report.miou;
            if report.miou > best_val {
                best_val = report.miou;
                best_epoch = epoch + 1;
                if let Some(dir) = setup.out_dir {
                    let meta = CheckpointMeta {
                        epoch: (epoch + 1) as u64,
                        config_hash: setup.config_hash.clone(),
                        rng_seed: cfg.seed,
                        next_epoch: (epoch + 1) as u64,
                        val_miou: Some(report.miou),
                        norm_stats: Some(stats.clone()),
                        class_names: Vec::new(),
                    };
                    save_checkpoint(&dir.join("best.ckpt"), store, Some(&adam), &meta)?;
                }
            }
        }
        let event = EpochEvent {
            event: "epoch",
            epoch: epoch + 1,
            train_loss,
            lr: last_lr,
            val_miou,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&event)?;
            writeln!(f, "{line}").map_err(|e| BcafError::io("log.jsonl", e))?;
        }
        if !setup.quiet && (epoch % 20 == 0 || do_eval) {
            eprintln!(
                "epoch {:>4} loss {:.4} lr {:.2e} val_miou {}",
                epoch + 1,
                train_loss,
                last_lr,
                val_miou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        events.push(event);
    }

    if let Some(dir) = setup.out_dir {
        let meta = CheckpointMeta {
            epoch: cfg.epochs as u64,
            config_hash: setup.config_hash.clone(),
            rng_seed: cfg.seed,
            next_epoch: cfg.epochs as u64,
            val_miou: (final_val.is_finite()).then_some(final_val),
            norm_stats: Some(stats.clone()),
            class_names: Vec::new(),
        };
        save_checkpoint(&dir.join("last.ckpt"), store, Some(&adam), &meta)?;
    }
    Ok(TrainOutcome {
        best_val_miou: if best_val.is_finite() { best_val } else { f64::NAN },
        best_epoch,
        final_val_miou: if final_val.is_finite() { final_val } else { f64::NAN },
        events,
        norm_stats: stats,
        class_weights: weights,
        best_checkpoint: setup.out_dir.map(|d| d.join("best.ckpt")),
    })
}

fn model_forward_checked(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    inputs: &crate::model::ModelInputs,
    mode: Mode,
) -> Result<crate::autodiff::Var> {
    Ok(model.forward(g, store, inputs, mode)?.logits)
}
