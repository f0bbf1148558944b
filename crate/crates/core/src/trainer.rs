//! Adam training loop with a two-phase learning-rate schedule.
//!
//! Each batch is processed one sample per tape. Per-sample gradients may be
//! computed in parallel but are always summed in batch order, so the result
//! does not depend on the thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataio::{augment_flip, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::{Real, Tape, Tensor};

pub const LOG_HEADER: &str = "epoch,step,loss,lr,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase1_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Random horizontal flips during training.
    pub augment: bool,
    /// Worker threads for per-sample gradients; 1 is strictly sequential.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            lr_phase1: 5e-5,
            lr_phase2: 5e-6,
            phase1_epochs: 15,
            weight_decay: 5e-4,
            batch_size: 8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            augment: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// The published protocol: 24 epochs, 5e-5 dropping to 5e-6 after 15.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Short schedule for small from-scratch models on 64×64 inputs.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            lr_phase1: 3e-3,
            lr_phase2: 3e-4,
            phase1_epochs: 7,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.phase1_epochs > self.epochs {
            return bad(format!("phase1_epochs {} exceeds epochs {}", self.phase1_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive".into());
        }
        for (name, v) in [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase2", self.lr_phase2),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(
            "lr_schedule",
            format!("epoch {epoch} is outside 0..{}", cfg.epochs),
        ));
    }
    Ok(if epoch < cfg.phase1_epochs {
        cfg.lr_phase1
    } else {
        cfg.lr_phase2
    })
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adam_step<S: Real>(
    params: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid("adam_step", format!("learning rate {lr}")));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = S::of(1.0 - b1.powi(t));
    let c2 = S::of(1.0 - b2.powi(t));
    let (b1, b2, eps) = (S::of(b1), S::of(b2), S::of(cfg.adam_eps));
    let lr_s = S::of(lr);
    let decay = S::of(lr * cfg.weight_decay);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (S::one() - b1) * g[k];
            v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
            *w -= decay * *w;
            *w -= lr_s * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Global optimizer step, starting at 0.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.step, self.loss, self.lr, self.wall_ms)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Per-epoch checkpoints followed by the final one, when an output
    /// directory was given.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{:03}.ckpt", epoch + 1)
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTICS_CHECKPOINT: &str = "diagnostics.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// BCE loss and parameter gradients for one sample, on a fresh tape.
pub fn sample_gradients<S: Real>(model: &Model<S>, sample: &Sample<S>) -> Result<(S, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let shape = |t: &Tensor<S>| [1].into_iter().chain(t.shape().iter().copied()).collect::<Vec<_>>();
    let x = tape.constant(sample.image.reshape(shape(&sample.image))?);
    let y = tape.constant(sample.mask.reshape(shape(&sample.mask))?);
    let logits = model.forward(&mut tape, &params, x)?;
    let loss = tape.bce_with_logits(logits, y)?;
    let value = tape.value(loss).item().expect("loss is a scalar");
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss on sample {}", sample.id)));
    }
    let mut grads = tape.backward(loss)?;
    let out = params
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((value, out))
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
pub fn batch_gradients<S: Real>(
    model: &Model<S>,
    batch: &[Sample<S>],
    pool: &rayon::ThreadPool,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let per_sample: Vec<_> = pool.install(|| batch.par_iter().map(|s| sample_gradients(model, s)).collect());
    let mut loss = S::zero();
    let mut total: Option<Vec<Tensor<S>>> = None;
    for result in per_sample {
        let (l, g) = result?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_assign(gi);
                }
            }
        }
    }
    let inv = S::one() / S::of(batch.len() as f64);
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.map(|v| v * inv))
        .collect();
    Ok(((loss * inv).as_f64(), grads))
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place.
///
/// With `out_dir`, writes `train_log.csv`, one checkpoint per epoch and
/// `final.ckpt`. A non-finite loss or gradient aborts training; the
/// parameters at that point are saved as `diagnostics.ckpt` first.
pub fn train<S: Real>(
    model: &mut Model<S>,
    dataset: &[Sample<S>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    train_with_progress(model, dataset, cfg, out_dir, |_| {})
}

/// Per-epoch summary handed to the progress callback.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress<S: Real>(
    model: &mut Model<S>,
    dataset: &[Sample<S>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid("train", e.to_string()))?;
    let mut state = AdamState::new(model.params());
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut step = 0;

    let abort = |model: &Model<S>, report: &TrainReport, err: Error| -> Error {
        if let Some(dir) = out_dir {
            // best effort: the original error matters more than a failed dump
            let _ = save_checkpoint(model, &dir.join(DIAGNOSTICS_CHECKPOINT));
            let _ = write_log(&dir.join(LOG_FILE), &report.log);
        }
        err
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<S>> = chunk
                .iter()
                .map(|&i| {
                    let coin: f64 = rng.gen();
                    if cfg.augment {
                        augment_flip(&dataset[i], coin)
                    } else {
                        dataset[i].clone()
                    }
                })
                .collect();
            let (loss, grads) = match batch_gradients(model, &batch, &pool) {
                Ok(v) => v,
                Err(e) => return Err(abort(model, &report, e)),
            };
            if let Err(e) = adam_step(model.params_mut(), &grads, &mut state, lr, cfg) {
                return Err(abort(model, &report, e));
            }
            report.log.push(LogRecord {
                epoch,
                step,
                loss,
                lr,
                wall_ms: start.elapsed().as_millis(),
            });
            step += 1;
        }
        let records: Vec<_> = report.log.iter().filter(|r| r.epoch == epoch).collect();
        on_epoch(&EpochSummary {
            epoch,
            mean_loss: records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
        if let Some(dir) = out_dir {
            let path = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(model, &path)?;
            report.checkpoints.push(path);
            write_log(&dir.join(LOG_FILE), &report.log)?;
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(model, &path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}
