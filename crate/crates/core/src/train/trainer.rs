//! The training loop, its CSV log and the synthetic overfit harness.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::psnr;
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::ImageTensor;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::data::{batch_for_step, Batch, Dataset};
use crate::train::optim::{AdamW, AdamWConfig};
use crate::train::schedule::cosine_lr;

pub const LOG_HEADER: &str = "step,lr,loss,loss_main,loss_sr";

/// Initial learning rate for the synthetic overfit harness. Two tiny images
/// and 500 steps tolerate a much larger rate than full-scale training.
pub const OVERFIT_LR_INIT: f64 = 6e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Save every this many steps; 0 saves only the final checkpoint.
    pub checkpoint_interval: usize,
    pub flips: bool,
    /// Log to stderr every this many steps; 0 disables progress lines.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 2,
            patch_size: 64,
            lr_init: 5e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            seed: 0,
            dataset: None,
            checkpoint_interval: 500,
            flips: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let mut errs = Vec::new();
        if self.total_steps == 0 {
            errs.push("total_steps must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.patch_size < model.shuffle {
            errs.push(format!("patch_size {} is smaller than shuffle {}", self.patch_size, model.shuffle));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            errs.push(format!("need 0 <= lr_min ({}) <= lr_init ({})", self.lr_min, self.lr_init));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            errs.push("weight_decay must be >= 0 and adam_eps > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        cosine_lr(step, self.total_steps, self.lr_init, self.lr_min)
    }
}

/// The SR branch weight after the variant has had its say.
pub fn effective_loss(model: &ModelConfig, loss: &LossConfig) -> LossConfig {
    if model.variant.supervises_sr() {
        *loss
    } else {
        LossConfig { alpha_sr: 0.0, ..*loss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_main: f64,
    /// Unweighted SR-branch loss, when the model has that branch.
    pub loss_sr: Option<f64>,
}

impl StepStats {
    pub fn csv_row(&self) -> String {
        let sr = self.loss_sr.map(|v| format!("{v:.8e}")).unwrap_or_default();
        format!("{},{:.8e},{:.8e},{:.8e},{}", self.step, self.lr, self.loss, self.loss_main, sr)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Loss terms for one batch without touching the parameters.
pub fn evaluate_loss(model: &Model, batch: &Batch, loss: &LossConfig) -> Result<(Tensor, f64, Option<f64>)> {
    let out = model.forward(&ImageTensor::new(batch.input.clone())?)?;
    let target = batch.target.to_dtype(model.dtype())?;
    let cfg = effective_loss(model.config(), loss);
    let parts = total_loss(out.restored.as_tensor(), out.sr_image.as_ref().map(|s| s.as_tensor()), &target, &cfg)?;
    let main = scalar(&parts.main)?;
    let sr = parts.sr.as_ref().map(scalar).transpose()?;
    Ok((parts.total, main, sr))
}

/// Forward, loss, backward and one AdamW update. A non-finite loss aborts
/// before any parameter changes.
pub fn train_step(
    model: &Model,
    batch: &Batch,
    opt: &mut AdamW,
    lr: f64,
    loss: &LossConfig,
    step: usize,
) -> Result<StepStats> {
    let (total, loss_main, loss_sr) = evaluate_loss(model, batch, loss)?;
    let value = scalar(&total)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, lr, loss_main, loss_sr: loss_sr.unwrap_or(f64::NAN) });
    }
    let grads = total.backward()?;
    opt.step(model.params(), &grads, lr)?;
    Ok(StepStats { step, lr, loss: value, loss_main, loss_sr })
}

/// Mean PSNR of the restored output over every record, on whole images.
pub fn dataset_psnr(model: &Model, data: &Dataset) -> Result<f64> {
    let model = model.frozen()?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let r = data.record(i)?;
        let out = model.forward(&ImageTensor::new(r.input.unsqueeze(0)?)?)?;
        total += psnr(out.restored.as_tensor(), &r.gt.unsqueeze(0)?.to_dtype(model.dtype())?, 1.0)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub opt: AdamW,
    pub start_step: usize,
    pub history: Vec<StepStats>,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.history.first().map(|s| s.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.history.last().map(|s| s.loss)
    }
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:06}.ckpt"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}

/// Opens the CSV log; on resume keeps only rows before `start`.
fn open_log(path: &Path, start: usize) -> Result<File> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if start > 0 && path.is_file() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < start) {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains from scratch, or from `resume`, up to `train.total_steps`.
pub fn fit(
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    train.validate(model_cfg)?;
    loss.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (model, mut opt, start) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p, Some(model_cfg))?;
            if ck.step as usize > train.total_steps {
                return Err(Error::invalid(
                    "fit",
                    format!("checkpoint is at step {} but total_steps is {}", ck.step, train.total_steps),
                ));
            }
            (ck.model, ck.opt, ck.step as usize)
        }
        None => (build_model(model_cfg, DType::F32)?, AdamW::new(train.adamw()), 0),
    };
    let log_path = out_dir.join("train_log.csv");
    let mut log = open_log(&log_path, start)?;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start..train.total_steps {
        let lr = train.lr_at(step)?;
        let batch = batch_for_step(data, step as u64, train.batch_size, train.patch_size, train.flips, train.seed)?;
        let stats = train_step(&model, &batch, &mut opt, lr, loss, step)?;
        writeln!(log, "{}", stats.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.total_steps) {
            log::info!("step {step} lr {lr:.3e} loss {:.6}", stats.loss);
        }
        history.push(stats);
        let done = step + 1;
        if train.checkpoint_interval > 0 && done % train.checkpoint_interval == 0 && done < train.total_steps {
            let p = checkpoint_path(out_dir, done);
            save_checkpoint(&model, &opt, done as u64, &p)?;
            checkpoints.push(p);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let p = final_checkpoint_path(out_dir);
    save_checkpoint(&model, &opt, train.total_steps as u64, &p)?;
    checkpoints.push(p);
    Ok(TrainReport { model, opt, start_step: start, history, log_path, checkpoints })
}

#[derive(Debug, Clone)]
pub struct OverfitReport {
    pub train: TrainReport,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    /// `1 - last_loss / first_loss`.
    pub loss_reduction: f64,
}

/// Trains on `pairs` synthetic `size x size` pairs, full images per batch,
/// no flips, and reports the training-set PSNR before and after.
pub fn overfit_synthetic(
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    pairs: usize,
    size: usize,
    out_dir: &Path,
) -> Result<OverfitReport> {
    let data = Dataset::synthetic(pairs, size, train.seed)?;
    let train = TrainConfig { batch_size: pairs, patch_size: size, flips: false, dataset: None, ..train.clone() };
    let initial_psnr = dataset_psnr(&build_model(model_cfg, DType::F32)?, &data)?;
    let report = fit(model_cfg, &train, loss, &data, out_dir, None)?;
    let final_psnr = dataset_psnr(&report.model, &data)?;
    let first = report.first_loss().unwrap_or(f64::NAN);
    let last = report.last_loss().unwrap_or(f64::NAN);
    Ok(OverfitReport { train: report, initial_psnr, final_psnr, loss_reduction: 1.0 - last / first })
}
