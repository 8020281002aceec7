//! Optimization loop: Adam with gradient accumulation, exponential
//! learning-rate decay, the pre-train → fine-tune loss-weight schedule,
//! per-epoch validation, and checkpointing.

use crate::autodiff::norm::Phase;
use crate::autodiff::{backward, Elem, Tensor};
use crate::error::{Error, Result};
use crate::lidar_io::dataset::{Sample, SequenceDataset};
use crate::losses::{total_loss, LossContext, LossReport, LossWeights};
use crate::network::{save_model, ForecastModel, NormStats};
use crate::projection::{project, stack, FrameStack, RangeImage, SensorIntrinsics};
use crate::geom::PointCloud;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One phase of the loss-weight schedule, active for epochs in
/// [from_epoch, to_epoch).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SchedulePhase {
    pub from_epoch: usize,
    pub to_epoch: usize,
    pub alpha_mask: f64,
    pub alpha_chamfer: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied per epoch: lr(e) = lr0 * decay^e.
    pub lr_decay: f64,
    /// Samples accumulated per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Empty = pre-training weights (alpha_M = 1, alpha_CD = 0) throughout.
    pub schedule: Vec<SchedulePhase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 0.99,
            accumulation: 16,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            schedule: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train: learning rate must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("train: decay must be in (0, 1]".into()));
        }
        if self.accumulation < 1 {
            return Err(Error::Config("train: accumulation must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        for phase in &self.schedule {
            if epoch >= phase.from_epoch && epoch < phase.to_epoch {
                return LossWeights {
                    alpha_mask: phase.alpha_mask,
                    alpha_chamfer: phase.alpha_chamfer,
                };
            }
        }
        LossWeights::pretrain()
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Standard bias-corrected Adam update, computed in f64 and written back to
/// the parameter storage type. `t` counts steps starting at 1.
pub fn adam_step<E: Elem>(
    param: &Tensor<E>,
    grad: &[f64],
    moments: &mut AdamMoments,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    assert!(t >= 1);
    assert_eq!(grad.len(), param.numel());
    assert_eq!(grad.len(), moments.m.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let mut values = param.to_vec();
    for (i, value) in values.iter_mut().enumerate() {
        let g = grad[i];
        moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
        moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        *value = E::from_f64(value.to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
    }
    param.set_data(&values);
}

/// Fully materialized training sample: input stack, ground-truth range
/// images, and ground-truth clouds.
pub struct SamplePack {
    pub stack: FrameStack,
    pub gt_images: Vec<RangeImage>,
    pub gt_clouds: Vec<PointCloud>,
}

pub fn load_sample(
    ds: &SequenceDataset,
    sample: &Sample,
    intr: &SensorIntrinsics,
) -> Result<SamplePack> {
    let past: Vec<RangeImage> = sample
        .past
        .iter()
        .map(|&i| Ok(project(&ds.cloud(i)?, intr)))
        .collect::<Result<_>>()?;
    let mut gt_images = Vec::with_capacity(sample.future.len());
    let mut gt_clouds = Vec::with_capacity(sample.future.len());
    for &i in &sample.future {
        let cloud = ds.cloud(i)?;
        gt_images.push(project(&cloud, intr));
        gt_clouds.push(cloud);
    }
    Ok(SamplePack {
        stack: stack(&past)?,
        gt_images,
        gt_clouds,
    })
}

/// Averaged loss components over one split.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    pub range: f64,
    pub mask: f64,
    pub chamfer: f64,
    pub total: f64,
    pub samples: usize,
}

impl LossSummary {
    fn accumulate(&mut self, report: &LossReport) {
        self.range += report.sum_range();
        self.mask += report.sum_mask();
        self.chamfer += report.sum_chamfer();
        self.total += report.total;
        self.samples += 1;
    }

    fn finish(mut self) -> Self {
        if self.samples > 0 {
            let n = self.samples as f64;
            self.range /= n;
            self.mask /= n;
            self.chamfer /= n;
            self.total /= n;
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossSummary,
    pub val: Option<LossSummary>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_total: f64,
    pub optimizer_steps: u64,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

pub const METRICS_HEADER: &str = "epoch,split,range_m,mask_nats,chamfer_m2,total,lr";

fn metrics_line(epoch: usize, split: &str, s: &LossSummary, lr: f64) -> String {
    format!(
        "{epoch},{split},{},{},{},{},{lr}",
        s.range, s.mask, s.chamfer, s.total
    )
}

/// Trains the model in place. Per sample: forward, total loss, backward;
/// every `accumulation` samples (and at the epoch end for the remainder) one
/// Adam step on the mean accumulated gradient. Aborts with the offending
/// sample id when a loss turns non-finite.
pub fn train<E: Elem>(
    model: &mut ForecastModel<E>,
    train_ds: &SequenceDataset,
    val_ds: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let intr = model.config.intrinsics;
    let samples = train_ds.slice_samples();
    if samples.is_empty() {
        return Err(Error::Config(
            "training dataset yields no samples (need >= P + F scans)".into(),
        ));
    }
    if train_ds.past_len() != model.config.past || train_ds.future_len() != model.config.future {
        return Err(Error::Config(format!(
            "dataset slicing (P={}, F={}) does not match the model (P={}, F={})",
            train_ds.past_len(),
            train_ds.future_len(),
            model.config.past,
            model.config.future
        )));
    }

    // Standardization constants from all training range pixels, zeros
    // included; frozen before the first update and stored in the checkpoint.
    let all_images: Vec<RangeImage> = (0..train_ds.len())
        .map(|i| Ok(project(&train_ds.cloud(i)?, &intr)))
        .collect::<Result<_>>()?;
    model.norm_stats = NormStats::from_images(all_images.iter());
    drop(all_images);

    let params = model.named_params();
    let mut moments: Vec<AdamMoments> =
        params.iter().map(|(_, p)| AdamMoments::zeros(p.numel())).collect();
    let mut step_count: u64 = 0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_total: f64::INFINITY,
        optimizer_steps: 0,
        best_checkpoint: None,
        last_checkpoint: None,
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let weights = cfg.weights_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut train_summary = LossSummary::default();
        let mut accumulated = 0usize;
        for (position, &sample_id) in order.iter().enumerate() {
            let pack = load_sample(train_ds, &samples[sample_id], &intr)?;
            let (ranges, mask) = model.forward_tensors(&pack.stack, Phase::Train)?;
            let ctx = LossContext {
                gt_images: &pack.gt_images,
                gt_clouds: Some(&pack.gt_clouds),
                intrinsics: intr,
                weights,
                chamfer_metric: false,
            };
            let (loss, loss_report) = total_loss(&ranges, &mask, &ctx)?;
            let loss_value = loss.value().to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample: sample_id,
                    detail: format!("epoch {epoch}, loss {loss_value}"),
                });
            }
            train_summary.accumulate(&loss_report);
            backward(&loss)?;
            accumulated += 1;

            if accumulated == cfg.accumulation || position + 1 == order.len() {
                step_count += 1;
                let scale = 1.0 / accumulated as f64;
                for ((_, param), moment) in params.iter().zip(moments.iter_mut()) {
                    let grad: Vec<f64> = match param.grad() {
                        Some(g) => g.iter().map(|v| v.to_f64() * scale).collect(),
                        None => vec![0.0; param.numel()],
                    };
                    adam_step(
                        param, &grad, moment, lr, cfg.beta1, cfg.beta2, cfg.eps, step_count,
                    );
                    param.zero_grad();
                }
                accumulated = 0;
            }
        }
        let train_summary = train_summary.finish();

        let val_summary = match val_ds {
            Some(ds) => Some(validate(model, ds, weights)?),
            None => None,
        };

        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", metrics_line(epoch, "train", &train_summary, lr))?;
            if let Some(v) = &val_summary {
                writeln!(f, "{}", metrics_line(epoch, "val", v, lr))?;
            }
        }

        let tracked_total = val_summary.map(|v| v.total).unwrap_or(train_summary.total);
        if tracked_total < report.best_val_total {
            report.best_val_total = tracked_total;
            report.best_epoch = Some(epoch);
            if let Some(dir) = out_dir {
                let path = dir.join("best.ckpt");
                save_model(&path, model)?;
                report.best_checkpoint = Some(path);
            }
        }
        report.epochs.push(EpochMetrics {
            epoch,
            lr,
            train: train_summary,
            val: val_summary,
        });
        log::info!(
            "epoch {epoch}: train total {:.4}, val total {:?}, lr {lr:.2e}",
            train_summary.total,
            val_summary.map(|v| v.total)
        );
    }
    report.optimizer_steps = step_count;
    if let Some(dir) = out_dir {
        let path = dir.join("last.ckpt");
        save_model(&path, model)?;
        report.last_checkpoint = Some(path);
    }
    Ok(report)
}

/// Eval-mode loss over a dataset; the Chamfer component is always reported
/// even when its training weight is zero.
pub fn validate<E: Elem>(
    model: &ForecastModel<E>,
    ds: &SequenceDataset,
    weights: LossWeights,
) -> Result<LossSummary> {
    let intr = model.config.intrinsics;
    let mut summary = LossSummary::default();
    for sample in ds.slice_samples() {
        let pack = load_sample(ds, &sample, &intr)?;
        let (ranges, mask) = model.forward_tensors(&pack.stack, Phase::Eval)?;
        let ctx = LossContext {
            gt_images: &pack.gt_images,
            gt_clouds: Some(&pack.gt_clouds),
            intrinsics: intr,
            weights,
            chamfer_metric: true,
        };
        let (_, loss_report) = crate::autodiff::no_grad(|| total_loss(&ranges, &mask, &ctx))?;
        summary.accumulate(&loss_report);
    }
    Ok(summary.finish())
}

/// Resumes a pre-trained model with fresh Adam moments and the Chamfer term
/// enabled (alpha_CD = 1) for every epoch.
pub fn fine_tune<E: Elem>(
    model: &mut ForecastModel<E>,
    train_ds: &SequenceDataset,
    val_ds: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut cfg = cfg.clone();
    cfg.schedule = vec![SchedulePhase {
        from_epoch: 0,
        to_epoch: usize::MAX,
        alpha_mask: 1.0,
        alpha_chamfer: 1.0,
    }];
    let stats = model.norm_stats;
    let report = train(model, train_ds, val_ds, &cfg, out_dir);
    // Fine-tuning keeps the pre-training standardization.
    model.norm_stats = stats;
    report
}
