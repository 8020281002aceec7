//! Chamfer-distance evaluation protocol: per-step statistics over a sliced
//! dataset, on full-scale or subsampled clouds, plus prediction timing.

use crate::baselines::{self, BaselineKind};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, PoseSE3};
use crate::lidar_io::dataset::{Sample, SequenceDataset};
use crate::losses::chamfer;
use crate::network::ForecastModel;
use crate::projection::{project, stack, SensorIntrinsics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Evaluation source: the learned model or one of the geometric baselines.
pub enum Predictor<'a> {
    Model(&'a ForecastModel<f32>),
    Baseline(BaselineKind),
}

impl Predictor<'_> {
    pub fn name(&self) -> String {
        match self {
            Predictor::Model(_) => "model".into(),
            Predictor::Baseline(kind) => kind.to_string(),
        }
    }

    /// Predicted clouds for one sample.
    pub fn predict(
        &self,
        ds: &SequenceDataset,
        sample: &Sample,
        intrinsics: &SensorIntrinsics,
    ) -> Result<Vec<PointCloud>> {
        let future = sample.future.len();
        match self {
            Predictor::Model(model) => {
                let past: Vec<_> = sample
                    .past
                    .iter()
                    .map(|&i| Ok(project(&ds.cloud(i)?, intrinsics)))
                    .collect::<Result<Vec<_>>>()?;
                model.predict_clouds(&stack(&past)?)
            }
            Predictor::Baseline(kind) => {
                let past: Vec<PointCloud> = sample
                    .past
                    .iter()
                    .map(|&i| ds.cloud(i))
                    .collect::<Result<_>>()?;
                let poses: Option<Vec<PoseSE3>> = ds
                    .poses()
                    .map(|all| sample.past.iter().map(|&i| all[i]).collect());
                baselines::predict(*kind, &past, poses.as_deref(), future, intrinsics)
            }
        }
    }
}

/// Full-scale clouds or uniform subsdigest of both sides before Eq. (3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Full,
    Sampled(usize),
}

/// Uniform random subset without replacement of size min(n, |cloud|).
pub fn sample_cloud(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    assert!(n >= 1, "sample size must be >= 1");
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..cloud.len()).collect();
    // Partial Fisher-Yates: after n swaps the prefix is the sample.
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    PointCloud::new(indices[..n].iter().map(|&i| cloud.points[i]).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

/// Linear-interpolation quantile between order statistics (the numpy default
/// convention).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

impl Stats {
    pub fn from_values(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stats {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            count: sorted.len(),
        })
    }
}

/// One Chamfer measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub sample: usize,
    /// Prediction step, 1-based.
    pub step: usize,
    pub chamfer_m2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub predictor: String,
    pub rows: Vec<EvalRow>,
    /// Per-step aggregates, index 0 = prediction step 1.
    pub per_step: Vec<Stats>,
    pub overall: Option<Stats>,
    /// (sample, step) pairs skipped for an empty prediction.
    pub flagged: Vec<(usize, usize)>,
    /// Median wall-clock per prediction (all F steps), milliseconds.
    pub prediction_ms: f64,
}

impl EvalReport {
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample,step,chamfer_m2\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.sample, r.step, r.chamfer_m2));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("step,count,mean,std,min,q1,median,q3,max\n");
        let mut write = |label: String, s: &Stats| {
            out.push_str(&format!(
                "{label},{},{},{},{},{},{},{},{}\n",
                s.count, s.mean, s.std, s.min, s.q1, s.median, s.q3, s.max
            ));
        };
        for (i, s) in self.per_step.iter().enumerate() {
            write(format!("{}", i + 1), s);
        }
        if let Some(s) = &self.overall {
            write("overall".into(), s);
        }
        out
    }

    /// Box-plot rows: step, min, Q1, median, Q3, max.
    pub fn boxplot_data(&self) -> String {
        let mut out = String::from("step,min,q1,median,q3,max\n");
        for (i, s) in self.per_step.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                s.min,
                s.q1,
                s.median,
                s.q3,
                s.max
            ));
        }
        out
    }
}

/// Aggregates rows into per-step and overall statistics.
pub fn aggregate(rows: &[EvalRow], future: usize) -> (Vec<Stats>, Option<Stats>) {
    let mut per_step = Vec::with_capacity(future);
    for step in 1..=future {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r.step == step)
            .map(|r| r.chamfer_m2)
            .collect();
        per_step.push(Stats::from_values(&values).unwrap_or_default());
    }
    let all: Vec<f64> = rows.iter().map(|r| r.chamfer_m2).collect();
    (per_step, Stats::from_values(&all))
}

/// Runs the predictor over every sample and aggregates Chamfer distances per
/// step; sampled mode subsamples prediction and ground truth with the same
/// per-(sample, step) seed. Empty predictions are flagged and excluded.
pub fn evaluate(
    predictor: &Predictor<'_>,
    ds: &SequenceDataset,
    intrinsics: &SensorIntrinsics,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    let samples = ds.slice_samples();
    if samples.is_empty() {
        return Err(Error::Config("evaluation dataset yields no samples".into()));
    }
    let future = ds.future_len();
    let mut report = EvalReport {
        predictor: predictor.name(),
        ..EvalReport::default()
    };
    let mut times = Vec::with_capacity(samples.len());
    for (si, sample) in samples.iter().enumerate() {
        let start = Instant::now();
        let preds = predictor.predict(ds, sample, intrinsics)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if preds.len() != future {
            return Err(Error::shape(
                format!("{future} predicted clouds"),
                format!("{}", preds.len()),
            ));
        }
        for (t, pred) in preds.iter().enumerate() {
            let gt = ds.cloud(sample.future[t])?;
            if pred.is_empty() || gt.is_empty() {
                report.flagged.push((si, t + 1));
                continue;
            }
            let (p, g) = match mode {
                EvalMode::Full => (pred.clone(), gt),
                EvalMode::Sampled(n) => {
                    let pair_seed = seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add((si * future + t) as u64);
                    (sample_cloud(pred, n, pair_seed), sample_cloud(&gt, n, pair_seed))
                }
            };
            report.rows.push(EvalRow {
                sample: si,
                step: t + 1,
                chamfer_m2: chamfer(&p, &g)?,
            });
        }
    }
    let (per_step, overall) = aggregate(&report.rows, future);
    report.per_step = per_step;
    report.overall = overall;
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    report.prediction_ms = times[times.len() / 2];
    Ok(report)
}

/// Median wall-clock of forward + re-projection over `repeats` runs after one
/// warmup; returns (median_ms, all raw times).
pub fn time_prediction(
    predictor: &Predictor<'_>,
    ds: &SequenceDataset,
    sample: &Sample,
    intrinsics: &SensorIntrinsics,
    repeats: usize,
) -> Result<(f64, Vec<f64>)> {
    if repeats < 3 {
        return Err(Error::Config("timing needs repeats >= 3".into()));
    }
    predictor.predict(ds, sample, intrinsics)?; // warmup
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let preds = predictor.predict(ds, sample, intrinsics)?;
        std::hint::black_box(&preds);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((sorted[sorted.len() / 2], times))
}
