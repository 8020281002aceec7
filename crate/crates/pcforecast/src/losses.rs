//! Training losses: masked range loss, mask cross-entropy, Chamfer distance,
//! and their weighted per-step total.

use crate::autodiff::{ops, Elem, Tensor};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::nn_index::build_index;
use crate::projection::{RangeImage, SensorIntrinsics};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::time::Instant;

/// Probabilities are clamped to [ε, 1−ε] before the logs so saturated
/// sigmoids keep the loss finite.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_mask: f64,
    pub alpha_chamfer: f64,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        LossWeights {
            alpha_mask: 1.0,
            alpha_chamfer: 0.0,
        }
    }

    pub fn finetune() -> Self {
        LossWeights {
            alpha_mask: 1.0,
            alpha_chamfer: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_mask < 0.0 || self.alpha_chamfer < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean absolute range error over all H·W pixels, counting only pixels with a
/// valid ground-truth return (gt > 0).
pub fn range_loss<E: Elem>(pred: &Tensor<E>, gt: &Tensor<E>) -> Result<Tensor<E>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", pred.shape()),
            format!("{:?}", gt.shape()),
        ));
    }
    let n = pred.numel() as f64;
    let gt_vals = gt.to_f64_vec();
    let mut total = 0.0f64;
    {
        let p = pred.data();
        for (pv, gv) in p.iter().zip(&gt_vals) {
            if *gv > 0.0 {
                total += (pv.to_f64() - gv).abs();
            }
        }
    }
    let pc = pred.clone();
    Ok(Tensor::from_op(
        "range_loss",
        vec![1],
        vec![E::from_f64(total / n)],
        vec![pred.clone()],
        move |gy| {
            let g = gy[0].to_f64() / n;
            let p = pc.data();
            let gx: Vec<E> = p
                .iter()
                .zip(&gt_vals)
                .map(|(pv, gv)| {
                    if *gv > 0.0 {
                        E::from_f64(g * (pv.to_f64() - gv).signum())
                    } else {
                        E::ZERO
                    }
                })
                .collect();
            vec![Some(gx)]
        },
    ))
}

/// Binary cross-entropy between predicted validity probabilities and the 0/1
/// ground-truth mask, averaged over all pixels.
pub fn mask_loss<E: Elem>(pred_prob: &Tensor<E>, gt_valid: &Tensor<E>) -> Result<Tensor<E>> {
    if pred_prob.shape() != gt_valid.shape() {
        return Err(Error::shape(
            format!("{:?}", pred_prob.shape()),
            format!("{:?}", gt_valid.shape()),
        ));
    }
    let n = pred_prob.numel() as f64;
    let targets = gt_valid.to_f64_vec();
    let clamp = |m: f64| m.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let mut total = 0.0f64;
    {
        let p = pred_prob.data();
        for (mv, y) in p.iter().zip(&targets) {
            let m = clamp(mv.to_f64());
            total += -y * m.ln() - (1.0 - y) * (1.0 - m).ln();
        }
    }
    let pc = pred_prob.clone();
    Ok(Tensor::from_op(
        "mask_loss",
        vec![1],
        vec![E::from_f64(total / n)],
        vec![pred_prob.clone()],
        move |gy| {
            let g = gy[0].to_f64() / n;
            let p = pc.data();
            let gx: Vec<E> = p
                .iter()
                .zip(&targets)
                .map(|(mv, y)| {
                    let raw = mv.to_f64();
                    if raw < BCE_EPS || raw > 1.0 - BCE_EPS {
                        // The clamp is active; its derivative is zero.
                        return E::ZERO;
                    }
                    E::from_f64(g * (-y / raw + (1.0 - y) / (1.0 - raw)))
                })
                .collect();
            vec![Some(gx)]
        },
    ))
}

fn nearest_distances(queries: &[Point3<f64>], targets: &[Point3<f64>]) -> Vec<(usize, f64)> {
    let index = build_index(targets);
    let mut out = vec![(0usize, 0.0f64); queries.len()];
    if queries.len() >= 2048 {
        out.par_iter_mut()
            .zip(queries.par_iter())
            .for_each(|(slot, q)| *slot = index.nearest(q));
    } else {
        for (slot, q) in out.iter_mut().zip(queries) {
            *slot = index.nearest(q);
        }
    }
    out
}

fn sum_distances(nn: &[(usize, f64)]) -> f64 {
    nn.iter().map(|(_, d)| d).sum()
}

/// Symmetric Chamfer distance in m²: mean squared distance to the nearest
/// neighbor, in both directions, with exact search.
pub fn chamfer(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::MissingInput("chamfer of an empty cloud".into()));
    }
    let forward = nearest_distances(&pred.points, &gt.points);
    let backward = nearest_distances(&gt.points, &pred.points);
    Ok(sum_distances(&forward) / pred.len() as f64
        + sum_distances(&backward) / gt.len() as f64)
}

/// Direct-sum reference implementation of the Chamfer distance; the oracle
/// the accelerated path is validated against.
pub fn chamfer_brute_force(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::MissingInput("chamfer of an empty cloud".into()));
    }
    let min_to = |p: &Point3<f64>, cloud: &[Point3<f64>]| {
        cloud
            .iter()
            .map(|q| (p - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
    };
    let a: f64 = pred.points.iter().map(|p| min_to(p, &gt.points)).sum();
    let b: f64 = gt.points.iter().map(|q| min_to(q, &pred.points)).sum();
    Ok(a / pred.len() as f64 + b / gt.len() as f64)
}

/// Differentiable Chamfer term between the masked re-projection of a predicted
/// range image and a ground-truth cloud. The mask selection itself carries no
/// gradient; the loss differentiates through the kept range values only.
/// Returns None when either side is empty (the caller skips and flags).
pub fn chamfer_loss_op<E: Elem>(
    pred_range: &Tensor<E>,
    valid: &[bool],
    intr: &SensorIntrinsics,
    gt: &PointCloud,
) -> Option<Tensor<E>> {
    let (h, w) = (intr.height, intr.width);
    assert_eq!(pred_range.shape(), [h, w], "pred range must be (H, W)");
    assert_eq!(valid.len(), h * w);
    if gt.is_empty() {
        return None;
    }
    let ranges = pred_range.to_f64_vec();
    let mut pixels: Vec<usize> = Vec::new();
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    let mut points: Vec<Point3<f64>> = Vec::new();
    for idx in 0..h * w {
        if valid[idx] && ranges[idx] > 0.0 {
            let d = intr.pixel_direction(idx / w, idx % w);
            pixels.push(idx);
            dirs.push(d);
            points.push(Point3::from(d * ranges[idx]));
        }
    }
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let m = gt.len() as f64;
    let forward = nearest_distances(&points, &gt.points);
    let backward = nearest_distances(&gt.points, &points);
    let value = sum_distances(&forward) / n + sum_distances(&backward) / m;

    let gt_points = gt.points.clone();
    let pred_points = points;
    let numel = h * w;
    Some(Tensor::from_op(
        "chamfer_loss",
        vec![1],
        vec![E::from_f64(value)],
        vec![pred_range.clone()],
        move |gy| {
            let g = gy[0].to_f64();
            let mut gx = vec![E::ZERO; numel];
            let mut acc = vec![0.0f64; pred_points.len()];
            for (i, (nn, _)) in forward.iter().enumerate() {
                let diff = pred_points[i] - gt_points[*nn];
                acc[i] += 2.0 / n * diff.dot(&dirs[i]);
            }
            for (j, (nn, _)) in backward.iter().enumerate() {
                let diff = pred_points[*nn] - gt_points[j];
                acc[*nn] += 2.0 / m * diff.dot(&dirs[*nn]);
            }
            for (i, &px) in pixels.iter().enumerate() {
                gx[px] = E::from_f64(g * acc[i]);
            }
            vec![Some(gx)]
        },
    ))
}

/// Per-step loss components; chamfer is None when it was not computed (weight
/// zero and metrics not requested) and NaN never appears.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub range: f64,
    pub mask: f64,
    pub chamfer: Option<f64>,
}

/// Loss components per future step plus their sums, all non-negative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub steps: Vec<StepLoss>,
    /// Step indices whose Chamfer term was skipped for an empty cloud.
    pub flagged: Vec<usize>,
    pub total: f64,
}

impl LossReport {
    pub fn sum_range(&self) -> f64 {
        self.steps.iter().map(|s| s.range).sum()
    }

    pub fn sum_mask(&self) -> f64 {
        self.steps.iter().map(|s| s.mask).sum()
    }

    pub fn sum_chamfer(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.chamfer).sum()
    }

    pub fn csv_header() -> &'static str {
        "sample,step,range_m,mask_nats,chamfer_m2,total"
    }

    /// One CSV row per step: (sample id, step, L_R, L_M, L_CD, total).
    pub fn csv_rows(&self, sample_id: usize, weights: &LossWeights) -> Vec<String> {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let cd = s.chamfer.unwrap_or(0.0);
                let total =
                    s.range + weights.alpha_mask * s.mask + weights.alpha_chamfer * cd;
                format!("{sample_id},{},{},{},{},{}", t + 1, s.range, s.mask, cd, total)
            })
            .collect()
    }
}

pub struct LossContext<'a> {
    pub gt_images: &'a [RangeImage],
    /// Ground-truth clouds per step; required when alpha_chamfer > 0.
    pub gt_clouds: Option<&'a [PointCloud]>,
    pub intrinsics: SensorIntrinsics,
    pub weights: LossWeights,
    /// Compute the Chamfer metric for the report even at weight zero.
    pub chamfer_metric: bool,
}

/// Weighted sum over the F future steps (range + α_M mask + α_CD chamfer).
/// Returns the differentiable total plus the per-step report.
pub fn total_loss<E: Elem>(
    pred_ranges: &Tensor<E>,
    pred_mask: &Tensor<E>,
    ctx: &LossContext<'_>,
) -> Result<(Tensor<E>, LossReport)> {
    ctx.weights.validate()?;
    let f = ctx.gt_images.len();
    let (h, w) = (ctx.intrinsics.height, ctx.intrinsics.width);
    if pred_ranges.shape() != [f, h, w] || pred_mask.shape() != [f, h, w] {
        return Err(Error::shape(
            format!("({f}, {h}, {w})"),
            format!("{:?} / {:?}", pred_ranges.shape(), pred_mask.shape()),
        ));
    }
    if ctx.weights.alpha_chamfer > 0.0 && ctx.gt_clouds.is_none() {
        return Err(Error::MissingInput(
            "ground-truth clouds are required when the chamfer weight is nonzero".into(),
        ));
    }
    if let Some(clouds) = ctx.gt_clouds {
        if clouds.len() != f {
            return Err(Error::shape(format!("{f} gt clouds"), format!("{}", clouds.len())));
        }
    }

    let mut report = LossReport::default();
    let mut total: Option<Tensor<E>> = None;
    for t in 0..f {
        let pr = ops::reshape(&ops::narrow(pred_ranges, 0, t, 1), vec![h, w]);
        let pm = ops::reshape(&ops::narrow(pred_mask, 0, t, 1), vec![h, w]);
        let gt_img = &ctx.gt_images[t];
        let gt_tensor = Tensor::constant(
            vec![h, w],
            gt_img.values.iter().map(|&v| E::from_f64(v as f64)).collect(),
        );
        let gt_valid = Tensor::constant(
            vec![h, w],
            gt_img
                .values
                .iter()
                .map(|&v| if v > 0.0 { E::ONE } else { E::ZERO })
                .collect(),
        );
        let l_r = range_loss(&pr, &gt_tensor)?;
        let l_m = mask_loss(&pm, &gt_valid)?;

        let mut step = StepLoss {
            range: l_r.value().to_f64(),
            mask: l_m.value().to_f64(),
            chamfer: None,
        };
        let mut step_total = ops::add(&l_r, &ops::affine(&l_m, ctx.weights.alpha_mask, 0.0))?;

        let want_cd = ctx.weights.alpha_chamfer > 0.0 || ctx.chamfer_metric;
        if want_cd {
            if let Some(clouds) = ctx.gt_clouds {
                let valid: Vec<bool> =
                    pm.data().iter().map(|p| p.to_f64() > 0.5).collect();
                match chamfer_loss_op(&pr, &valid, &ctx.intrinsics, &clouds[t]) {
                    Some(l_cd) => {
                        step.chamfer = Some(l_cd.value().to_f64());
                        if ctx.weights.alpha_chamfer > 0.0 {
                            step_total = ops::add(
                                &step_total,
                                &ops::affine(&l_cd, ctx.weights.alpha_chamfer, 0.0),
                            )?;
                        }
                    }
                    None => {
                        log::warn!("chamfer term skipped at step {t}: empty cloud");
                        report.flagged.push(t);
                    }
                }
            }
        }
        report.steps.push(step);
        total = Some(match total {
            Some(acc) => ops::add(&acc, &step_total)?,
            None => step_total,
        });
    }
    let total = total.ok_or_else(|| Error::Config("total_loss over zero steps".into()))?;
    report.total = total.value().to_f64();
    Ok((total, report))
}

/// Wall-clock comparison of the image-only loss (Eqs. 1–2) against the loss
/// including the Chamfer term (Eq. 3), medians over `repeats` runs after one
/// warmup each.
#[derive(Debug, Clone)]
pub struct LossTiming {
    pub image_only_ms: f64,
    pub with_chamfer_ms: f64,
}

impl LossTiming {
    pub fn speedup(&self) -> f64 {
        self.with_chamfer_ms / self.image_only_ms
    }
}

pub fn time_loss_modes<E: Elem>(
    pred_ranges: &Tensor<E>,
    pred_mask: &Tensor<E>,
    gt_images: &[RangeImage],
    gt_clouds: &[PointCloud],
    intrinsics: SensorIntrinsics,
    repeats: usize,
) -> Result<LossTiming> {
    assert!(repeats >= 1);
    let run = |weights: LossWeights| -> Result<f64> {
        let ctx = LossContext {
            gt_images,
            gt_clouds: Some(gt_clouds),
            intrinsics,
            weights,
            chamfer_metric: false,
        };
        total_loss(pred_ranges, pred_mask, &ctx)?; // warmup
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let (loss, _) = total_loss(pred_ranges, pred_mask, &ctx)?;
            let _ = loss.value();
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(times[times.len() / 2])
    };
    Ok(LossTiming {
        image_only_ms: run(LossWeights::pretrain())?,
        with_chamfer_ms: run(LossWeights::finetune())?,
    })
}
