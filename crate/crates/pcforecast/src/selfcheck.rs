//! Built-in verification battery: finite-difference gradient checks for every
//! tensor operation, projection round trips, the Chamfer brute-force oracle,
//! and file-format persistence. Shared by the `selftest` command and the
//! acceptance suite.

use crate::autodiff::gradcheck::gradcheck_scalar;
use crate::autodiff::norm::{BnParams, BnState, Phase};
use crate::autodiff::{batchnorm3d, conv3d, conv3d_transposed, ops, ConvSpec, PadMode, Tensor};
use crate::geom::PointCloud;
use crate::losses::{chamfer, chamfer_brute_force, chamfer_loss_op, mask_loss, range_loss};
use crate::projection::{project, unproject, RangeImage, SensorIntrinsics};
use nalgebra::Point3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const GRADCHECK_H: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_param(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, rand_vec(rng, n, lo, hi))
}

/// Projects a tensor to a scalar with a fixed random weighting so gradient
/// signals do not cancel.
fn projected(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::constant(
        out.shape().to_vec(),
        rand_vec(&mut rng, out.numel(), -1.0, 1.0),
    );
    ops::sum(&ops::mul(out, &weights).expect("projection shapes match"))
}

type OpCase = (&'static str, fn(u64) -> f64);

fn max_err_add(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_param(&mut rng, vec![2, 3, 2], -2.0, 2.0);
    let b = rand_param(&mut rng, vec![2, 3, 2], -2.0, 2.0);
    let (ac, bc) = (a.clone(), b.clone());
    gradcheck_scalar(
        move || projected(&ops::add(&ac, &bc).unwrap(), seed),
        &[("a", a), ("b", b)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_mul(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_param(&mut rng, vec![3, 4], -2.0, 2.0);
    let b = rand_param(&mut rng, vec![3, 4], 0.5, 2.0);
    let (ac, bc) = (a.clone(), b.clone());
    gradcheck_scalar(
        move || projected(&ops::mul(&ac, &bc).unwrap(), seed),
        &[("a", a), ("b", b)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_affine(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 5], -3.0, 3.0);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::affine(&xc, 1.7, -0.3), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_sum(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![7], -2.0, 2.0);
    let xc = x.clone();
    gradcheck_scalar(move || ops::sum(&xc), &[("x", x)], GRADCHECK_H).max_rel_err
}

fn max_err_leaky_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep inputs off the kink at zero.
    let vals: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::param(vec![3, 4], vals);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::leaky_relu(&xc, 0.2), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_sigmoid(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 6], -3.0, 3.0);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::sigmoid(&xc), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_concat(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_param(&mut rng, vec![2, 1, 3], -1.0, 1.0);
    let b = rand_param(&mut rng, vec![2, 2, 3], -1.0, 1.0);
    let c = rand_param(&mut rng, vec![2, 1, 3], -1.0, 1.0);
    let (ac, bc, cc) = (a.clone(), b.clone(), c.clone());
    gradcheck_scalar(
        move || projected(&ops::concat(&[ac.clone(), bc.clone(), cc.clone()], 1).unwrap(), seed),
        &[("a", a), ("b", b), ("c", c)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_pad_zero(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 2, 3, 4], -1.0, 1.0);
    let xc = x.clone();
    let modes = [PadMode::None, PadMode::Zero(1), PadMode::Zero(2)];
    gradcheck_scalar(
        move || projected(&ops::pad3d(&xc, modes), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_pad_circular(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 2, 3, 4], -1.0, 1.0);
    let xc = x.clone();
    let modes = [PadMode::None, PadMode::Zero(1), PadMode::Circular(1)];
    gradcheck_scalar(
        move || projected(&ops::pad3d(&xc, modes), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_pad_adjoint(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 2, 5, 6], -1.0, 1.0);
    let xc = x.clone();
    let modes = [PadMode::None, PadMode::Zero(1), PadMode::Circular(1)];
    gradcheck_scalar(
        move || projected(&ops::pad3d_adjoint(&xc, modes), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_narrow(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![3, 5, 2], -1.0, 1.0);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::narrow(&xc, 1, 1, 3), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_reshape(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 6], -1.0, 1.0);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::reshape(&xc, vec![3, 4]), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_channel_bias(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![3, 2, 2, 2], -1.0, 1.0);
    let b = rand_param(&mut rng, vec![3], -1.0, 1.0);
    let (xc, bc) = (x.clone(), b.clone());
    gradcheck_scalar(
        move || projected(&ops::add_channel_bias(&xc, &bc).unwrap(), seed),
        &[("x", x), ("b", b)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_align_time(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 2, 2, 3], -1.0, 1.0);
    let xc = x.clone();
    gradcheck_scalar(
        move || projected(&ops::align_time(&xc, 4), seed),
        &[("x", x)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_conv3d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::plain(
        2,
        3,
        [2, 2, 3],
        [1, 2, 1],
        [PadMode::None, PadMode::Zero(1), PadMode::Circular(1)],
    );
    let x = rand_param(&mut rng, vec![2, 3, 4, 5], -1.0, 1.0);
    let w = rand_param(&mut rng, spec.weight_shape().to_vec(), -0.8, 0.8);
    let b = rand_param(&mut rng, vec![3], -0.5, 0.5);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    gradcheck_scalar(
        move || projected(&conv3d(&xc, &spec, &wc, &bc).unwrap(), seed),
        &[("x", x), ("w", w), ("b", b)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_conv3d_transposed(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::transposed(3, 2, [2, 2, 2], [1, 2, 2], [PadMode::None; 3]);
    let x = rand_param(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
    let w = rand_param(&mut rng, spec.weight_shape().to_vec(), -0.8, 0.8);
    let b = rand_param(&mut rng, vec![2], -0.5, 0.5);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    gradcheck_scalar(
        move || projected(&conv3d_transposed(&xc, &spec, &wc, &bc).unwrap(), seed),
        &[("x", x), ("w", w), ("b", b)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn bn_case(seed: u64, phase: Phase) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_param(&mut rng, vec![2, 2, 3, 3], -2.0, 2.0);
    let gamma = rand_param(&mut rng, vec![2], 0.5, 1.5);
    let beta = rand_param(&mut rng, vec![2], -0.5, 0.5);
    let state = BnState::new(2);
    *state.running_mean.borrow_mut() = rand_vec(&mut rng, 2, -0.5, 0.5);
    *state.running_var.borrow_mut() = rand_vec(&mut rng, 2, 0.5, 2.0);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    gradcheck_scalar(
        move || {
            let params = BnParams {
                gamma: &gc,
                beta: &bc,
                state: &state,
                eps: 1e-5,
                // Zero momentum keeps eval statistics fixed across the
                // repeated forward passes of finite differencing.
                momentum: 0.0,
            };
            projected(&batchnorm3d(&xc, &params, phase).unwrap(), seed)
        },
        &[("x", x), ("gamma", gamma), ("beta", beta)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_bn_train(seed: u64) -> f64 {
    bn_case(seed, Phase::Train)
}

fn max_err_bn_eval(seed: u64) -> f64 {
    bn_case(seed, Phase::Eval)
}

fn max_err_range_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_vals: Vec<f64> = (0..20)
        .map(|i| if i % 4 == 0 { 0.0 } else { rng.gen_range(2.0..8.0) })
        .collect();
    let gt = Tensor::constant(vec![4, 5], gt_vals);
    // Predictions far from gt keep |pred - gt| off its kink under the probe.
    let pred = rand_param(&mut rng, vec![4, 5], 10.0, 15.0);
    let (pc, gc) = (pred.clone(), gt.clone());
    gradcheck_scalar(
        move || range_loss(&pc, &gc).unwrap(),
        &[("pred", pred)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_mask_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = rand_param(&mut rng, vec![4, 5], 0.05, 0.95);
    let target = Tensor::constant(
        vec![4, 5],
        (0..20).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
    );
    let (pc, tc) = (probs.clone(), target.clone());
    gradcheck_scalar(
        move || mask_loss(&pc, &tc).unwrap(),
        &[("probs", probs)],
        GRADCHECK_H,
    )
    .max_rel_err
}

fn max_err_chamfer_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = SensorIntrinsics::new(3, 6, 0.3, 0.3, 0.5, 60.0).unwrap();
    let pred = rand_param(&mut rng, vec![3, 6], 4.0, 9.0);
    let valid: Vec<bool> = (0..18).map(|_| rng.gen_bool(0.8)).collect();
    // A gt lattice keeps points clear of Voronoi boundaries so the nearest
    // neighbor assignment is stable under the finite-difference probe.
    let gt = PointCloud::new(
        (0..30)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-4..4) as f64 * 1.5 + 0.4,
                    rng.gen_range(-4..4) as f64 * 1.5 + 0.2,
                    rng.gen_range(-2..2) as f64 * 1.0 + 0.3,
                )
            })
            .collect(),
    );
    let (pc, vc, gc) = (pred.clone(), valid.clone(), gt.clone());
    gradcheck_scalar(
        move || chamfer_loss_op(&pc, &vc, &intr, &gc).unwrap(),
        &[("ranges", pred)],
        GRADCHECK_H,
    )
    .max_rel_err
}

const OP_CASES: &[OpCase] = &[
    ("add", max_err_add),
    ("mul", max_err_mul),
    ("affine", max_err_affine),
    ("sum", max_err_sum),
    ("leaky_relu", max_err_leaky_relu),
    ("sigmoid", max_err_sigmoid),
    ("concat", max_err_concat),
    ("pad3d_zero", max_err_pad_zero),
    ("pad3d_circular", max_err_pad_circular),
    ("pad3d_adjoint", max_err_pad_adjoint),
    ("narrow", max_err_narrow),
    ("reshape", max_err_reshape),
    ("add_channel_bias", max_err_channel_bias),
    ("align_time", max_err_align_time),
    ("conv3d", max_err_conv3d),
    ("conv3d_transposed", max_err_conv3d_transposed),
    ("batchnorm3d_train", max_err_bn_train),
    ("batchnorm3d_eval", max_err_bn_eval),
    ("range_loss", max_err_range_loss),
    ("mask_loss", max_err_mask_loss),
    ("chamfer_loss", max_err_chamfer_loss),
];

/// Central finite-difference checks (h = 1e-4, f64) for every tensor op and
/// both image losses, `trials` random tensors each.
pub fn gradient_checks(trials: usize) -> Vec<CheckOutcome> {
    OP_CASES
        .iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let seed = 0x5eed_0000 + trial as u64 * 131 + name.len() as u64;
                worst = worst.max(case(seed));
            }
            CheckOutcome::new(
                format!("gradcheck/{name}"),
                worst <= GRADCHECK_TOL,
                format!("max rel err {worst:.3e} over {trials} trials (tol {GRADCHECK_TOL:.0e})"),
            )
        })
        .collect()
}

/// Round trip B over random in-FOV points plus round trip A over random
/// images, for both the desk and KITTI geometries.
pub fn projection_checks(points: usize, images: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for intr in [SensorIntrinsics::desk_32x64(), SensorIntrinsics::kitti_64x2048()] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_az = 0.0f64;
        let mut worst_el = 0.0f64;
        let mut range_mismatch = 0usize;
        for _ in 0..points {
            let az = rng.gen_range(-PI..PI);
            let el = rng.gen_range(-intr.fov_down * 0.9999..intr.fov_up * 0.9999);
            let r = rng.gen_range(intr.r_min..intr.r_max);
            let p = Point3::new(
                r * el.cos() * az.cos(),
                r * el.cos() * az.sin(),
                r * el.sin(),
            );
            let (v, u) = intr.pixel_of(&p).expect("in-fov point projects");
            let q = intr.pixel_direction(v, u) * (r as f32 as f64);
            let az_q = q.y.atan2(q.x);
            let el_q = (q.z / q.norm()).asin();
            let mut d_az = (az_q - az).abs();
            if d_az > PI {
                d_az = 2.0 * PI - d_az;
            }
            worst_az = worst_az.max(d_az);
            worst_el = worst_el.max((el_q - el).abs());
            if (q.norm() - r as f32 as f64).abs() > 1e-9 * r {
                range_mismatch += 1;
            }
        }
        let az_bin = 2.0 * PI / intr.width as f64;
        let el_bin = intr.fov() / intr.height as f64;
        let passed = worst_az <= az_bin + 1e-12 && worst_el <= el_bin + 1e-12 && range_mismatch == 0;
        out.push(CheckOutcome::new(
            format!("projection/point_round_trip_{}x{}", intr.height, intr.width),
            passed,
            format!(
                "azimuth {worst_az:.2e} <= bin {az_bin:.2e}, elevation {worst_el:.2e} <= bin {el_bin:.2e}, {points} points"
            ),
        ));

        let mut exact = true;
        for i in 0..images {
            let mut img = RangeImage::empty(intr);
            for v in img.values.iter_mut() {
                if rng.gen_bool(0.6) {
                    *v = rng.gen_range(intr.r_min..intr.r_max) as f32;
                }
            }
            let back = project(&unproject(&img, None), &intr);
            if back.values != img.values {
                exact = false;
                log::error!("image round trip mismatch at image {i}");
                break;
            }
        }
        out.push(CheckOutcome::new(
            format!("projection/image_round_trip_{}x{}", intr.height, intr.width),
            exact,
            format!("{images} random images bit-exact on the valid set"),
        ));
    }
    out
}

/// Accelerated Chamfer vs the direct-sum oracle, plus symmetry and the c²
/// scaling law.
pub fn chamfer_oracle_checks(pairs: usize, max_points: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = |n: usize, rng: &mut ChaCha8Rng| {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-3.0..3.0),
                    )
                })
                .collect(),
        )
    };
    let mut worst = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..pairs {
        let n = rng.gen_range(1..=max_points);
        let m = rng.gen_range(1..=max_points);
        let a = cloud(n, &mut rng);
        let b = cloud(m, &mut rng);
        let fast = chamfer(&a, &b).unwrap();
        let brute = chamfer_brute_force(&a, &b).unwrap();
        worst = worst.max((fast - brute).abs());
        worst_sym = worst_sym.max((chamfer(&b, &a).unwrap() - fast).abs());
        let c = 1.75f64;
        let scale = |cl: &PointCloud| {
            PointCloud::new(cl.points.iter().map(|p| Point3::from(p.coords * c)).collect())
        };
        let scaled = chamfer(&scale(&a), &scale(&b)).unwrap();
        worst_scale = worst_scale.max((scaled - c * c * fast).abs() / (1.0 + scaled.abs()));
    }
    vec![
        CheckOutcome::new(
            "chamfer/oracle",
            worst <= 1e-9,
            format!("max |fast - brute| = {worst:.3e} over {pairs} pairs (tol 1e-9)"),
        ),
        CheckOutcome::new(
            "chamfer/symmetry",
            worst_sym <= 1e-12,
            format!("max asymmetry {worst_sym:.3e}"),
        ),
        CheckOutcome::new(
            "chamfer/c2_scaling",
            worst_scale <= 1e-9,
            format!("max relative scaling error {worst_scale:.3e}"),
        ),
    ]
}

/// Byte-level round trips of the range-image file and the parameter table.
pub fn persistence_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = SensorIntrinsics::desk_32x64();
    let mut img = RangeImage::empty(intr);
    for v in img.values.iter_mut() {
        if rng.gen_bool(0.5) {
            *v = rng.gen_range(intr.r_min..intr.r_max) as f32;
        }
    }
    let dir = std::env::temp_dir().join(format!("pcf_selftest_{seed}_{}", std::process::id()));
    let _ = std::fs::create_dir_all(&dir);
    let rimg_path = dir.join("probe.rimg");
    let rimg_ok = (|| -> crate::Result<bool> {
        crate::projection::write_range_image(&rimg_path, &img)?;
        let bytes_a = std::fs::read(&rimg_path)?;
        let back = crate::projection::read_range_image(&rimg_path)?;
        crate::projection::write_range_image(&rimg_path, &back)?;
        Ok(back == img && std::fs::read(&rimg_path)? == bytes_a)
    })()
    .unwrap_or(false);

    let mut table = crate::autodiff::ParamTable::default();
    table.push("probe.weight", vec![2, 3], rand_vec(&mut rng, 6, -1.0, 1.0).iter().map(|&v| v as f32).collect());
    table.push("probe.bias", vec![2], vec![0.25, -0.5]);
    let bytes = table.encode();
    let table_ok = crate::autodiff::ParamTable::decode(&bytes)
        .map(|t| t.encode() == bytes)
        .unwrap_or(false);
    let _ = std::fs::remove_dir_all(&dir);
    vec![
        CheckOutcome::new("persistence/range_image", rimg_ok, "write-read-write bit-exact".into()),
        CheckOutcome::new("persistence/param_table", table_ok, "encode-decode-encode bit-exact".into()),
    ]
}

/// The `selftest` battery. `fast` trims trial counts; the acceptance suite
/// runs the full counts directly.
pub fn run_selftest(fast: bool) -> Vec<CheckOutcome> {
    let (trials, points, images, pairs) = if fast {
        (3, 20_000, 10, 25)
    } else {
        (20, 100_000, 100, 100)
    };
    let mut out = gradient_checks(trials);
    out.extend(projection_checks(points, images, 0xa11ce));
    out.extend(chamfer_oracle_checks(pairs, 500, 0xbee));
    out.extend(persistence_checks(0xcafe));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_selftest_passes() {
        for outcome in run_selftest(true) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
