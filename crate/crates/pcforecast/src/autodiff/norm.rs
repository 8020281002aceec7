//! 3D batch normalization over (C, T, H, W) tensors: each channel is
//! normalized across its (T, H, W) block.

use super::elem::Elem;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;

/// Train/eval switch shared by normalization and the network forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running statistics; updated in train mode, consumed in eval mode.
#[derive(Debug)]
pub struct BnState<E: Elem> {
    pub running_mean: RefCell<Vec<E>>,
    pub running_var: RefCell<Vec<E>>,
}

impl<E: Elem> BnState<E> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: RefCell::new(vec![E::ZERO; channels]),
            running_var: RefCell::new(vec![E::ONE; channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.borrow().len()
    }
}

pub struct BnParams<'a, E: Elem> {
    pub gamma: &'a Tensor<E>,
    pub beta: &'a Tensor<E>,
    pub state: &'a BnState<E>,
    pub eps: f64,
    pub momentum: f64,
}

/// Normalizes per channel, scales by gamma and shifts by beta. Train mode
/// uses batch statistics and updates the running ones; eval mode uses the
/// running statistics. Zero-variance channels are regularized by eps.
pub fn batchnorm3d<E: Elem>(
    x: &Tensor<E>,
    params: &BnParams<'_, E>,
    phase: Phase,
) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("(C, T, H, W)", format!("{shape:?}")));
    }
    let c = shape[0];
    let n = shape[1] * shape[2] * shape[3];
    if params.gamma.shape() != [c] || params.beta.shape() != [c] || params.state.channels() != c {
        return Err(Error::shape(
            format!("batchnorm params for {c} channels"),
            format!(
                "gamma {:?}, beta {:?}, state {}",
                params.gamma.shape(),
                params.beta.shape(),
                params.state.channels()
            ),
        ));
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = match phase {
        Phase::Train => {
            let data = x.data();
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let block = &data[ch * n..(ch + 1) * n];
                let m = block.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
                let v = block
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - m;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            // Running update uses the unbiased variance.
            let mut rm = params.state.running_mean.borrow_mut();
            let mut rv = params.state.running_var.borrow_mut();
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for ch in 0..c {
                rm[ch] = E::from_f64(
                    (1.0 - params.momentum) * rm[ch].to_f64() + params.momentum * mean[ch],
                );
                rv[ch] = E::from_f64(
                    (1.0 - params.momentum) * rv[ch].to_f64()
                        + params.momentum * var[ch] * unbias,
                );
            }
            (mean, var)
        }
        Phase::Eval => (
            params.state.running_mean.borrow().iter().map(|v| v.to_f64()).collect(),
            params.state.running_var.borrow().iter().map(|v| v.to_f64()).collect(),
        ),
    };

    let inv_sigma: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let (gamma_v, beta_v) = (params.gamma.to_f64_vec(), params.beta.to_f64_vec());
    let data: Vec<E> = {
        let src = x.data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_sigma[ch], gamma_v[ch], beta_v[ch]);
            for v in &src[ch * n..(ch + 1) * n] {
                out.push(E::from_f64((v.to_f64() - m) * is * g + b));
            }
        }
        out
    };

    let xc = x.clone();
    let x_tracked = x.requires_grad();
    let train = phase == Phase::Train;
    Ok(Tensor::from_op(
        "batchnorm3d",
        shape.to_vec(),
        data,
        vec![x.clone(), params.gamma.clone(), params.beta.clone()],
        move |gy| {
            let src = xc.data();
            let mut gx = vec![E::ZERO; src.len()];
            let mut ggamma = vec![E::ZERO; c];
            let mut gbeta = vec![E::ZERO; c];
            for ch in 0..c {
                let (m, is, g) = (mean[ch], inv_sigma[ch], gamma_v[ch]);
                let block = ch * n..(ch + 1) * n;
                let mut sum_gy = 0.0f64;
                let mut sum_gy_xhat = 0.0f64;
                for (v, gyv) in src[block.clone()].iter().zip(&gy[block.clone()]) {
                    let xhat = (v.to_f64() - m) * is;
                    let gyf = gyv.to_f64();
                    sum_gy += gyf;
                    sum_gy_xhat += gyf * xhat;
                }
                ggamma[ch] = E::from_f64(sum_gy_xhat);
                gbeta[ch] = E::from_f64(sum_gy);
                if x_tracked {
                    if train {
                        let mean_gy = sum_gy / n as f64;
                        let mean_gy_xhat = sum_gy_xhat / n as f64;
                        for (i, (v, gyv)) in
                            src[block.clone()].iter().zip(&gy[block.clone()]).enumerate()
                        {
                            let xhat = (v.to_f64() - m) * is;
                            let d = g * is * (gyv.to_f64() - mean_gy - xhat * mean_gy_xhat);
                            gx[ch * n + i] = E::from_f64(d);
                        }
                    } else {
                        for (i, gyv) in gy[block].iter().enumerate() {
                            gx[ch * n + i] = E::from_f64(gyv.to_f64() * g * is);
                        }
                    }
                }
            }
            vec![x_tracked.then_some(gx), Some(ggamma), Some(gbeta)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn affine_params(c: usize, gamma: f64, beta: f64) -> (Tensor<f64>, Tensor<f64>, BnState<f64>) {
        (
            Tensor::constant(vec![c], vec![gamma; c]),
            Tensor::constant(vec![c], vec![beta; c]),
            BnState::new(c),
        )
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let (g, b, state) = affine_params(2, 1.0, 0.0);
        let x = Tensor::constant(vec![2, 1, 2, 2], vec![3.0f64, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let y = batchnorm3d(
            &x,
            &BnParams { gamma: &g, beta: &b, state: &state, eps: 1e-5, momentum: 0.1 },
            Phase::Train,
        )
        .unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn beta_sets_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, b, state) = affine_params(3, 1.0, 5.0);
        let data: Vec<f64> = (0..3 * 2 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::constant(vec![3, 2, 4, 4], data);
        let y = batchnorm3d(
            &x,
            &BnParams { gamma: &g, beta: &b, state: &state, eps: 1e-5, momentum: 0.1 },
            Phase::Train,
        )
        .unwrap();
        let n = 2 * 4 * 4;
        let out = y.to_vec();
        for ch in 0..3 {
            let mean: f64 = out[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64;
            assert!((mean - 5.0).abs() < 1e-5, "channel {ch}: {mean}");
        }
    }

    #[test]
    fn eval_mode_applies_running_stats() {
        let (g, b, state) = affine_params(1, 2.0, 0.5);
        *state.running_mean.borrow_mut() = vec![1.0];
        *state.running_var.borrow_mut() = vec![4.0];
        let eps = 1e-5;
        let x = Tensor::constant(vec![1, 1, 1, 3], vec![1.0f64, 3.0, -1.0]);
        let y = batchnorm3d(
            &x,
            &BnParams { gamma: &g, beta: &b, state: &state, eps, momentum: 0.1 },
            Phase::Eval,
        )
        .unwrap();
        for (xv, yv) in x.to_vec().iter().zip(y.to_vec()) {
            let expect = (xv - 1.0) / (4.0f64 + eps).sqrt() * 2.0 + 0.5;
            assert!((yv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let (g, b, state) = affine_params(1, 1.0, 0.0);
        let x = Tensor::constant(vec![1, 1, 1, 4], vec![2.0f64, 4.0, 6.0, 8.0]);
        batchnorm3d(
            &x,
            &BnParams { gamma: &g, beta: &b, state: &state, eps: 1e-5, momentum: 0.1 },
            Phase::Train,
        )
        .unwrap();
        // batch mean 5, biased var 5, unbiased var 20/3.
        let rm = state.running_mean.borrow()[0];
        let rv = state.running_var.borrow()[0];
        assert!((rm - 0.5).abs() < 1e-12, "{rm}");
        assert!((rv - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12, "{rv}");
    }

    #[test]
    fn zero_variance_channel_is_regular() {
        let (g, b, state) = affine_params(1, 1.0, 0.0);
        let x = Tensor::constant(vec![1, 1, 1, 4], vec![7.0f64; 4]);
        let y = batchnorm3d(
            &x,
            &BnParams { gamma: &g, beta: &b, state: &state, eps: 1e-5, momentum: 0.1 },
            Phase::Train,
        )
        .unwrap();
        assert!(y.to_vec().iter().all(|v| v.is_finite() && v.abs() <= 1e-3));
    }
}
