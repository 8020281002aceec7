//! Elementwise and structural tensor operations with backward rules.

use super::elem::Elem;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn same_shape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

pub fn add<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b)?;
    let data: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| E::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |gy| vec![Some(gy.to_vec()), Some(gy.to_vec())],
    ))
}

pub fn mul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b)?;
    let data: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| E::from_f64(x.to_f64() * y.to_f64()))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move |gy| {
            let ga: Vec<E> = gy
                .iter()
                .zip(bc.data().iter())
                .map(|(g, v)| E::from_f64(g.to_f64() * v.to_f64()))
                .collect();
            let gb: Vec<E> = gy
                .iter()
                .zip(ac.data().iter())
                .map(|(g, v)| E::from_f64(g.to_f64() * v.to_f64()))
                .collect();
            vec![Some(ga), Some(gb)]
        },
    ))
}

/// y = scale * x + offset.
pub fn affine<E: Elem>(x: &Tensor<E>, scale: f64, offset: f64) -> Tensor<E> {
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|v| E::from_f64(scale * v.to_f64() + offset))
        .collect();
    Tensor::from_op(
        "affine",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |gy| {
            vec![Some(
                gy.iter().map(|g| E::from_f64(g.to_f64() * scale)).collect(),
            )]
        },
    )
}

pub fn sum<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let total: f64 = x.data().iter().map(|v| v.to_f64()).sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![E::from_f64(total)],
        vec![x.clone()],
        move |gy| vec![Some(vec![gy[0]; n])],
    )
}

pub fn leaky_relu<E: Elem>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|v| {
            let v = v.to_f64();
            E::from_f64(if v > 0.0 { v } else { slope * v })
        })
        .collect();
    let xc = x.clone();
    Tensor::from_op(
        "leaky_relu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |gy| {
            let gx: Vec<E> = gy
                .iter()
                .zip(xc.data().iter())
                .map(|(g, v)| {
                    let f = if v.to_f64() > 0.0 { 1.0 } else { slope };
                    E::from_f64(g.to_f64() * f)
                })
                .collect();
            vec![Some(gx)]
        },
    )
}

pub fn sigmoid<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|v| E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect();
    let out = data.clone();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move |gy| {
            let gx: Vec<E> = gy
                .iter()
                .zip(out.iter())
                .map(|(g, y)| {
                    let y = y.to_f64();
                    E::from_f64(g.to_f64() * y * (1.0 - y))
                })
                .collect();
            vec![Some(gx)]
        },
    )
}

/// Concatenation along `axis`; inputs must agree on every other axis.
pub fn concat<E: Elem>(xs: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::Config(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for x in xs {
        if x.shape().len() != rank {
            return Err(Error::shape(format!("rank {rank}"), format!("{:?}", x.shape())));
        }
        for (d, (&a, &b)) in first.shape().iter().zip(x.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(
                    format!("{:?} (axis {d})", first.shape()),
                    format!("{:?}", x.shape()),
                ));
            }
        }
        out_shape[axis] += x.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(total);
    for o in 0..outer {
        for x in xs {
            let mid = x.shape()[axis];
            let chunk = mid * inner;
            let src = x.data();
            data.extend_from_slice(&src[o * chunk..(o + 1) * chunk]);
        }
    }
    let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let out_mid = out_shape[axis];
    Ok(Tensor::from_op(
        "concat",
        out_shape,
        data,
        xs.to_vec(),
        move |gy| {
            let mut grads: Vec<Vec<E>> = sizes
                .iter()
                .map(|&m| Vec::with_capacity(outer * m * inner))
                .collect();
            for o in 0..outer {
                let mut offset = o * out_mid * inner;
                for (g, &m) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&gy[offset..offset + m * inner]);
                    offset += m * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        },
    ))
}

/// Contiguous slice [start, start+len) along `axis`.
pub fn narrow<E: Elem>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Tensor<E> {
    let shape = x.shape().to_vec();
    assert!(axis < shape.len() && start + len <= shape[axis], "narrow out of range");
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    {
        let src = x.data();
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
    }
    let total = outer * mid * inner;
    Tensor::from_op(
        "narrow",
        out_shape,
        data,
        vec![x.clone()],
        move |gy| {
            let mut gx = vec![E::ZERO; total];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
            }
            vec![Some(gx)]
        },
    )
}

pub fn reshape<E: Elem>(x: &Tensor<E>, new_shape: Vec<usize>) -> Tensor<E> {
    assert_eq!(
        new_shape.iter().product::<usize>(),
        x.numel(),
        "reshape must preserve the element count"
    );
    Tensor::from_op(
        "reshape",
        new_shape,
        x.to_vec(),
        vec![x.clone()],
        |gy| vec![Some(gy.to_vec())],
    )
}

/// Adds a per-channel bias to a (C, ...) tensor.
pub fn add_channel_bias<E: Elem>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let channels = x.shape()[0];
    if bias.shape() != [channels] {
        return Err(Error::shape(
            format!("bias [{channels}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let per = x.numel() / channels;
    let data: Vec<E> = {
        let src = x.data();
        let b = bias.data();
        src.iter()
            .enumerate()
            .map(|(i, v)| E::from_f64(v.to_f64() + b[i / per].to_f64()))
            .collect()
    };
    Ok(Tensor::from_op(
        "add_channel_bias",
        x.shape().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        move |gy| {
            let mut gb = vec![0.0f64; channels];
            for (i, g) in gy.iter().enumerate() {
                gb[i / per] += g.to_f64();
            }
            vec![
                Some(gy.to_vec()),
                Some(gb.into_iter().map(E::from_f64).collect()),
            ]
        },
    ))
}

/// Repeats the final time slice of a (C, T, H, W) tensor `extra` times.
pub fn repeat_last_time<E: Elem>(x: &Tensor<E>, extra: usize) -> Tensor<E> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 4, "repeat_last_time expects (C, T, H, W)");
    let (c, t, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out_shape = shape.clone();
    out_shape[1] = t + extra;
    let mut data = Vec::with_capacity(c * (t + extra) * hw);
    {
        let src = x.data();
        for ch in 0..c {
            let base = ch * t * hw;
            data.extend_from_slice(&src[base..base + t * hw]);
            let last = &src[base + (t - 1) * hw..base + t * hw];
            for _ in 0..extra {
                data.extend_from_slice(last);
            }
        }
    }
    Tensor::from_op(
        "repeat_last_time",
        out_shape,
        data,
        vec![x.clone()],
        move |gy| {
            let mut gx = vec![E::ZERO; c * t * hw];
            let to = t + extra;
            for ch in 0..c {
                for tt in 0..to {
                    let dst_t = tt.min(t - 1);
                    let src = (ch * to + tt) * hw;
                    let dst = (ch * t + dst_t) * hw;
                    for i in 0..hw {
                        gx[dst + i] = E::from_f64(gx[dst + i].to_f64() + gy[src + i].to_f64());
                    }
                }
            }
            vec![Some(gx)]
        },
    )
}

/// Matches a skip tensor's temporal length to the decoder's: longer skips are
/// cropped to their most recent slices, shorter ones repeat the last slice.
pub fn align_time<E: Elem>(x: &Tensor<E>, target_t: usize) -> Tensor<E> {
    let t = x.shape()[1];
    if t == target_t {
        x.clone()
    } else if t > target_t {
        narrow(x, 1, t - target_t, target_t)
    } else {
        repeat_last_time(x, target_t - t)
    }
}

// ---------------------------------------------------------------------------
// Padding of the (T, H, W) axes of a (C, T, H, W) tensor.
// ---------------------------------------------------------------------------

/// Symmetric padding mode of one spatial/temporal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    None,
    /// Zero padding of the given amount on both sides.
    Zero(usize),
    /// Wrap-around padding of the given amount on both sides.
    Circular(usize),
}

impl PadMode {
    pub fn amount(&self) -> usize {
        match self {
            PadMode::None => 0,
            PadMode::Zero(n) | PadMode::Circular(n) => *n,
        }
    }

    fn is_circular(&self) -> bool {
        matches!(self, PadMode::Circular(_))
    }
}

#[inline]
fn src_index(padded: usize, pad: usize, len: usize, circular: bool) -> Option<usize> {
    let i = padded as isize - pad as isize;
    if circular {
        Some(i.rem_euclid(len as isize) as usize)
    } else if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        None
    }
}

pub(crate) fn pad3d_raw<E: Elem>(
    x: &[E],
    shape: [usize; 4],
    modes: [PadMode; 3],
) -> (Vec<E>, [usize; 4]) {
    let [c, t, h, w] = shape;
    for (len, m) in [t, h, w].iter().zip(&modes) {
        assert!(
            !m.is_circular() || m.amount() < *len,
            "circular padding amount must be smaller than the axis length"
        );
    }
    let [pt, ph, pw] = [modes[0].amount(), modes[1].amount(), modes[2].amount()];
    let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w + 2 * pw);
    let mut out = vec![E::ZERO; c * tp * hp * wp];
    for ch in 0..c {
        for jt in 0..tp {
            let Some(it) = src_index(jt, pt, t, modes[0].is_circular()) else {
                continue;
            };
            for jh in 0..hp {
                let Some(ih) = src_index(jh, ph, h, modes[1].is_circular()) else {
                    continue;
                };
                for jw in 0..wp {
                    let Some(iw) = src_index(jw, pw, w, modes[2].is_circular()) else {
                        continue;
                    };
                    out[((ch * tp + jt) * hp + jh) * wp + jw] =
                        x[((ch * t + it) * h + ih) * w + iw];
                }
            }
        }
    }
    (out, [c, tp, hp, wp])
}

pub(crate) fn pad3d_adjoint_raw<E: Elem>(
    gy: &[E],
    padded_shape: [usize; 4],
    orig_shape: [usize; 4],
    modes: [PadMode; 3],
) -> Vec<E> {
    let [c, tp, hp, wp] = padded_shape;
    let [_, t, h, w] = orig_shape;
    let [pt, ph, pw] = [modes[0].amount(), modes[1].amount(), modes[2].amount()];
    let mut gx = vec![0.0f64; c * t * h * w];
    for ch in 0..c {
        for jt in 0..tp {
            let Some(it) = src_index(jt, pt, t, modes[0].is_circular()) else {
                continue;
            };
            for jh in 0..hp {
                let Some(ih) = src_index(jh, ph, h, modes[1].is_circular()) else {
                    continue;
                };
                for jw in 0..wp {
                    let Some(iw) = src_index(jw, pw, w, modes[2].is_circular()) else {
                        continue;
                    };
                    gx[((ch * t + it) * h + ih) * w + iw] +=
                        gy[((ch * tp + jt) * hp + jh) * wp + jw].to_f64();
                }
            }
        }
    }
    gx.into_iter().map(E::from_f64).collect()
}

fn shape4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a (C, T, H, W) tensor");
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Pads the (T, H, W) axes symmetrically.
pub fn pad3d<E: Elem>(x: &Tensor<E>, modes: [PadMode; 3]) -> Tensor<E> {
    let in_shape = shape4(x.shape());
    let (data, out_shape) = pad3d_raw(&x.data(), in_shape, modes);
    Tensor::from_op(
        "pad3d",
        out_shape.to_vec(),
        data,
        vec![x.clone()],
        move |gy| vec![Some(pad3d_adjoint_raw(gy, out_shape, in_shape, modes))],
    )
}

/// Adjoint of [`pad3d`]: crops zero-padded borders and folds circular borders
/// back onto the interior. Inverse shape bookkeeping of pad3d.
pub fn pad3d_adjoint<E: Elem>(x: &Tensor<E>, modes: [PadMode; 3]) -> Tensor<E> {
    let padded_shape = shape4(x.shape());
    let [c, tp, hp, wp] = padded_shape;
    let [pt, ph, pw] = [modes[0].amount(), modes[1].amount(), modes[2].amount()];
    assert!(tp > 2 * pt && hp > 2 * ph && wp > 2 * pw, "pad3d_adjoint underflow");
    let orig_shape = [c, tp - 2 * pt, hp - 2 * ph, wp - 2 * pw];
    let data = pad3d_adjoint_raw(&x.data(), padded_shape, orig_shape, modes);
    Tensor::from_op(
        "pad3d_adjoint",
        orig_shape.to_vec(),
        data,
        vec![x.clone()],
        move |gy| vec![Some(pad3d_raw(gy, orig_shape, modes).0)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::backward;

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::constant(vec![2], vec![-2.0f64, 3.0]);
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.to_vec(), vec![-0.4, 3.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let x = Tensor::constant(vec![1], vec![0.0f64]);
        assert_eq!(sigmoid(&x).value(), 0.5);
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::constant(vec![2, 3], (0..6).map(|v| v as f64).collect());
        let b = Tensor::constant(vec![4, 3], (6..18).map(|v| v as f64).collect());
        let y = concat(&[a, b], 0).unwrap();
        assert_eq!(y.shape(), &[6, 3]);
        assert_eq!(y.to_vec(), (0..18).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn concat_rejects_mismatched_axes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 4]);
        assert!(concat(&[a, b], 0).is_err());
    }

    #[test]
    fn concat_middle_axis_backward_splits() {
        let a = Tensor::param(vec![2, 1, 2], vec![1.0f64; 4]);
        let b = Tensor::param(vec![2, 2, 2], vec![2.0f64; 8]);
        let y = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        backward(&sum(&y)).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn narrow_extracts_and_scatters() {
        let x = Tensor::param(vec![3, 2], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = narrow(&x, 0, 1, 2);
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
        backward(&sum(&y)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn circular_pad_wraps_width() {
        // One row of four columns: [1, 2, 3, 4] -> [4, 1, 2, 3, 4, 1].
        let x = Tensor::constant(vec![1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = pad3d(&x, [PadMode::None, PadMode::None, PadMode::Circular(1)]);
        assert_eq!(y.shape(), &[1, 1, 1, 6]);
        assert_eq!(y.to_vec(), vec![4.0, 1.0, 2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn zero_pad_inserts_zeros() {
        let x = Tensor::constant(vec![1, 1, 2, 1], vec![5.0f64, 6.0]);
        let y = pad3d(&x, [PadMode::None, PadMode::Zero(1), PadMode::None]);
        assert_eq!(y.shape(), &[1, 1, 4, 1]);
        assert_eq!(y.to_vec(), vec![0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn pad_adjoint_inverts_shapes_and_folds() {
        let x = Tensor::constant(vec![1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]);
        let modes = [PadMode::None, PadMode::None, PadMode::Circular(1)];
        let padded = pad3d(&x, modes);
        let folded = pad3d_adjoint(&padded, modes);
        assert_eq!(folded.shape(), x.shape());
        // Columns 0 and 3 each gained one wrapped copy.
        assert_eq!(folded.to_vec(), vec![2.0, 2.0, 3.0, 8.0]);
    }

    #[test]
    fn repeat_last_time_copies_and_accumulates() {
        let x = Tensor::param(vec![1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = repeat_last_time(&x, 2);
        assert_eq!(y.shape(), &[1, 4, 1, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        backward(&sum(&y)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn bias_adds_per_channel() {
        let x = Tensor::param(vec![2, 2], vec![0.0f64; 4]);
        let b = Tensor::param(vec![2], vec![1.0f64, -2.0]);
        let y = add_channel_bias(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, -2.0, -2.0]);
        backward(&sum(&y)).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }
}
