//! 3D convolution (cross-correlation), its transpose, and their gradients.
//!
//! Tensors are laid out (C, T, H, W) row-major; weights (C_out, C_in, k_t,
//! k_h, k_w). The transposed operation with a given spec is the exact adjoint
//! of the plain convolution with that spec: ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩.
//! Each output element is reduced sequentially in f64, so results are
//! bit-identical for any worker-thread count.

use super::elem::Elem;
use super::ops::{add_channel_bias, pad3d, pad3d_adjoint, PadMode};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Geometry of one (possibly transposed) convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k_t, k_h, k_w).
    pub kernel: [usize; 3],
    /// (s_t, s_h, s_w).
    pub stride: [usize; 3],
    /// Per-axis symmetric padding of (T, H, W).
    pub pad: [PadMode; 3],
    pub transposed: bool,
}

impl ConvSpec {
    pub fn plain(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [PadMode; 3],
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            transposed: false,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [PadMode; 3],
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            transposed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv: channel counts must be >= 1".into()));
        }
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "conv: kernel and stride entries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Weight tensor shape. A transposed spec shares the weight layout of the
    /// plain spec it is adjoint to: (self.in, self.out, k).
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kt, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kt, kh, kw]
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Fan-in of the linear map (for initialization).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Output shape for the given input shape, validating the contract.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.validate()?;
        let [c, t, h, w] = input;
        if c != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                format!("{c}"),
            ));
        }
        let mut out = [self.out_channels, 0, 0, 0];
        for a in 0..3 {
            let len = [t, h, w][a];
            let p = self.pad[a].amount();
            if matches!(self.pad[a], PadMode::Circular(_)) && p >= len {
                return Err(Error::Config(format!(
                    "conv: circular padding {p} must be smaller than axis length {len}"
                )));
            }
            let (k, s) = (self.kernel[a], self.stride[a]);
            if self.transposed {
                let full = (len - 1) * s + k;
                if full < 2 * p + 1 {
                    return Err(Error::shape(
                        format!("transposed output >= 1 on axis {a}"),
                        format!("(L-1)s+k = {full} with padding {p}"),
                    ));
                }
                out[a + 1] = full - 2 * p;
            } else {
                let padded = len + 2 * p;
                if padded < k {
                    return Err(Error::shape(
                        format!("padded axis {a} >= kernel {k}"),
                        format!("{padded}"),
                    ));
                }
                out[a + 1] = (padded - k) / s + 1;
            }
        }
        Ok(out)
    }
}

const PAR_THRESHOLD: usize = 1 << 14;

/// Valid (unpadded) strided cross-correlation.
pub(crate) fn conv3d_raw<E: Elem>(
    x: &[E],
    xs: [usize; 4],
    w: &[E],
    ws: [usize; 5],
    stride: [usize; 3],
) -> (Vec<E>, [usize; 4]) {
    let [ci, t, h, wd] = xs;
    let [co, wci, kt, kh, kw] = ws;
    assert_eq!(ci, wci, "weight input channels mismatch");
    let [st, sh, sw] = stride;
    let (to, ho, wo) = ((t - kt) / st + 1, (h - kh) / sh + 1, (wd - kw) / sw + 1);
    let out_per_channel = to * ho * wo;
    let mut y = vec![E::ZERO; co * out_per_channel];

    let fill = |oc: usize, dst: &mut [E]| {
        for ot in 0..to {
            let it0 = ot * st;
            for oh in 0..ho {
                let ih0 = oh * sh;
                for ow in 0..wo {
                    let iw0 = ow * sw;
                    let mut acc = 0.0f64;
                    for ic in 0..ci {
                        for dkt in 0..kt {
                            for dkh in 0..kh {
                                let xbase = ((ic * t + it0 + dkt) * h + ih0 + dkh) * wd + iw0;
                                let wbase = (((oc * ci + ic) * kt + dkt) * kh + dkh) * kw;
                                for dkw in 0..kw {
                                    acc += x[xbase + dkw].to_f64() * w[wbase + dkw].to_f64();
                                }
                            }
                        }
                    }
                    dst[(ot * ho + oh) * wo + ow] = E::from_f64(acc);
                }
            }
        }
    };

    if y.len() >= PAR_THRESHOLD && co > 1 {
        y.par_chunks_exact_mut(out_per_channel)
            .enumerate()
            .for_each(|(oc, dst)| fill(oc, dst));
    } else {
        for (oc, dst) in y.chunks_exact_mut(out_per_channel).enumerate() {
            fill(oc, dst);
        }
    }
    (y, [co, to, ho, wo])
}

/// Gradient of [`conv3d_raw`] w.r.t. its input; doubles as the forward pass of
/// the transposed convolution.
pub(crate) fn conv3d_input_grad_raw<E: Elem>(
    gy: &[E],
    gys: [usize; 4],
    w: &[E],
    ws: [usize; 5],
    stride: [usize; 3],
    in_shape: [usize; 4],
) -> Vec<E> {
    let [co, to, ho, wo] = gys;
    let [wco, ci, kt, kh, kw] = ws;
    assert_eq!(co, wco, "weight output channels mismatch");
    let [ci_in, t, h, wd] = in_shape;
    assert_eq!(ci, ci_in);
    let [st, sh, sw] = stride;
    let per_channel = t * h * wd;
    let mut gx = vec![E::ZERO; ci * per_channel];

    let fill = |ic: usize, dst: &mut [E]| {
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..wd {
                    let mut acc = 0.0f64;
                    for oc in 0..co {
                        for dkt in 0..kt {
                            if it < dkt || (it - dkt) % st != 0 {
                                continue;
                            }
                            let ot = (it - dkt) / st;
                            if ot >= to {
                                continue;
                            }
                            for dkh in 0..kh {
                                if ih < dkh || (ih - dkh) % sh != 0 {
                                    continue;
                                }
                                let oh = (ih - dkh) / sh;
                                if oh >= ho {
                                    continue;
                                }
                                for dkw in 0..kw {
                                    if iw < dkw || (iw - dkw) % sw != 0 {
                                        continue;
                                    }
                                    let ow = (iw - dkw) / sw;
                                    if ow >= wo {
                                        continue;
                                    }
                                    let gyi = ((oc * to + ot) * ho + oh) * wo + ow;
                                    let wi = (((oc * ci + ic) * kt + dkt) * kh + dkh) * kw + dkw;
                                    acc += gy[gyi].to_f64() * w[wi].to_f64();
                                }
                            }
                        }
                    }
                    dst[(it * h + ih) * wd + iw] = E::from_f64(acc);
                }
            }
        }
    };

    if gx.len() >= PAR_THRESHOLD && ci > 1 {
        gx.par_chunks_exact_mut(per_channel)
            .enumerate()
            .for_each(|(ic, dst)| fill(ic, dst));
    } else {
        for (ic, dst) in gx.chunks_exact_mut(per_channel).enumerate() {
            fill(ic, dst);
        }
    }
    gx
}

/// Gradient of [`conv3d_raw`] w.r.t. its weights.
pub(crate) fn conv3d_weight_grad_raw<E: Elem>(
    x: &[E],
    xs: [usize; 4],
    gy: &[E],
    gys: [usize; 4],
    stride: [usize; 3],
    ws: [usize; 5],
) -> Vec<E> {
    let [ci, t, h, wd] = xs;
    let [co, to, ho, wo] = gys;
    let [wco, wci, kt, kh, kw] = ws;
    assert_eq!(co, wco);
    assert_eq!(ci, wci);
    let [st, sh, sw] = stride;
    let per_out_channel = ci * kt * kh * kw;
    let mut gw = vec![E::ZERO; co * per_out_channel];

    let fill = |oc: usize, dst: &mut [E]| {
        for ic in 0..ci {
            for dkt in 0..kt {
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let mut acc = 0.0f64;
                        for ot in 0..to {
                            let it = ot * st + dkt;
                            for oh in 0..ho {
                                let ih = oh * sh + dkh;
                                let xbase = ((ic * t + it) * h + ih) * wd + dkw;
                                let gybase = ((oc * to + ot) * ho + oh) * wo;
                                for ow in 0..wo {
                                    acc += gy[gybase + ow].to_f64()
                                        * x[xbase + ow * sw].to_f64();
                                }
                            }
                        }
                        dst[((ic * kt + dkt) * kh + dkh) * kw + dkw] = E::from_f64(acc);
                    }
                }
            }
        }
    };

    if co * per_out_channel >= PAR_THRESHOLD && co > 1 {
        gw.par_chunks_exact_mut(per_out_channel)
            .enumerate()
            .for_each(|(oc, dst)| fill(oc, dst));
    } else {
        for (oc, dst) in gw.chunks_exact_mut(per_out_channel).enumerate() {
            fill(oc, dst);
        }
    }
    gw
}

fn check_weight_bias<E: Elem>(spec: &ConvSpec, w: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    let expect = spec.weight_shape();
    if w.shape() != expect {
        return Err(Error::shape(
            format!("weights {expect:?}"),
            format!("{:?}", w.shape()),
        ));
    }
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape(
            format!("bias [{}]", spec.out_channels),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn shape4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::shape("(C, T, H, W) tensor", format!("{shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Core valid convolution as a graph op (no padding, no bias).
fn core_conv<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, stride: [usize; 3]) -> Tensor<E> {
    let xs = shape4(x.shape()).expect("core_conv input rank");
    let ws: [usize; 5] = x_weight_shape(w);
    let (data, out_shape) = conv3d_raw(&x.data(), xs, &w.data(), ws, stride);
    let (xc, wc) = (x.clone(), w.clone());
    let (x_tracked, w_tracked) = (x.requires_grad(), w.requires_grad());
    Tensor::from_op(
        "conv3d",
        out_shape.to_vec(),
        data,
        vec![x.clone(), w.clone()],
        move |gy| {
            let gx = x_tracked.then(|| {
                conv3d_input_grad_raw(gy, out_shape, &wc.data(), ws, stride, xs)
            });
            let gw = w_tracked.then(|| {
                conv3d_weight_grad_raw(&xc.data(), xs, gy, out_shape, stride, ws)
            });
            vec![gx, gw]
        },
    )
}

/// Core transposed convolution (adjoint of [`core_conv`] with the same
/// weight), as a graph op.
fn core_conv_transposed<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, stride: [usize; 3]) -> Tensor<E> {
    let xs = shape4(x.shape()).expect("core_conv_transposed input rank");
    let ws: [usize; 5] = x_weight_shape(w);
    let [wco, wci, kt, kh, kw] = ws;
    assert_eq!(xs[0], wco, "transposed input channels must match weight dim 0");
    let [st, sh, sw] = stride;
    let out_shape = [
        wci,
        (xs[1] - 1) * st + kt,
        (xs[2] - 1) * sh + kh,
        (xs[3] - 1) * sw + kw,
    ];
    let data = conv3d_input_grad_raw(&x.data(), xs, &w.data(), ws, stride, out_shape);
    let (xc, wc) = (x.clone(), w.clone());
    let (x_tracked, w_tracked) = (x.requires_grad(), w.requires_grad());
    Tensor::from_op(
        "conv3d_transposed",
        out_shape.to_vec(),
        data,
        vec![x.clone(), w.clone()],
        move |gy| {
            let gx = x_tracked.then(|| conv3d_raw(gy, out_shape, &wc.data(), ws, stride).0);
            let gw = w_tracked.then(|| {
                conv3d_weight_grad_raw(gy, out_shape, &xc.data(), xs, stride, ws)
            });
            vec![gx, gw]
        },
    )
}

fn x_weight_shape<E: Elem>(w: &Tensor<E>) -> [usize; 5] {
    let s = w.shape();
    assert_eq!(s.len(), 5, "weights must be rank 5");
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Strided 3D convolution with per-axis padding and bias.
pub fn conv3d<E: Elem>(
    x: &Tensor<E>,
    spec: &ConvSpec,
    weights: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    if spec.transposed {
        return conv3d_transposed(x, spec, weights, bias);
    }
    spec.output_shape(shape4(x.shape())?)?;
    check_weight_bias(spec, weights, bias)?;
    let padded = pad3d(x, spec.pad);
    let y = core_conv(&padded, weights, spec.stride);
    add_channel_bias(&y, bias)
}

/// Transposed 3D convolution: the adjoint of [`conv3d`] with the same spec
/// geometry, plus bias.
pub fn conv3d_transposed<E: Elem>(
    x: &Tensor<E>,
    spec: &ConvSpec,
    weights: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    if !spec.transposed {
        return Err(Error::Config(
            "conv3d_transposed requires a transposed spec".into(),
        ));
    }
    spec.output_shape(shape4(x.shape())?)?;
    check_weight_bias(spec, weights, bias)?;
    let y = core_conv_transposed(x, weights, spec.stride);
    let cropped = pad3d_adjoint(&y, spec.pad);
    add_channel_bias(&cropped, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, param: bool) -> Tensor<f64> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if param {
            Tensor::param(shape, data)
        } else {
            Tensor::constant(shape, data)
        }
    }

    /// Direct-sum reference convolution (independent of the kernel loops):
    /// explicit padding materialization followed by quadruple loops in the
    /// mathematical definition order.
    fn conv_reference(
        x: &[f64],
        xs: [usize; 4],
        w: &[f64],
        ws: [usize; 5],
        stride: [usize; 3],
        pad: [PadMode; 3],
    ) -> (Vec<f64>, [usize; 4]) {
        let [c, t, h, wd] = xs;
        let [pt, ph, pw] = [pad[0].amount(), pad[1].amount(), pad[2].amount()];
        let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w_len(wd, pw));
        // materialize padding
        let mut xp = vec![0.0; c * tp * hp * wp];
        for ic in 0..c {
            for jt in 0..tp {
                for jh in 0..hp {
                    for jw in 0..wp {
                        let src = |j: usize, p: usize, l: usize, circ: bool| -> Option<usize> {
                            let i = j as isize - p as isize;
                            if circ {
                                Some(i.rem_euclid(l as isize) as usize)
                            } else if i >= 0 && (i as usize) < l {
                                Some(i as usize)
                            } else {
                                None
                            }
                        };
                        let circ =
                            |m: &PadMode| matches!(m, PadMode::Circular(_));
                        if let (Some(it), Some(ih), Some(iw)) = (
                            src(jt, pt, t, circ(&pad[0])),
                            src(jh, ph, h, circ(&pad[1])),
                            src(jw, pw, wd, circ(&pad[2])),
                        ) {
                            xp[((ic * tp + jt) * hp + jh) * wp + jw] =
                                x[((ic * t + it) * h + ih) * wd + iw];
                        }
                    }
                }
            }
        }
        let [co, ci, kt, kh, kw] = ws;
        assert_eq!(ci, c);
        let [st, sh, sw] = stride;
        let (to, ho, wo) = ((tp - kt) / st + 1, (hp - kh) / sh + 1, (wp - kw) / sw + 1);
        let mut y = vec![0.0; co * to * ho * wo];
        for oc in 0..co {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for a in 0..kt {
                                for b in 0..kh {
                                    for d in 0..kw {
                                        let xi = ((ic * tp + ot * st + a) * hp + oh * sh + b)
                                            * wp
                                            + ow * sw
                                            + d;
                                        let wi =
                                            (((oc * ci + ic) * kt + a) * kh + b) * kw + d;
                                        acc += xp[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[((oc * to + ot) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        (y, [co, to, ho, wo])
    }

    fn w_len(w: usize, p: usize) -> usize {
        w + 2 * p
    }

    #[test]
    fn circular_padded_width_conv_matches_reference() {
        // Frozen from the reference: [1,2,3,4] padded circularly by 1 and
        // convolved with [1,1] gives [5,3,5,7,5].
        let x = Tensor::constant(vec![1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]);
        let w = Tensor::constant(vec![1, 1, 1, 1, 2], vec![1.0f64, 1.0]);
        let b = Tensor::constant(vec![1], vec![0.0f64]);
        let spec = ConvSpec::plain(
            1,
            1,
            [1, 1, 2],
            [1, 1, 1],
            [PadMode::None, PadMode::None, PadMode::Circular(1)],
        );
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 5]);
        assert_eq!(y.to_vec(), vec![5.0, 3.0, 5.0, 7.0, 5.0]);
        let (expect, _) = conv_reference(
            &x.to_vec(),
            [1, 1, 1, 4],
            &w.to_vec(),
            [1, 1, 1, 1, 2],
            [1, 1, 1],
            spec.pad,
        );
        assert_eq!(y.to_vec(), expect);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![1, 2, 3, 4], false);
        let w = Tensor::constant(vec![1, 1, 1, 1, 1], vec![1.0f64]);
        let b = Tensor::constant(vec![1], vec![0.0f64]);
        let spec = ConvSpec::plain(1, 1, [1, 1, 1], [1, 1, 1], [PadMode::None; 3]);
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![2, 2, 3, 3], false);
        let spec = ConvSpec::plain(2, 3, [1, 2, 2], [1, 1, 1], [PadMode::None; 3]);
        let w = Tensor::constant(spec.weight_shape().to_vec(), vec![0.0f64; spec.weight_len()]);
        let b = Tensor::constant(vec![3], vec![0.5f64, -1.0, 2.0]);
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        let per = y.numel() / 3;
        for (i, v) in y.to_vec().iter().enumerate() {
            assert_eq!(*v, b.to_vec()[i / per]);
        }
    }

    #[test]
    fn agrees_with_reference_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..30 {
            let ci = rng.gen_range(1..=4);
            let co = rng.gen_range(1..=3);
            let t = rng.gen_range(1..=5);
            let h = rng.gen_range(1..=8);
            let wd = rng.gen_range(2..=16);
            let kt = rng.gen_range(1..=t.min(3));
            let kh = rng.gen_range(1..=h.min(3));
            let kw = rng.gen_range(1..=wd.min(3));
            let pad = [
                PadMode::None,
                if rng.gen_bool(0.5) {
                    PadMode::Zero(rng.gen_range(0..=1))
                } else {
                    PadMode::None
                },
                if rng.gen_bool(0.5) {
                    PadMode::Circular(rng.gen_range(0..=(wd - 1).min(2)))
                } else {
                    PadMode::Zero(rng.gen_range(0..=1))
                },
            ];
            let stride = [
                rng.gen_range(1..=2.min(kt)),
                rng.gen_range(1..=2.min(kh)),
                rng.gen_range(1..=2.min(kw)),
            ];
            let spec = ConvSpec::plain(ci, co, [kt, kh, kw], stride, pad);
            let x = rand_tensor(&mut rng, vec![ci, t, h, wd], false);
            let w = rand_tensor(&mut rng, spec.weight_shape().to_vec(), false);
            let b = Tensor::constant(vec![co], vec![0.0f64; co]);
            let y = conv3d(&x, &spec, &w, &b).unwrap();
            let (expect, eshape) = conv_reference(
                &x.to_vec(),
                [ci, t, h, wd],
                &w.to_vec(),
                spec.weight_shape(),
                stride,
                pad,
            );
            assert_eq!(y.shape(), eshape, "trial {trial}");
            for (a, e) in y.to_vec().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "trial {trial}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn transposed_upsamples_spatial_axes() {
        let x = Tensor::constant(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let spec = ConvSpec::transposed(1, 1, [1, 2, 2], [1, 2, 2], [PadMode::None; 3]);
        let w = Tensor::constant(spec.weight_shape().to_vec(), vec![1.0f64; 4]);
        let b = Tensor::constant(vec![1], vec![0.0f64]);
        let y = conv3d_transposed(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn transposed_zero_input_yields_bias() {
        let x = Tensor::constant(vec![2, 1, 2, 2], vec![0.0f64; 8]);
        let spec = ConvSpec::transposed(2, 1, [1, 2, 2], [1, 2, 2], [PadMode::None; 3]);
        let w = Tensor::constant(spec.weight_shape().to_vec(), vec![0.7f64; spec.weight_len()]);
        let b = Tensor::constant(vec![1], vec![3.5f64]);
        let y = conv3d_transposed(&x, &spec, &w, &b).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 3.5));
    }

    fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x * y)
            .sum()
    }

    #[test]
    fn transposed_is_adjoint_of_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut trials = 0;
        while trials < 100 {
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let kernel = [
                rng.gen_range(1..=2usize),
                rng.gen_range(1..=2usize),
                rng.gen_range(1..=3usize),
            ];
            let stride = [1, rng.gen_range(1..=kernel[1]), rng.gen_range(1..=kernel[2])];
            let pad = [
                PadMode::None,
                PadMode::Zero(rng.gen_range(0..=1)),
                PadMode::Circular(rng.gen_range(0..=1)),
            ];
            // Transposed shapes invert only stride-exact geometries; pick the
            // output extents first and derive the input lengths from them.
            let mut input = [0usize; 3];
            let mut ok = true;
            for a in 0..3 {
                let out = rng.gen_range(1..=4usize);
                let full = (out - 1) * stride[a] + kernel[a];
                let p = pad[a].amount();
                if full <= 2 * p {
                    ok = false;
                    break;
                }
                input[a] = full - 2 * p;
                if matches!(pad[a], PadMode::Circular(_)) && p >= input[a] {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            trials += 1;
            let [t, h, wd] = input;
            let spec = ConvSpec::plain(ci, co, kernel, stride, pad);
            let tspec = ConvSpec::transposed(co, ci, kernel, stride, pad);
            let x = rand_tensor(&mut rng, vec![ci, t, h, wd], false);
            let w = rand_tensor(&mut rng, spec.weight_shape().to_vec(), false);
            let zb_out = Tensor::constant(vec![co], vec![0.0f64; co]);
            let zb_in = Tensor::constant(vec![ci], vec![0.0f64; ci]);
            let cx = conv3d(&x, &spec, &w, &zb_out).unwrap();
            let y = rand_tensor(&mut rng, cx.shape().to_vec(), false);
            let cty = conv3d_transposed(&y, &tspec, &w, &zb_in).unwrap();
            assert_eq!(cty.shape(), x.shape());
            let lhs = inner(&cx, &y);
            let rhs = inner(&x, &cty);
            assert!((lhs - rhs).abs() <= 1e-9, "adjoint identity: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn stride_one_circular_conv_is_shift_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::plain(
            2,
            3,
            [1, 3, 3],
            [1, 1, 1],
            [PadMode::None, PadMode::Zero(1), PadMode::Circular(1)],
        );
        let x = rand_tensor(&mut rng, vec![2, 2, 4, 8], false);
        let w = rand_tensor(&mut rng, spec.weight_shape().to_vec(), false);
        let b = rand_tensor(&mut rng, vec![3], false);
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        for s in [1isize, 3, -2, 8] {
            let xr = Tensor::constant(
                x.shape().to_vec(),
                crate::projection::rotate_last_axis(&x.to_vec(), 8, s),
            );
            let yr = conv3d(&xr, &spec, &w, &b).unwrap();
            let expected = crate::projection::rotate_last_axis(&y.to_vec(), 8, s);
            assert_eq!(yr.to_vec(), expected, "shift {s}");
        }
    }

    #[test]
    fn shape_mismatch_reports_expected_and_got() {
        let x = Tensor::<f32>::zeros(vec![3, 2, 4, 4]);
        let spec = ConvSpec::plain(2, 1, [1, 1, 1], [1, 1, 1], [PadMode::None; 3]);
        let w = Tensor::<f32>::zeros(spec.weight_shape().to_vec());
        let b = Tensor::<f32>::zeros(vec![1]);
        let err = conv3d(&x, &spec, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("2"), "{msg}");
    }

    #[test]
    fn conv_backward_flows_to_weights_and_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ConvSpec::plain(
            2,
            2,
            [2, 2, 2],
            [1, 1, 1],
            [PadMode::None, PadMode::Zero(1), PadMode::Circular(1)],
        );
        let x = rand_tensor(&mut rng, vec![2, 3, 3, 4], true);
        let w = rand_tensor(&mut rng, spec.weight_shape().to_vec(), true);
        let b = rand_tensor(&mut rng, vec![2], true);
        let y = conv3d(&x, &spec, &w, &b).unwrap();
        crate::autodiff::tensor::backward(&ops::sum(&y)).unwrap();
        assert!(x.grad().is_some());
        assert!(w.grad().is_some());
        assert!(b.grad().is_some());
    }
}
