//! The spatio-temporal encoder-decoder.
//!
//! The input layer lifts the (P, H, W) frame stack to C channels. Each
//! encoder stage applies a size-preserving conv block (kernel (1,3,3), zero
//! padding vertically, circular padding horizontally) and a strided
//! downsampling conv with kernel (p_l+1, h_l, w_l) and stride (1, h_l, w_l)
//! that shrinks the tensor to (C_{l+1}, T_l − p_l, H_l/h_l, W_l/w_l). The
//! decoder mirrors the encoder with transposed convolutions; skip connections
//! concatenate the encoder block output into the mirrored stage, where a
//! merge conv restores the channel count. A (1,1,1) head conv with sigmoid
//! yields two channels: ranges mapped onto [r_min, r_max] and validity
//! probabilities.

use crate::autodiff::norm::{BnParams, BnState, Phase};
use crate::autodiff::{no_grad, ops, ConvSpec, Elem, PadMode, ParamTable, Tensor};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::projection::{unproject, FrameStack, RangeImage, SensorIntrinsics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture hyperparameters; every shape in the network follows from
/// these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Past frames P consumed per sample.
    pub past: usize,
    /// Future frames F predicted per sample.
    pub future: usize,
    /// Channels per encoder stage; entry 0 is the input layer width C.
    pub channels: Vec<usize>,
    /// Spatial height divisors h_l per stage.
    pub factors_h: Vec<usize>,
    /// Spatial width divisors w_l per stage.
    pub factors_w: Vec<usize>,
    /// Temporal reductions p_l per stage.
    pub temporal: Vec<usize>,
    pub leaky_slope: f64,
    pub skip_connections: bool,
    pub circular_padding: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub intrinsics: SensorIntrinsics,
}

impl ArchitectureConfig {
    /// KITTI-scale defaults (64x2048, P = F = 5).
    pub fn full(intrinsics: SensorIntrinsics) -> Self {
        ArchitectureConfig {
            past: 5,
            future: 5,
            channels: vec![16, 32, 64, 128],
            factors_h: vec![2, 2, 2, 2],
            factors_w: vec![2, 2, 2, 2],
            temporal: vec![1, 1, 1, 1],
            leaky_slope: 0.2,
            skip_connections: true,
            circular_padding: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            intrinsics,
        }
    }

    /// Desk-scale defaults (32x64, P = F = 5).
    pub fn desk(intrinsics: SensorIntrinsics) -> Self {
        ArchitectureConfig {
            channels: vec![8, 16, 32, 32],
            ..Self::full(intrinsics)
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.intrinsics.validate()?;
        let l = self.channels.len();
        if l == 0 {
            return fail("architecture: at least one stage is required".into());
        }
        if self.factors_h.len() != l || self.factors_w.len() != l || self.temporal.len() != l {
            return fail(format!(
                "architecture: per-stage lists must all have length {l} (h {}, w {}, temporal {})",
                self.factors_h.len(),
                self.factors_w.len(),
                self.temporal.len()
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return fail("architecture: channel counts must be >= 1".into());
        }
        if self.factors_h.iter().any(|&f| f == 0) || self.factors_w.iter().any(|&f| f == 0) {
            return fail("architecture: spatial factors must be >= 1".into());
        }
        if self.past < 1 || self.future < 1 {
            return fail("architecture: past and future must be >= 1".into());
        }
        let prod_h: usize = self.factors_h.iter().product();
        let prod_w: usize = self.factors_w.iter().product();
        if self.intrinsics.height % prod_h != 0 {
            return fail(format!(
                "architecture: product of height factors {prod_h} must divide H = {}",
                self.intrinsics.height
            ));
        }
        if self.intrinsics.width % prod_w != 0 {
            return fail(format!(
                "architecture: product of width factors {prod_w} must divide W = {}",
                self.intrinsics.width
            ));
        }
        let total_p: usize = self.temporal.iter().sum();
        if self.past <= total_p {
            return fail(format!(
                "architecture: P − Σ p_l must be >= 1 (P = {}, Σ p_l = {total_p})",
                self.past
            ));
        }
        // The decoder mirrors the encoder, so the temporal output equals
        // (P − Σ p_l) + Σ p_l; it must match F.
        if self.past != self.future {
            return fail(format!(
                "architecture: mirrored decoder produces F = P = {}, got F = {}",
                self.past, self.future
            ));
        }
        if self.leaky_slope < 0.0 {
            return fail("architecture: leaky slope must be >= 0".into());
        }
        // Circular padding of 1 on the width needs at least 2 columns at the
        // narrowest stage.
        if self.intrinsics.width / prod_w < 2 && self.circular_padding {
            return fail("architecture: bottleneck width must be >= 2 for circular padding".into());
        }
        Ok(())
    }

    fn width_pad(&self) -> PadMode {
        if self.circular_padding {
            PadMode::Circular(1)
        } else {
            PadMode::Zero(1)
        }
    }

    fn block_pad(&self) -> [PadMode; 3] {
        [PadMode::None, PadMode::Zero(1), self.width_pad()]
    }

    /// Output channel count of the downsampling conv at stage `l`.
    fn down_channels(&self, l: usize) -> usize {
        self.channels[(l + 1).min(self.stages() - 1)]
    }

    /// Full layer plan; the single source of truth for parameter shapes,
    /// feature sizes, and the shape audit.
    pub fn plan(&self) -> Result<NetworkPlan> {
        self.validate()?;
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let mut stages = Vec::with_capacity(self.stages());
        let mut feat = [self.channels[0], self.past, h, w];
        for l in 0..self.stages() {
            let c = self.channels[l];
            let c_next = self.down_channels(l);
            let (hl, wl, pl) = (self.factors_h[l], self.factors_w[l], self.temporal[l]);
            let block = ConvSpec::plain(c, c, [1, 3, 3], [1, 1, 1], self.block_pad());
            let down = ConvSpec::plain(
                c,
                c_next,
                [pl + 1, hl, wl],
                [1, hl, wl],
                [PadMode::None; 3],
            );
            let enc_in = feat;
            let enc_out = down.output_shape(block.output_shape(feat)?)?;
            let up = ConvSpec::transposed(
                c_next,
                c,
                [pl + 1, hl, wl],
                [1, hl, wl],
                [PadMode::None; 3],
            );
            let merge_in = if self.skip_connections { 2 * c } else { c };
            let merge = ConvSpec::plain(merge_in, c, [1, 3, 3], [1, 1, 1], self.block_pad());
            stages.push(StagePlan {
                enc_in,
                enc_out,
                block,
                down,
                up,
                merge,
            });
            feat = enc_out;
        }
        let input_conv = ConvSpec::plain(1, self.channels[0], [1, 1, 1], [1, 1, 1], [PadMode::None; 3]);
        let head_conv = ConvSpec::plain(self.channels[0], 2, [1, 1, 1], [1, 1, 1], [PadMode::None; 3]);
        Ok(NetworkPlan {
            input_conv,
            stages,
            head_conv,
            bottleneck: feat,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// Feature shape entering the stage, (C_l, T_l, H_l, W_l).
    pub enc_in: [usize; 4],
    /// Feature shape after downsampling, (C_{l+1}, T_l − p_l, H_l/h_l, W_l/w_l).
    pub enc_out: [usize; 4],
    pub block: ConvSpec,
    pub down: ConvSpec,
    pub up: ConvSpec,
    pub merge: ConvSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub input_conv: ConvSpec,
    pub stages: Vec<StagePlan>,
    pub head_conv: ConvSpec,
    pub bottleneck: [usize; 4],
}

impl NetworkPlan {
    /// Every convolution spec the architecture instantiates, with the feature
    /// shape it consumes.
    pub fn conv_specs(&self) -> Vec<(ConvSpec, [usize; 4])> {
        let mut out = Vec::new();
        let first = self.stages.first().expect("plan has stages");
        out.push((self.input_conv, [1, first.enc_in[1], first.enc_in[2], first.enc_in[3]]));
        for s in &self.stages {
            out.push((s.block, s.enc_in));
            out.push((s.down, s.enc_in));
            out.push((s.up, s.enc_out));
            let merge_in = [s.merge.in_channels, s.enc_in[1], s.enc_in[2], s.enc_in[3]];
            out.push((s.merge, merge_in));
        }
        out.push((
            self.head_conv,
            [self.head_conv.in_channels, first.enc_in[1], first.enc_in[2], first.enc_in[3]],
        ));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_specs()
            .iter()
            .map(|(spec, _)| spec.weight_len() + spec.out_channels)
            .sum::<usize>()
            // gamma + beta per batch-norm; one BN after every conv except the
            // input and head layers.
            + self
                .stages
                .iter()
                .map(|s| {
                    2 * (s.block.out_channels
                        + s.down.out_channels
                        + s.up.out_channels
                        + s.merge.out_channels)
                })
                .sum::<usize>()
    }
}

/// Input standardization constants, computed once over all training range
/// pixels (zeros included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { mean: 0.0, std: 1.0 }
    }
}

impl NormStats {
    pub fn from_images<'a>(images: impl Iterator<Item = &'a RangeImage>) -> Self {
        let mut count = 0usize;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for img in images {
            for &v in &img.values {
                let v = v as f64;
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        if count == 0 {
            return NormStats::default();
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        NormStats {
            mean,
            std: var.sqrt().max(1e-6),
        }
    }
}

struct ConvLayer<E: Elem> {
    spec: ConvSpec,
    weight: Tensor<E>,
    bias: Tensor<E>,
}

struct BnLayer<E: Elem> {
    gamma: Tensor<E>,
    beta: Tensor<E>,
    state: BnState<E>,
}

impl<E: Elem> BnLayer<E> {
    fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::param(vec![channels], vec![E::ONE; channels]),
            beta: Tensor::param(vec![channels], vec![E::ZERO; channels]),
            state: BnState::new(channels),
        }
    }
}

struct EncoderStage<E: Elem> {
    block: ConvLayer<E>,
    block_bn: BnLayer<E>,
    down: ConvLayer<E>,
    down_bn: BnLayer<E>,
}

struct DecoderStage<E: Elem> {
    up: ConvLayer<E>,
    up_bn: BnLayer<E>,
    merge: ConvLayer<E>,
    merge_bn: BnLayer<E>,
}

/// The full parameter set and layer graph of the encoder-decoder.
pub struct ForecastModel<E: Elem> {
    pub config: ArchitectureConfig,
    pub norm_stats: NormStats,
    plan: NetworkPlan,
    input_conv: ConvLayer<E>,
    encoder: Vec<EncoderStage<E>>,
    decoder: Vec<DecoderStage<E>>,
    head: ConvLayer<E>,
}

/// Network output mapped to meters and probabilities, with the 0.5-threshold
/// validity mask applied.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub ranges: Vec<f32>,
    pub mask_prob: Vec<f32>,
    pub valid: Vec<bool>,
    pub future: usize,
    pub intrinsics: SensorIntrinsics,
}

impl Prediction {
    pub fn range_image(&self, t: usize) -> RangeImage {
        let hw = self.intrinsics.height * self.intrinsics.width;
        RangeImage {
            values: self.ranges[t * hw..(t + 1) * hw].to_vec(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn valid_mask(&self, t: usize) -> &[bool] {
        let hw = self.intrinsics.height * self.intrinsics.width;
        &self.valid[t * hw..(t + 1) * hw]
    }

    pub fn cloud(&self, t: usize) -> PointCloud {
        unproject(&self.range_image(t), Some(self.valid_mask(t)))
    }

    pub fn clouds(&self) -> Vec<PointCloud> {
        (0..self.future).map(|t| self.cloud(t)).collect()
    }
}

fn init_conv<E: Elem>(spec: ConvSpec, rng: &mut ChaCha8Rng, slope: f64) -> ConvLayer<E> {
    // Kaiming fan-in scaling with the leaky-ReLU gain.
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (spec.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let weight: Vec<E> = (0..spec.weight_len())
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    ConvLayer {
        spec,
        weight: Tensor::param(spec.weight_shape().to_vec(), weight),
        bias: Tensor::param(vec![spec.out_channels], vec![E::ZERO; spec.out_channels]),
    }
}

impl<E: Elem> ForecastModel<E> {
    /// Deterministic construction: the same config and seed give bit-identical
    /// parameters.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let slope = config.leaky_slope;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_conv = init_conv(plan.input_conv, &mut rng, slope);
        let mut encoder = Vec::with_capacity(plan.stages.len());
        for s in &plan.stages {
            encoder.push(EncoderStage {
                block: init_conv(s.block, &mut rng, slope),
                block_bn: BnLayer::new(s.block.out_channels),
                down: init_conv(s.down, &mut rng, slope),
                down_bn: BnLayer::new(s.down.out_channels),
            });
        }
        let mut decoder = Vec::with_capacity(plan.stages.len());
        for s in &plan.stages {
            decoder.push(DecoderStage {
                up: init_conv(s.up, &mut rng, slope),
                up_bn: BnLayer::new(s.up.out_channels),
                merge: init_conv(s.merge, &mut rng, slope),
                merge_bn: BnLayer::new(s.merge.out_channels),
            });
        }
        let head = init_conv(plan.head_conv, &mut rng, slope);
        Ok(ForecastModel {
            config,
            norm_stats: NormStats::default(),
            plan,
            input_conv,
            encoder,
            decoder,
            head,
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn conv_block(
        &self,
        x: &Tensor<E>,
        conv: &ConvLayer<E>,
        bn: &BnLayer<E>,
        phase: Phase,
    ) -> Result<Tensor<E>> {
        let y = if conv.spec.transposed {
            crate::autodiff::conv3d_transposed(x, &conv.spec, &conv.weight, &conv.bias)?
        } else {
            crate::autodiff::conv3d(x, &conv.spec, &conv.weight, &conv.bias)?
        };
        let y = crate::autodiff::batchnorm3d(
            &y,
            &BnParams {
                gamma: &bn.gamma,
                beta: &bn.beta,
                state: &bn.state,
                eps: self.config.bn_eps,
                momentum: self.config.bn_momentum,
            },
            phase,
        )?;
        Ok(ops::leaky_relu(&y, self.config.leaky_slope))
    }

    /// Standardizes the input, runs the network, and maps the two sigmoid
    /// channels to ranges (meters) and mask probabilities, each (F, H, W).
    pub fn forward_tensors(
        &self,
        input: &FrameStack,
        phase: Phase,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let (p, h, w) = input.shape();
        let intr = &self.config.intrinsics;
        if p != self.config.past || h != intr.height || w != intr.width {
            return Err(Error::shape(
                format!("({}, {}, {})", self.config.past, intr.height, intr.width),
                format!("({p}, {h}, {w})"),
            ));
        }
        let raw = Tensor::constant(
            vec![1, p, h, w],
            input.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        );
        let x = ops::affine(
            &raw,
            1.0 / self.norm_stats.std,
            -self.norm_stats.mean / self.norm_stats.std,
        );

        let mut x = crate::autodiff::conv3d(
            &x,
            &self.input_conv.spec,
            &self.input_conv.weight,
            &self.input_conv.bias,
        )?;
        let mut skips: Vec<Tensor<E>> = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let blocked = self.conv_block(&x, &stage.block, &stage.block_bn, phase)?;
            skips.push(blocked.clone());
            x = self.conv_block(&blocked, &stage.down, &stage.down_bn, phase)?;
        }
        for (l, stage) in self.decoder.iter().enumerate().rev() {
            x = self.conv_block(&x, &stage.up, &stage.up_bn, phase)?;
            if self.config.skip_connections {
                let skip = ops::align_time(&skips[l], x.shape()[1]);
                x = ops::concat(&[x, skip], 0)?;
            }
            x = self.conv_block(&x, &stage.merge, &stage.merge_bn, phase)?;
        }
        let logits =
            crate::autodiff::conv3d(&x, &self.head.spec, &self.head.weight, &self.head.bias)?;
        let activated = ops::sigmoid(&logits);
        let f = self.config.future;
        let ranges01 = ops::reshape(&ops::narrow(&activated, 0, 0, 1), vec![f, h, w]);
        let mask = ops::reshape(&ops::narrow(&activated, 0, 1, 1), vec![f, h, w]);
        let ranges = ops::affine(&ranges01, intr.r_max - intr.r_min, intr.r_min);
        Ok((ranges, mask))
    }

    /// Inference: eval-mode forward with no graph, thresholding the mask at
    /// 0.5. Probabilities are nudged off the f32-saturated endpoints so they
    /// stay strictly inside (0, 1).
    pub fn forward(&self, input: &FrameStack) -> Result<Prediction> {
        let (ranges, mask) = no_grad(|| self.forward_tensors(input, Phase::Eval))?;
        let to_f32 = |t: &Tensor<E>| -> Vec<f32> {
            t.data().iter().map(|v| v.to_f64() as f32).collect()
        };
        let mask_prob: Vec<f32> = to_f32(&mask)
            .into_iter()
            .map(|p| p.clamp(1e-7, 1.0 - 1e-7))
            .collect();
        let valid = mask_prob.iter().map(|&p| p > 0.5).collect();
        Ok(Prediction {
            ranges: to_f32(&ranges),
            mask_prob,
            valid,
            future: self.config.future,
            intrinsics: self.config.intrinsics,
        })
    }

    /// Forward plus masked re-projection to one cloud per future step.
    pub fn predict_clouds(&self, input: &FrameStack) -> Result<Vec<PointCloud>> {
        Ok(self.forward(input)?.clouds())
    }

    /// Trainable parameters in deterministic order.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out: Vec<(String, Tensor<E>)> = Vec::new();
        let conv = |name: String, layer: &ConvLayer<E>, out: &mut Vec<(String, Tensor<E>)>| {
            out.push((format!("{name}.weight"), layer.weight.clone()));
            out.push((format!("{name}.bias"), layer.bias.clone()));
        };
        let bn = |name: String, layer: &BnLayer<E>, out: &mut Vec<(String, Tensor<E>)>| {
            out.push((format!("{name}.gamma"), layer.gamma.clone()));
            out.push((format!("{name}.beta"), layer.beta.clone()));
        };
        conv("input".into(), &self.input_conv, &mut out);
        for (l, s) in self.encoder.iter().enumerate() {
            conv(format!("enc{l}.block"), &s.block, &mut out);
            bn(format!("enc{l}.block.bn"), &s.block_bn, &mut out);
            conv(format!("enc{l}.down"), &s.down, &mut out);
            bn(format!("enc{l}.down.bn"), &s.down_bn, &mut out);
        }
        for (l, s) in self.decoder.iter().enumerate() {
            conv(format!("dec{l}.up"), &s.up, &mut out);
            bn(format!("dec{l}.up.bn"), &s.up_bn, &mut out);
            conv(format!("dec{l}.merge"), &s.merge, &mut out);
            bn(format!("dec{l}.merge.bn"), &s.merge_bn, &mut out);
        }
        conv("head".into(), &self.head, &mut out);
        out
    }

    fn bn_layers(&self) -> Vec<(String, &BnLayer<E>)> {
        let mut out: Vec<(String, &BnLayer<E>)> = Vec::new();
        for (l, s) in self.encoder.iter().enumerate() {
            out.push((format!("enc{l}.block.bn"), &s.block_bn));
            out.push((format!("enc{l}.down.bn"), &s.down_bn));
        }
        for (l, s) in self.decoder.iter().enumerate() {
            out.push((format!("dec{l}.up.bn"), &s.up_bn));
            out.push((format!("dec{l}.merge.bn"), &s.merge_bn));
        }
        out
    }

    /// Snapshot of all parameters and running statistics.
    pub fn param_table(&self) -> ParamTable {
        let mut table = ParamTable::default();
        for (name, t) in self.named_params() {
            table.push(
                name,
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
        for (name, bn) in self.bn_layers() {
            let c = bn.state.channels();
            table.push(
                format!("{name}.running_mean"),
                vec![c],
                bn.state.running_mean.borrow().iter().map(|v| v.to_f64() as f32).collect(),
            );
            table.push(
                format!("{name}.running_var"),
                vec![c],
                bn.state.running_var.borrow().iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
        table
    }

    /// Restores parameters and running statistics from a snapshot.
    pub fn load_param_table(&self, table: &ParamTable) -> Result<()> {
        let restore = |name: &str, shape: &[usize]| -> Result<Vec<E>> {
            let entry = table
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing entry '{name}'")))?;
            if entry.shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "entry '{name}': shape {:?} vs expected {shape:?}",
                    entry.shape
                )));
            }
            Ok(entry.data.iter().map(|&v| E::from_f64(v as f64)).collect())
        };
        for (name, t) in self.named_params() {
            t.set_data(&restore(&name, t.shape())?);
        }
        for (name, bn) in self.bn_layers() {
            let c = bn.state.channels();
            *bn.state.running_mean.borrow_mut() =
                restore(&format!("{name}.running_mean"), &[c])?;
            *bn.state.running_var.borrow_mut() =
                restore(&format!("{name}.running_var"), &[c])?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: config + normalization stats + parameter table.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"PCCK";
const CKPT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ArchitectureConfig,
    norm_stats: NormStats,
}

pub fn encode_checkpoint<E: Elem>(model: &ForecastModel<E>) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        norm_stats: model.norm_stats,
    };
    let meta_toml = toml::to_string(&meta).expect("config serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.push(CKPT_VERSION);
    bytes.extend_from_slice(&(meta_toml.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta_toml.as_bytes());
    bytes.extend_from_slice(&model.param_table().encode());
    bytes
}

pub fn decode_checkpoint<E: Elem>(bytes: &[u8]) -> Result<ForecastModel<E>> {
    let fail = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 9 || &bytes[..4] != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != CKPT_VERSION {
        return Err(fail("unsupported version"));
    }
    let meta_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    if bytes.len() < 9 + meta_len {
        return Err(fail("truncated metadata"));
    }
    let meta_str =
        std::str::from_utf8(&bytes[9..9 + meta_len]).map_err(|_| fail("metadata not utf-8"))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_str).map_err(|e| fail(&format!("metadata: {e}")))?;
    let table = ParamTable::decode(&bytes[9 + meta_len..])?;
    let mut model = ForecastModel::build(meta.config, 0)?;
    model.norm_stats = meta.norm_stats;
    model.load_param_table(&table)?;
    Ok(model)
}

pub fn save_model<E: Elem>(path: &Path, model: &ForecastModel<E>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_model<E: Elem>(path: &Path) -> Result<ForecastModel<E>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and verifies it matches the expected architecture.
pub fn load_model_compatible<E: Elem>(
    path: &Path,
    expected: &ArchitectureConfig,
) -> Result<ForecastModel<E>> {
    let model = load_model::<E>(path)?;
    if &model.config != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint architecture differs from the requested configuration ({:?} vs {:?})",
            model.config, expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::stack;

    fn desk_intr() -> SensorIntrinsics {
        SensorIntrinsics::desk_32x64()
    }

    fn random_stack(seed: u64, intr: SensorIntrinsics, frames: usize) -> FrameStack {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<RangeImage> = (0..frames)
            .map(|_| {
                let mut img = RangeImage::empty(intr);
                for v in img.values.iter_mut() {
                    if rng.gen_bool(0.8) {
                        *v = rng.gen_range(intr.r_min..intr.r_max) as f32;
                    }
                }
                img
            })
            .collect();
        stack(&images).unwrap()
    }

    fn stats_of(fs: &FrameStack) -> NormStats {
        let n = fs.data.len() as f64;
        let mean = fs.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = fs.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        NormStats { mean, std: var.sqrt().max(1e-6) }
    }

    #[test]
    fn desk_plan_matches_size_arithmetic() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let plan = cfg.plan().unwrap();
        // Temporal path 5 -> 4 -> 3 -> 2 -> 1, spatial 32x64 -> 2x4.
        let temporal: Vec<usize> = plan.stages.iter().map(|s| s.enc_out[1]).collect();
        assert_eq!(temporal, vec![4, 3, 2, 1]);
        assert_eq!(plan.bottleneck, [32, 1, 2, 4]);
        // Spec arithmetic per stage: (C_{l+1}, T_l − p_l, H_l/h_l, W_l/w_l).
        for (l, s) in plan.stages.iter().enumerate() {
            assert_eq!(s.enc_out[0], cfg.down_channels(l));
            assert_eq!(s.enc_out[1], s.enc_in[1] - cfg.temporal[l]);
            assert_eq!(s.enc_out[2], s.enc_in[2] / cfg.factors_h[l]);
            assert_eq!(s.enc_out[3], s.enc_in[3] / cfg.factors_w[l]);
        }
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut cfg = ArchitectureConfig::desk(desk_intr());
        cfg.temporal = vec![2, 1, 1, 1];
        let err = cfg.plan().unwrap_err().to_string();
        assert!(err.contains("P − Σ p_l"), "{err}");

        let mut cfg = ArchitectureConfig::desk(desk_intr());
        cfg.factors_w = vec![2, 2, 2, 3];
        let err = cfg.plan().unwrap_err().to_string();
        assert!(err.contains("width factors"), "{err}");

        let mut cfg = ArchitectureConfig::desk(desk_intr());
        cfg.future = 4;
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let a = ForecastModel::<f32>::build(cfg.clone(), 9).unwrap();
        let b = ForecastModel::<f32>::build(cfg.clone(), 9).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = ForecastModel::<f32>::build(cfg, 10).unwrap();
        let pa: Vec<f32> = a.named_params()[0].1.to_vec();
        let pc: Vec<f32> = c.named_params()[0].1.to_vec();
        assert_ne!(pa, pc);
    }

    #[test]
    fn forward_produces_bounded_outputs() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let mut model = ForecastModel::<f32>::build(cfg, 1).unwrap();
        let input = random_stack(2, desk_intr(), 5);
        model.norm_stats = stats_of(&input);
        let pred = model.forward(&input).unwrap();
        assert_eq!(pred.ranges.len(), 5 * 32 * 64);
        let intr = desk_intr();
        for (&r, (&m, &v)) in pred
            .ranges
            .iter()
            .zip(pred.mask_prob.iter().zip(&pred.valid))
        {
            assert!(r >= intr.r_min as f32 && r <= intr.r_max as f32);
            assert!(m > 0.0 && m < 1.0);
            assert_eq!(v, m > 0.5);
        }
    }

    #[test]
    fn head_maps_sigmoid_interval_to_ranges() {
        // sigmoid 0 -> r_min, 1 -> r_max, 0.5 -> midpoint (1, 85 -> 43).
        let intr = SensorIntrinsics::kitti_64x2048();
        let map = |s: f64| intr.r_min + s * (intr.r_max - intr.r_min);
        assert_eq!(map(0.0), 1.0);
        assert_eq!(map(1.0), 85.0);
        assert_eq!(map(0.5), 43.0);
    }

    #[test]
    fn ablations_build_and_run() {
        for (skip, circ) in [(false, true), (true, false), (false, false)] {
            let mut cfg = ArchitectureConfig::desk(desk_intr());
            cfg.skip_connections = skip;
            cfg.circular_padding = circ;
            let model = ForecastModel::<f32>::build(cfg, 3).unwrap();
            let input = random_stack(4, desk_intr(), 5);
            let pred = model.forward(&input).unwrap();
            assert_eq!(pred.ranges.len(), 5 * 32 * 64);
        }
    }

    #[test]
    fn parameter_count_scales_quadratically_with_width() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let base = cfg.plan().unwrap().parameter_count();
        let mut doubled = cfg.clone();
        doubled.channels = cfg.channels.iter().map(|c| c * 2).collect();
        let big = doubled.plan().unwrap().parameter_count();
        let ratio = big as f64 / base as f64;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");

        let mut halved = cfg.clone();
        halved.channels = cfg.channels.iter().map(|c| (c / 2).max(1)).collect();
        let small = halved.plan().unwrap().parameter_count();
        let ratio = small as f64 / base as f64;
        assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");

        let model = ForecastModel::<f32>::build(cfg, 0).unwrap();
        // The audit agrees with the materialized parameters (BN running stats
        // are buffers, not parameters).
        assert_eq!(model.parameter_count(), base);
    }

    #[test]
    fn empty_mask_step_gives_empty_cloud() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let mut model = ForecastModel::<f32>::build(cfg, 5).unwrap();
        let input = random_stack(6, desk_intr(), 5);
        model.norm_stats = stats_of(&input);
        let mut pred = model.forward(&input).unwrap();
        let hw = 32 * 64;
        for v in pred.valid[..hw].iter_mut() {
            *v = false;
        }
        let clouds = pred.clouds();
        assert!(clouds[0].is_empty());
        assert!(clouds.iter().all(|c| c.len() <= hw));
        // Valid pixel norms equal their stored range.
        let c1 = &clouds[1];
        assert!(!c1.is_empty());
        for p in &c1.points {
            let r = p.coords.norm();
            assert!(r >= desk_intr().r_min && r <= desk_intr().r_max);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let mut model = ForecastModel::<f32>::build(cfg, 11).unwrap();
        model.norm_stats = NormStats { mean: 7.25, std: 3.5 };
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.norm_stats, model.norm_stats);
        assert_eq!(encode_checkpoint(&back), bytes);
        // The restored model computes identical outputs.
        let input = random_stack(8, desk_intr(), 5);
        let a = model.forward(&input).unwrap();
        let b = back.forward(&input).unwrap();
        assert_eq!(a.ranges, b.ranges);
        assert_eq!(a.mask_prob, b.mask_prob);
    }

    #[test]
    fn incompatible_checkpoint_is_rejected() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let model = ForecastModel::<f32>::build(cfg.clone(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &model).unwrap();
        let mut other = cfg;
        other.channels = vec![4, 8, 16, 16];
        assert!(load_model_compatible::<f32>(&path, &other).is_err());
    }

    #[test]
    fn rotation_equivariance_with_circular_padding() {
        let cfg = ArchitectureConfig::desk(desk_intr());
        let d_w: usize = cfg.factors_w.iter().product();
        let model = ForecastModel::<f32>::build(cfg, 13).unwrap();
        let input = random_stack(14, desk_intr(), 5);
        let base = model.forward(&input).unwrap();
        let shifted = model.forward(&input.rotated_width(d_w as isize)).unwrap();
        let expect = crate::projection::rotate_last_axis(&base.ranges, 64, d_w as isize);
        let max_dev = shifted
            .ranges
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 1e-5, "max deviation {max_dev}");
    }

    #[test]
    fn zero_padding_breaks_rotation_equivariance() {
        let mut cfg = ArchitectureConfig::desk(desk_intr());
        cfg.circular_padding = false;
        let d_w: usize = cfg.factors_w.iter().product();
        let model = ForecastModel::<f32>::build(cfg, 13).unwrap();
        let input = random_stack(14, desk_intr(), 5);
        let base = model.forward(&input).unwrap();
        let shifted = model.forward(&input.rotated_width(d_w as isize)).unwrap();
        let expect = crate::projection::rotate_last_axis(&base.ranges, 64, d_w as isize);
        let max_dev = shifted
            .ranges
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0f64, f64::max);
        assert!(max_dev > 1e-3, "max deviation {max_dev}");
    }
}
