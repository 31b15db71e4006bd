//! INT8 model conversion and integer-only inference.
//!
//! All arithmetic up to the final linear layer is exact integer work:
//! INT8 x INT8 products accumulate in INT32, biases are INT32 at scale
//! s_in*s_w, and requantization uses fixed-point multipliers, so repeated
//! runs are bit-identical on any platform.

use super::{
    calibrate_mse, quantize_value, CalibrationStats, FixedMultiplier, QuantError, QuantParams,
    QuantTensor, SCALE_FLOOR,
};
use crate::backbone::ops::{activation_scalar, conv_out_size, shuffle_permutation, ActKind};
use crate::backbone::{LayerSpec, ModelGraph, WeightStore};
use crate::bev::BevImage;
use crate::tensor::Tensor;

/// One quantized operation. `input` follows the graph convention: the index
/// of the producing op, or `None` for the quantized graph input.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum QOp {
    Conv {
        input: Option<usize>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        weight: QuantTensor,
        /// INT32 bias at scale s_in * s_w.
        bias: Vec<i32>,
        /// Per output channel sum of quantized weights, for the input
        /// zero-point correction.
        weight_sums: Vec<i32>,
        in_params: QuantParams,
        out_params: QuantParams,
        multiplier: FixedMultiplier,
    },
    /// ReLU / ReLU6 on a site whose parameters are shared with the producing
    /// layer: a pure integer clamp.
    Clamp {
        input: Option<usize>,
        lo: i8,
        hi: i8,
        params: QuantParams,
    },
    /// Arbitrary elementwise activation as a 256-entry dequantize ->
    /// activate -> requantize table.
    Lut {
        input: Option<usize>,
        table: Vec<i8>,
        out_params: QuantParams,
    },
    ResidualAdd {
        input: Option<usize>,
        skip: usize,
        m_main: FixedMultiplier,
        m_skip: FixedMultiplier,
        z_main: i32,
        z_skip: i32,
        out_params: QuantParams,
    },
    ChannelShuffle {
        input: Option<usize>,
        groups: usize,
        params: QuantParams,
    },
    AvgPool {
        input: Option<usize>,
        multiplier: FixedMultiplier,
        z_in: i32,
        out_params: QuantParams,
    },
    /// Final projection; accumulates in INT32 and dequantizes to float.
    LinearDequant {
        input: Option<usize>,
        weight: QuantTensor,
        bias: Vec<i32>,
        weight_sums: Vec<i32>,
        in_params: QuantParams,
    },
}

impl QOp {
    /// Output quantization parameters for integer-valued ops.
    pub fn out_params(&self) -> Option<QuantParams> {
        match self {
            QOp::Conv { out_params, .. } => Some(*out_params),
            QOp::Clamp { params, .. } => Some(*params),
            QOp::Lut { out_params, .. } => Some(*out_params),
            QOp::ResidualAdd { out_params, .. } => Some(*out_params),
            QOp::ChannelShuffle { params, .. } => Some(*params),
            QOp::AvgPool { out_params, .. } => Some(*out_params),
            QOp::LinearDequant { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizedModel {
    /// The folded source graph, kept for manifests and shape inference.
    pub graph: ModelGraph,
    pub input_params: QuantParams,
    pub ops: Vec<QOp>,
    pub descriptor_dim: usize,
}

fn symmetric_weight_params(data: &[f32]) -> QuantParams {
    let max_abs = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    QuantParams {
        scale: (max_abs / 127.0).max(SCALE_FLOOR),
        zero_point: 0,
    }
}

fn quantize_bias(bias: Option<&Tensor>, out_ch: usize, bias_scale: f64) -> Vec<i32> {
    match bias {
        Some(b) => b
            .data
            .iter()
            .map(|&v| {
                (v as f64 / bias_scale)
                    .round_ties_even()
                    .clamp(i32::MIN as f64, i32::MAX as f64) as i32
            })
            .collect(),
        None => vec![0; out_ch],
    }
}

/// Converts a BN-folded float model into a fully integer execution plan.
/// Per-tensor symmetric weights (z = 0, s_w = max|w| / 127), MSE-calibrated
/// activation sites, INT32 biases at s_in * s_w, and one requantization
/// multiplier per layer.
///
/// A site consumed only by a ReLU or ReLU6 adopts the activation's
/// calibrated output parameters, so the activation itself reduces to an
/// integer clamp on the shared grid.
pub fn quantize_model(
    graph: &ModelGraph,
    weights: &WeightStore,
    stats: &[CalibrationStats],
) -> Result<QuantizedModel, QuantError> {
    let n = graph.nodes.len();
    if stats.len() != n + 1 {
        return Err(QuantError::MissingStats(stats.len().min(n)));
    }
    for (idx, node) in graph.nodes.iter().enumerate() {
        if matches!(node.spec, LayerSpec::BatchNorm { .. }) {
            return Err(QuantError::UnfoldedGraph(idx));
        }
    }
    let mut site_params = Vec::with_capacity(n + 1);
    for (site, s) in stats.iter().enumerate() {
        if s.reservoir.is_empty() {
            return Err(QuantError::MissingStats(site));
        }
        site_params.push(calibrate_mse(&s.reservoir)?);
    }

    // consumer lists, counting data edges, skip edges and the output tail
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, node) in graph.nodes.iter().enumerate() {
        if let Some(i) = node.input {
            consumers[i].push(idx);
        }
        if let LayerSpec::ResidualAdd { skip } = node.spec {
            consumers[skip].push(idx);
        }
    }

    // Effective output params per node. If node i feeds exactly one consumer
    // and that consumer is a ReLU/ReLU6, node i requantizes straight into the
    // activation's output grid.
    let mut eff: Vec<QuantParams> = (0..n).map(|i| site_params[i + 1]).collect();
    for (idx, node) in graph.nodes.iter().enumerate() {
        if let LayerSpec::Act(ActKind::Relu | ActKind::Relu6) = node.spec {
            if let Some(i) = node.input {
                if consumers[i].len() == 1 {
                    eff[i] = site_params[idx + 1];
                }
            }
        }
    }

    let shapes = graph.infer_shapes(1)?;
    let in_params_of = |input: Option<usize>| -> QuantParams {
        match input {
            None => site_params[0],
            Some(i) => eff[i],
        }
    };

    let mut ops = Vec::with_capacity(n);
    for (idx, node) in graph.nodes.iter().enumerate() {
        let input = node.input;
        let in_params = in_params_of(input);
        let out_params = eff[idx];
        let op = match &node.spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                bias,
            } => {
                let w = weights.get(idx, "weight")?;
                let wp = symmetric_weight_params(&w.data);
                let qw = super::quantize_tensor(w, wp);
                let per = w.data.len() / out_ch;
                let weight_sums: Vec<i32> = (0..*out_ch)
                    .map(|o| qw.data[o * per..(o + 1) * per].iter().map(|&q| q as i32).sum())
                    .collect();
                let bias_scale = in_params.scale as f64 * wp.scale as f64;
                let b = if *bias {
                    Some(weights.get(idx, "bias")?)
                } else {
                    None
                };
                QOp::Conv {
                    input,
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                    bias: quantize_bias(b, *out_ch, bias_scale),
                    weight_sums,
                    multiplier: FixedMultiplier::from_real(
                        bias_scale / out_params.scale as f64,
                    )?,
                    weight: qw,
                    in_params,
                    out_params,
                }
            }
            LayerSpec::Act(kind) => {
                let shared = in_params == out_params;
                match kind {
                    ActKind::Relu if shared => QOp::Clamp {
                        input,
                        lo: out_params.zero_point as i8,
                        hi: 127,
                        params: out_params,
                    },
                    ActKind::Relu6 if shared => QOp::Clamp {
                        input,
                        lo: out_params.zero_point as i8,
                        hi: quantize_value(6.0, out_params),
                        params: out_params,
                    },
                    _ => {
                        let table: Vec<i8> = (-128..=127)
                            .map(|q| {
                                let x = in_params.dequantize(q as i8);
                                quantize_value(activation_scalar(*kind, x), out_params)
                            })
                            .collect();
                        QOp::Lut {
                            input,
                            table,
                            out_params,
                        }
                    }
                }
            }
            LayerSpec::ResidualAdd { skip } => {
                let skip_params = eff[*skip];
                QOp::ResidualAdd {
                    input,
                    skip: *skip,
                    m_main: FixedMultiplier::from_real(
                        in_params.scale as f64 / out_params.scale as f64,
                    )?,
                    m_skip: FixedMultiplier::from_real(
                        skip_params.scale as f64 / out_params.scale as f64,
                    )?,
                    z_main: in_params.zero_point,
                    z_skip: skip_params.zero_point,
                    out_params,
                }
            }
            // Pure permutation: integers pass through on the input grid.
            LayerSpec::ChannelShuffle { groups } => QOp::ChannelShuffle {
                input,
                groups: *groups,
                params: in_params,
            },
            LayerSpec::GlobalAvgPool => {
                let in_shape = match input {
                    None => vec![1, graph.input_shape[0], graph.input_shape[1], graph.input_shape[2]],
                    Some(i) => shapes[i].clone(),
                };
                let hw = (in_shape[2] * in_shape[3]) as f64;
                QOp::AvgPool {
                    input,
                    multiplier: FixedMultiplier::from_real(
                        in_params.scale as f64 / (out_params.scale as f64 * hw),
                    )?,
                    z_in: in_params.zero_point,
                    out_params,
                }
            }
            LayerSpec::Linear { out_dim, bias, .. } => {
                let w = weights.get(idx, "weight")?;
                let wp = symmetric_weight_params(&w.data);
                let qw = super::quantize_tensor(w, wp);
                let per = w.data.len() / out_dim;
                let weight_sums: Vec<i32> = (0..*out_dim)
                    .map(|o| qw.data[o * per..(o + 1) * per].iter().map(|&q| q as i32).sum())
                    .collect();
                let bias_scale = in_params.scale as f64 * wp.scale as f64;
                let b = if *bias {
                    Some(weights.get(idx, "bias")?)
                } else {
                    None
                };
                QOp::LinearDequant {
                    input,
                    bias: quantize_bias(b, *out_dim, bias_scale),
                    weight_sums,
                    weight: qw,
                    in_params,
                }
            }
            LayerSpec::BatchNorm { .. } => unreachable!("rejected above"),
        };
        ops.push(op);
    }

    Ok(QuantizedModel {
        graph: graph.clone(),
        input_params: site_params[0],
        ops,
        descriptor_dim: graph.descriptor_dim,
    })
}

/// Integer intermediate buffer.
#[derive(Debug, Clone)]
struct QBuf {
    shape: Vec<usize>,
    data: Vec<i8>,
}

#[allow(clippy::too_many_arguments)]
fn im2col_i8(
    input: &[i8],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    pad_value: i8,
    out: &mut [i8],
) {
    let patch = out_h * out_w;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = ((ch * kernel + ki) * kernel + kj) * patch;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut out[row + oy * out_w..row + (oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(pad_value);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            pad_value
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_conv(
    buf: &QBuf,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    weight: &QuantTensor,
    bias: &[i32],
    weight_sums: &[i32],
    in_params: QuantParams,
    out_params: QuantParams,
    multiplier: FixedMultiplier,
) -> Result<QBuf, QuantError> {
    let [n, c, h, w] = [buf.shape[0], buf.shape[1], buf.shape[2], buf.shape[3]];
    if c != in_ch {
        return Err(QuantError::NonFiniteValue(format!(
            "conv expects {in_ch} channels, got {c}"
        )));
    }
    let out_h = conv_out_size(h, kernel, stride, padding)
        .ok_or_else(|| QuantError::NonFiniteValue("conv output size".into()))?;
    let out_w = conv_out_size(w, kernel, stride, padding)
        .ok_or_else(|| QuantError::NonFiniteValue("conv output size".into()))?;
    let cg = in_ch / groups;
    let og = out_ch / groups;
    let k2 = kernel * kernel;
    let patch = out_h * out_w;
    let z_in = in_params.zero_point;
    let z_out = out_params.zero_point;

    let mut out = vec![0i8; n * out_ch * patch];
    let mut cols = vec![0i8; cg * k2 * patch];
    for img in 0..n {
        let image = &buf.data[img * c * h * w..(img + 1) * c * h * w];
        for g in 0..groups {
            im2col_i8(
                &image[g * cg * h * w..(g + 1) * cg * h * w],
                cg,
                h,
                w,
                kernel,
                stride,
                padding,
                out_h,
                out_w,
                z_in as i8,
                &mut cols,
            );
            for o in 0..og {
                let oc = g * og + o;
                let wrow = &weight.data[oc * cg * k2..(oc + 1) * cg * k2];
                let correction = bias[oc] - z_in * weight_sums[oc];
                let dst = &mut out[(img * out_ch + oc) * patch..(img * out_ch + oc + 1) * patch];
                for p in 0..patch {
                    let mut acc = 0i32;
                    for (k, &wk) in wrow.iter().enumerate() {
                        acc += wk as i32 * cols[k * patch + p] as i32;
                    }
                    acc += correction;
                    let q = multiplier.apply(acc) + z_out;
                    dst[p] = q.clamp(-128, 127) as i8;
                }
            }
        }
    }
    Ok(QBuf {
        shape: vec![n, out_ch, out_h, out_w],
        data: out,
    })
}

/// Result of an INT8 forward pass, including the raw INT32 accumulators of
/// the final linear layer (useful for determinism fingerprints).
#[derive(Debug, Clone)]
pub struct Int8Trace {
    /// (N, d) unit rows, float.
    pub descriptors: Tensor,
    /// (N, d) dequantized pre-normalization output.
    pub prenorm: Tensor,
    pub degenerate: Vec<bool>,
    /// Final linear INT32 accumulators, row-major (N, d).
    pub final_acc: Vec<i32>,
}

pub fn forward_int8(model: &QuantizedModel, images: &[&BevImage]) -> Result<Tensor, QuantError> {
    forward_int8_traced(model, images).map(|t| t.descriptors)
}

pub fn forward_int8_traced(
    model: &QuantizedModel,
    images: &[&BevImage],
) -> Result<Int8Trace, QuantError> {
    if images.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let batch = crate::bev::batch_tensor(images);
    let input = QBuf {
        shape: batch.shape.clone(),
        data: batch
            .data
            .iter()
            .map(|&v| quantize_value(v, model.input_params))
            .collect(),
    };

    let mut outputs: Vec<Option<QBuf>> = Vec::with_capacity(model.ops.len());
    let mut tail: Option<(Tensor, Vec<i32>)> = None;
    for op in &model.ops {
        let input_of = |i: &Option<usize>| -> &QBuf {
            match i {
                None => &input,
                Some(idx) => outputs[*idx].as_ref().expect("integer producer"),
            }
        };
        let out = match op {
            QOp::Conv {
                input,
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                weight,
                bias,
                weight_sums,
                in_params,
                out_params,
                multiplier,
            } => Some(run_conv(
                input_of(input),
                *in_ch,
                *out_ch,
                *kernel,
                *stride,
                *padding,
                *groups,
                weight,
                bias,
                weight_sums,
                *in_params,
                *out_params,
                *multiplier,
            )?),
            QOp::Clamp { input, lo, hi, .. } => {
                let src = input_of(input);
                Some(QBuf {
                    shape: src.shape.clone(),
                    data: src.data.iter().map(|&q| q.clamp(*lo, *hi)).collect(),
                })
            }
            QOp::Lut { input, table, .. } => {
                let src = input_of(input);
                Some(QBuf {
                    shape: src.shape.clone(),
                    data: src
                        .data
                        .iter()
                        .map(|&q| table[(q as i32 + 128) as usize])
                        .collect(),
                })
            }
            QOp::ResidualAdd {
                input,
                skip,
                m_main,
                m_skip,
                z_main,
                z_skip,
                out_params,
            } => {
                let main = input_of(input);
                let other = outputs[*skip].as_ref().expect("integer skip producer");
                let data = main
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| {
                        let v = m_main.apply(a as i32 - z_main)
                            + m_skip.apply(b as i32 - z_skip)
                            + out_params.zero_point;
                        v.clamp(-128, 127) as i8
                    })
                    .collect();
                Some(QBuf {
                    shape: main.shape.clone(),
                    data,
                })
            }
            QOp::ChannelShuffle { input, groups, .. } => {
                let src = input_of(input);
                let [n, c, h, w] = [src.shape[0], src.shape[1], src.shape[2], src.shape[3]];
                let perm = shuffle_permutation(c, *groups);
                let mut data = vec![0i8; src.data.len()];
                for img in 0..n {
                    for (src_c, &dst_c) in perm.iter().enumerate() {
                        let s = (img * c + src_c) * h * w;
                        let d = (img * c + dst_c) * h * w;
                        data[d..d + h * w].copy_from_slice(&src.data[s..s + h * w]);
                    }
                }
                Some(QBuf {
                    shape: src.shape.clone(),
                    data,
                })
            }
            QOp::AvgPool {
                input,
                multiplier,
                z_in,
                out_params,
            } => {
                let src = input_of(input);
                let [n, c, h, w] = [src.shape[0], src.shape[1], src.shape[2], src.shape[3]];
                let mut data = vec![0i8; n * c];
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &src.data[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                        let acc: i32 = plane.iter().map(|&q| q as i32 - z_in).sum();
                        let q = multiplier.apply(acc) + out_params.zero_point;
                        data[img * c + ch] = q.clamp(-128, 127) as i8;
                    }
                }
                Some(QBuf {
                    shape: vec![n, c],
                    data,
                })
            }
            QOp::LinearDequant {
                input,
                weight,
                bias,
                weight_sums,
                in_params,
            } => {
                let src = input_of(input);
                let [n, c] = [src.shape[0], src.shape[1]];
                let d = weight.shape[0];
                let scale = in_params.scale as f64 * weight.params.scale as f64;
                let mut accs = vec![0i32; n * d];
                let mut prenorm = vec![0f32; n * d];
                for img in 0..n {
                    let row = &src.data[img * c..(img + 1) * c];
                    for o in 0..d {
                        let wrow = &weight.data[o * c..(o + 1) * c];
                        let mut acc = 0i32;
                        for (k, &wk) in wrow.iter().enumerate() {
                            acc += wk as i32 * row[k] as i32;
                        }
                        acc += bias[o] - in_params.zero_point * weight_sums[o];
                        accs[img * d + o] = acc;
                        prenorm[img * d + o] = (scale * acc as f64) as f32;
                    }
                }
                let prenorm = Tensor::from_vec(&[n, d], prenorm).expect("consistent tail shape");
                tail = Some((prenorm, accs));
                None
            }
        };
        outputs.push(out);
    }

    let (prenorm, final_acc) = tail.ok_or_else(|| {
        QuantError::NonFiniteValue("model has no final linear layer".into())
    })?;
    if !prenorm.all_finite() {
        return Err(QuantError::NonFiniteValue("dequantized descriptor".into()));
    }
    let (descriptors, degenerate) = crate::backbone::ops::l2_normalize(&prenorm);
    Ok(Int8Trace {
        descriptors,
        prenorm,
        degenerate,
        final_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward, presets::build_preset, Node, WeightStore};
    use crate::quant::collect_stats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, id: u64) -> BevImage {
        let plane: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut pixels = plane.clone();
        pixels.extend_from_slice(&plane);
        pixels.extend_from_slice(&plane);
        BevImage {
            width: w,
            height: h,
            pixels,
            source_frame_id: id,
        }
    }

    fn tiny_graph(descriptor_dim: usize) -> ModelGraph {
        // conv-relu, depthwise conv-relu, pool, linear on 16x16 input
        let nodes = vec![
            Node {
                spec: LayerSpec::Conv2d {
                    in_ch: 3,
                    out_ch: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    groups: 1,
                    bias: true,
                },
                input: None,
            },
            Node {
                spec: LayerSpec::Act(ActKind::Relu),
                input: Some(0),
            },
            Node {
                spec: LayerSpec::Conv2d {
                    in_ch: 4,
                    out_ch: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    groups: 4,
                    bias: true,
                },
                input: Some(1),
            },
            Node {
                spec: LayerSpec::Act(ActKind::Relu),
                input: Some(2),
            },
            Node {
                spec: LayerSpec::GlobalAvgPool,
                input: Some(3),
            },
            Node {
                spec: LayerSpec::Linear {
                    in_dim: 4,
                    out_dim: descriptor_dim,
                    bias: true,
                },
                input: Some(4),
            },
        ];
        ModelGraph {
            nodes,
            input_shape: [3, 16, 16],
            descriptor_dim,
        }
    }

    fn quantize_tiny(seed: u64) -> (ModelGraph, WeightStore, QuantizedModel, Vec<BevImage>) {
        let graph = tiny_graph(8);
        let weights = WeightStore::init_random(&graph, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        let calib: Vec<BevImage> = (0..12).map(|i| random_image(&mut rng, 16, 16, i)).collect();
        let refs: Vec<&BevImage> = calib.iter().collect();
        let stats = collect_stats(&graph, &weights, &refs, 7).unwrap();
        let qmodel = quantize_model(&graph, &weights, &stats).unwrap();
        (graph, weights, qmodel, calib)
    }

    #[test]
    fn symmetric_weight_examples() {
        let p = symmetric_weight_params(&[0.3, -1.27, 0.9]);
        assert!((p.scale - 0.01).abs() < 1e-9);
        assert_eq!(p.zero_point, 0);
        let q = quantize_value(1.27, p);
        assert_eq!(q, 127);

        let p = symmetric_weight_params(&[0.0; 5]);
        assert_eq!(p.scale, SCALE_FLOOR);
    }

    #[test]
    fn single_conv_error_bound() {
        // 1x1 identity conv on a constant 0.5 plane, ranges covering [0, 1]
        let graph = ModelGraph {
            nodes: vec![
                Node {
                    spec: LayerSpec::Conv2d {
                        in_ch: 3,
                        out_ch: 1,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        groups: 1,
                        bias: false,
                    },
                    input: None,
                },
                Node {
                    spec: LayerSpec::GlobalAvgPool,
                    input: Some(0),
                },
                Node {
                    spec: LayerSpec::Linear {
                        in_dim: 1,
                        out_dim: 1,
                        bias: false,
                    },
                    input: Some(1),
                },
            ],
            input_shape: [3, 4, 4],
            descriptor_dim: 1,
        };
        let mut weights = WeightStore::default();
        weights.insert(
            0,
            "weight",
            Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap(),
        );
        weights.insert(2, "weight", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let calib: Vec<BevImage> = (0..8).map(|i| random_image(&mut rng, 4, 4, i)).collect();
        let refs: Vec<&BevImage> = calib.iter().collect();
        let stats = collect_stats(&graph, &weights, &refs, 1).unwrap();
        let qmodel = quantize_model(&graph, &weights, &stats).unwrap();

        let half = BevImage {
            width: 4,
            height: 4,
            pixels: vec![0.5; 48],
            source_frame_id: 99,
        };
        let trace = forward_int8_traced(&qmodel, &[&half]).unwrap();
        let s_in = qmodel.input_params.scale;
        let conv_out = qmodel.ops[0].out_params().unwrap().scale;
        // the conv site value feeding the pool should sit within the
        // combined grid error of 0.5; pool and linear are exact here
        // (constant plane, unit weight), so check the prenorm output
        let got = trace.prenorm.data[0];
        assert!(
            (got - 0.5).abs() <= conv_out / 2.0 + s_in / 2.0 + 0.01,
            "got {got}"
        );
    }

    #[test]
    fn zero_input_gives_degenerate_descriptor() {
        let (_, _, qmodel, _) = quantize_tiny(1);
        // force z_in = 0 so quantized zeros stay zero, and zero the first
        // conv bias so the zero image propagates exactly
        let mut qmodel = qmodel;
        qmodel.input_params.zero_point = 0;
        if let QOp::Conv {
            bias,
            in_params,
            out_params,
            ..
        } = &mut qmodel.ops[0]
        {
            bias.fill(0);
            in_params.zero_point = 0;
            out_params.zero_point = 0;
        }
        if let QOp::Clamp { lo, .. } = &mut qmodel.ops[1] {
            *lo = 0;
        }
        if let QOp::Conv {
            bias,
            in_params,
            out_params,
            ..
        } = &mut qmodel.ops[2]
        {
            bias.fill(0);
            in_params.zero_point = 0;
            out_params.zero_point = 0;
        }
        if let QOp::Clamp { lo, .. } = &mut qmodel.ops[3] {
            *lo = 0;
        }
        if let QOp::AvgPool { z_in, out_params, .. } = &mut qmodel.ops[4] {
            *z_in = 0;
            out_params.zero_point = 0;
        }
        if let QOp::LinearDequant { bias, in_params, .. } = &mut qmodel.ops[5] {
            bias.fill(0);
            in_params.zero_point = 0;
        }
        let zero = BevImage {
            width: 16,
            height: 16,
            pixels: vec![0.0; 3 * 256],
            source_frame_id: 0,
        };
        let trace = forward_int8_traced(&qmodel, &[&zero]).unwrap();
        assert!(trace.prenorm.data.iter().all(|&v| v == 0.0));
        assert_eq!(trace.degenerate, vec![true]);
        assert!(trace.descriptors.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn int8_close_to_fp32_over_seeds() {
        let mut worst = 0.0f32;
        for seed in 0..20 {
            let (graph, weights, qmodel, calib) = quantize_tiny(seed);
            let image = &calib[0];
            let trace = forward_int8_traced(&qmodel, &[image]).unwrap();
            let outputs =
                crate::backbone::run_nodes(&graph, &weights, &image.to_tensor()).unwrap();
            let fp32 = outputs.last().unwrap();
            for (a, b) in trace.prenorm.data.iter().zip(&fp32.data) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 0.15, "worst pre-norm deviation {worst}");
    }

    #[test]
    fn int8_forward_is_bit_exact_across_runs() {
        let (_, _, qmodel, calib) = quantize_tiny(3);
        let refs: Vec<&BevImage> = calib.iter().take(4).collect();
        let a = forward_int8_traced(&qmodel, &refs).unwrap();
        let b = forward_int8_traced(&qmodel, &refs).unwrap();
        assert_eq!(a.final_acc, b.final_acc);
        let bits_a: Vec<u32> = a.descriptors.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.descriptors.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn presets_quantize_and_run() {
        for preset in crate::backbone::presets::PRESET_NAMES {
            let mut graph = build_preset(preset, 16).unwrap();
            graph.input_shape = [3, 32, 32];
            let weights = WeightStore::init_random(&graph, 5);
            let (graph, weights) = crate::backbone::fold::fold_graph(&graph, &weights).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let calib: Vec<BevImage> =
                (0..6).map(|i| random_image(&mut rng, 32, 32, i)).collect();
            let refs: Vec<&BevImage> = calib.iter().collect();
            let stats = collect_stats(&graph, &weights, &refs, 2).unwrap();
            let qmodel = quantize_model(&graph, &weights, &stats).unwrap();
            let desc = forward_int8(&qmodel, &[&calib[0]]).unwrap();
            assert_eq!(desc.shape, vec![1, 16]);
            let norm: f32 = desc.data.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "{preset}: norm {norm}");

            // descriptors should still roughly agree with the float model
            let fp = forward(&graph, &weights, &calib[0].to_tensor()).unwrap();
            let cos: f32 = desc
                .data
                .iter()
                .zip(&fp.descriptors.data)
                .map(|(a, b)| a * b)
                .sum();
            assert!(cos > 0.95, "{preset}: cosine to fp32 {cos}");
        }
    }

    #[test]
    fn unfolded_graph_rejected() {
        let mut graph = build_preset("tiny_resnet", 16).unwrap();
        graph.input_shape = [3, 32, 32];
        let weights = WeightStore::init_random(&graph, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let image = random_image(&mut rng, 32, 32, 0);
        assert!(matches!(
            collect_stats(&graph, &weights, &[&image], 2),
            Err(QuantError::UnfoldedGraph(_))
        ));
    }
}
