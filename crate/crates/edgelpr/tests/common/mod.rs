//! Shared helpers for the integration tests: naive reference
//! implementations used as oracles against the optimized paths.

use edgelpr::tensor::Tensor;

/// Direct triple-loop cross-correlation. Slow and obvious on purpose:
/// it is the oracle the im2col + GEMM fast path is compared against.
/// Weight layout matches the fast path: (out_ch, in_ch/groups, k, k).
pub fn naive_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor {
    let (n, c, h, w) = input.dims4().expect("naive conv input is 4-d");
    let out_ch = weight.shape[0];
    let in_ch_g = weight.shape[1];
    let k = weight.shape[2];
    assert_eq!(weight.shape[3], k, "square kernels only");
    assert_eq!(c, groups * in_ch_g, "channel/group mismatch");
    assert_eq!(out_ch % groups, 0, "out_ch divisible by groups");
    let out_g = out_ch / groups;

    let out_h = (h + 2 * padding - k) / stride + 1;
    let out_w = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; n * out_ch * out_h * out_w];

    for img in 0..n {
        for oc in 0..out_ch {
            let g = oc / out_g;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..in_ch_g {
                        let src_c = g * in_ch_g + ic;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let x = input.data
                                    [((img * c + src_c) * h + iy as usize) * w + ix as usize];
                                let wv =
                                    weight.data[((oc * in_ch_g + ic) * k + ky) * k + kx];
                                acc += x * wv;
                            }
                        }
                    }
                    out[((img * out_ch + oc) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, out_ch, out_h, out_w], out).unwrap()
}

/// Uniform random tensor in [lo, hi).
pub fn random_tensor<R: rand::Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

use edgelpr::backbone::ops::{shuffle_permutation, ActKind};
use edgelpr::backbone::{LayerSpec, ModelGraph, WeightStore};
use std::collections::BTreeMap;

pub type F64Weights = BTreeMap<(usize, String), Vec<f64>>;

/// Copies every known parameter of the graph into f64 vectors so the
/// reference forward can be finite-differenced without f32 noise.
pub fn weights_to_f64(graph: &ModelGraph, store: &WeightStore) -> F64Weights {
    let mut out = BTreeMap::new();
    let mut copy = |idx: usize, name: &str| {
        if let Ok(t) = store.get(idx, name) {
            out.insert(
                (idx, name.to_string()),
                t.data.iter().map(|&v| v as f64).collect(),
            );
        }
    };
    for (idx, node) in graph.nodes.iter().enumerate() {
        match &node.spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                copy(idx, "weight");
                copy(idx, "bias");
            }
            LayerSpec::BatchNorm { .. } => {
                copy(idx, "gamma");
                copy(idx, "beta");
                copy(idx, "mean");
                copy(idx, "var");
            }
            _ => {}
        }
    }
    out
}

fn act_f64(kind: ActKind, x: f64) -> f64 {
    match kind {
        ActKind::Relu => x.max(0.0),
        ActKind::Relu6 => x.clamp(0.0, 6.0),
        ActKind::HardSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
    }
}

/// f64 reference forward: same graph semantics as the f32 path (frozen BN
/// stats, zero padding, src->dst shuffle, row-wise L2 normalization) but in
/// double precision. Returns the (N * d) normalized descriptor values.
pub fn forward_f64(
    graph: &ModelGraph,
    weights: &F64Weights,
    input: &[f64],
    batch: usize,
) -> Vec<f64> {
    let shapes = graph.infer_shapes(batch).expect("valid graph");
    let [ic, ih, iw] = graph.input_shape;
    assert_eq!(input.len(), batch * ic * ih * iw);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(graph.nodes.len());

    for (idx, node) in graph.nodes.iter().enumerate() {
        let (src, src_shape): (&[f64], Vec<usize>) = match node.input {
            None => (input, vec![batch, ic, ih, iw]),
            Some(j) => (&outputs[j], shapes[j].clone()),
        };
        let w = |name: &str| -> &[f64] { &weights[&(idx, name.to_string())] };
        let out: Vec<f64> = match &node.spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                bias,
            } => {
                let (n, h, wd) = (src_shape[0], src_shape[2], src_shape[3]);
                let c = *in_ch;
                let k = *kernel;
                let in_g = c / groups;
                let out_g = out_ch / groups;
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (wd + 2 * padding - k) / stride + 1;
                let weight = w("weight");
                let bias_v: Option<&[f64]> = if *bias { Some(w("bias")) } else { None };
                let mut out = vec![0.0f64; n * out_ch * oh * ow];
                for img in 0..n {
                    for oc in 0..*out_ch {
                        let g = oc / out_g;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias_v.map_or(0.0, |b| b[oc]);
                                for icg in 0..in_g {
                                    let sc = g * in_g + icg;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy =
                                                (oy * stride + ky) as isize - *padding as isize;
                                            let ix =
                                                (ox * stride + kx) as isize - *padding as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            acc += src[((img * c + sc) * h + iy as usize) * wd
                                                + ix as usize]
                                                * weight[((oc * in_g + icg) * k + ky) * k + kx];
                                        }
                                    }
                                }
                                out[((img * out_ch + oc) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::BatchNorm { channels, eps } => {
                let (n, h, wd) = (src_shape[0], src_shape[2], src_shape[3]);
                let plane = h * wd;
                let gamma = w("gamma");
                let beta = w("beta");
                let mean = w("mean");
                let var = w("var");
                let mut out = vec![0.0f64; src.len()];
                for img in 0..n {
                    for ch in 0..*channels {
                        let inv = 1.0 / (var[ch] + *eps as f64).sqrt();
                        let off = (img * channels + ch) * plane;
                        for k in 0..plane {
                            out[off + k] = gamma[ch] * (src[off + k] - mean[ch]) * inv + beta[ch];
                        }
                    }
                }
                out
            }
            LayerSpec::Act(kind) => src.iter().map(|&x| act_f64(*kind, x)).collect(),
            LayerSpec::ResidualAdd { skip } => src
                .iter()
                .zip(&outputs[*skip])
                .map(|(a, b)| a + b)
                .collect(),
            LayerSpec::ChannelShuffle { groups } => {
                let (n, c, h, wd) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
                let plane = h * wd;
                let perm = shuffle_permutation(c, *groups);
                let mut out = vec![0.0f64; src.len()];
                for img in 0..n {
                    for (src_c, &dst_c) in perm.iter().enumerate() {
                        let s = (img * c + src_c) * plane;
                        let t = (img * c + dst_c) * plane;
                        out[t..t + plane].copy_from_slice(&src[s..s + plane]);
                    }
                }
                out
            }
            LayerSpec::GlobalAvgPool => {
                let (n, c, h, wd) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
                let plane = h * wd;
                let mut out = vec![0.0f64; n * c];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * plane;
                        out[img * c + ch] =
                            src[off..off + plane].iter().sum::<f64>() / plane as f64;
                    }
                }
                out
            }
            LayerSpec::Linear {
                in_dim,
                out_dim,
                bias,
            } => {
                let n = src_shape[0];
                let weight = w("weight");
                let bias_v: Option<&[f64]> = if *bias { Some(w("bias")) } else { None };
                let mut out = vec![0.0f64; n * out_dim];
                for img in 0..n {
                    for o in 0..*out_dim {
                        let mut acc = bias_v.map_or(0.0, |b| b[o]);
                        for i in 0..*in_dim {
                            acc += src[img * in_dim + i] * weight[o * in_dim + i];
                        }
                        out[img * out_dim + o] = acc;
                    }
                }
                out
            }
        };
        outputs.push(out);
    }

    // row-wise L2 normalization of the final (N, d) output
    let last = outputs.last().unwrap();
    let d = graph.descriptor_dim;
    let n = last.len() / d;
    let mut desc = vec![0.0f64; last.len()];
    for row in 0..n {
        let src = &last[row * d..(row + 1) * d];
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for (o, &v) in desc[row * d..(row + 1) * d].iter_mut().zip(src) {
            *o = v / norm;
        }
    }
    desc
}
