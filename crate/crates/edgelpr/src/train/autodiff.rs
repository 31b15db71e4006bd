//! Reverse-mode differentiation over a recorded forward pass.
//!
//! The tape is simply the list of node outputs kept by the forward run;
//! gradients are accumulated node by node in reverse order, with a fixed
//! accumulation order so training is deterministic.

use super::TrainError;
use crate::backbone::ops::{
    self, activation_grad_scalar, conv2d_backward, shuffle_permutation,
};
use crate::backbone::{run_nodes, BackboneError, LayerSpec, ModelGraph, WeightStore};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub type GradMap = BTreeMap<(usize, String), Tensor>;

/// Forward pass with everything needed for backward kept alive.
pub struct Trace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    /// Pre-normalization row norms of the final output.
    pub prenorm_norms: Vec<f32>,
    pub descriptors: Tensor,
    pub degenerate: Vec<bool>,
}

pub fn forward_trace(
    graph: &ModelGraph,
    weights: &WeightStore,
    batch: &Tensor,
) -> Result<Trace, BackboneError> {
    let outputs = run_nodes(graph, weights, batch)?;
    let prenorm = outputs.last().expect("non-empty graph");
    let (n, d) = prenorm.dims2().expect("descriptor output is (N, D)");
    let mut norms = Vec::with_capacity(n);
    for row in 0..n {
        let v = &prenorm.data[row * d..(row + 1) * d];
        norms.push(v.iter().map(|x| x * x).sum::<f32>().sqrt());
    }
    let (descriptors, degenerate) = ops::l2_normalize(prenorm);
    Ok(Trace {
        input: batch.clone(),
        outputs,
        prenorm_norms: norms,
        descriptors,
        degenerate,
    })
}

pub struct BackwardResult {
    pub grads: GradMap,
    pub grad_input: Tensor,
}

/// Backpropagates a gradient on the normalized descriptors through the
/// whole graph, returning per-parameter gradients.
pub fn backward(
    graph: &ModelGraph,
    weights: &WeightStore,
    trace: &Trace,
    grad_descriptors: &Tensor,
) -> Result<BackwardResult, TrainError> {
    let (n, d) = trace.descriptors.dims2().expect("descriptors are (N, D)");
    if grad_descriptors.shape != trace.descriptors.shape {
        return Err(TrainError::DimensionMismatch(format!(
            "descriptor grad shape {:?} vs {:?}",
            grad_descriptors.shape, trace.descriptors.shape
        )));
    }

    // through L2 normalization: dv = (dg - g * (g . dg)) / |v|
    let mut grad_prenorm = Tensor::zeros(&[n, d]);
    for row in 0..n {
        if trace.degenerate[row] {
            continue; // zero descriptor, zero gradient
        }
        let g = &trace.descriptors.data[row * d..(row + 1) * d];
        let dg = &grad_descriptors.data[row * d..(row + 1) * d];
        let dot: f32 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
        let norm = trace.prenorm_norms[row];
        for i in 0..d {
            grad_prenorm.data[row * d + i] = (dg[i] - g[i] * dot) / norm;
        }
    }

    let mut grads: GradMap = BTreeMap::new();
    let mut node_grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    *node_grads.last_mut().expect("non-empty graph") = Some(grad_prenorm);
    let mut grad_input = Tensor::zeros(&trace.input.shape);

    let add_into = |slot: &mut Option<Tensor>, g: Tensor| match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    };

    for idx in (0..graph.nodes.len()).rev() {
        let Some(grad_out) = node_grads[idx].take() else {
            continue;
        };
        if !grad_out.all_finite() {
            return Err(TrainError::NonFiniteGradient { layer: idx });
        }
        let node = &graph.nodes[idx];
        let input_tensor = match node.input {
            None => &trace.input,
            Some(j) => &trace.outputs[j],
        };
        let grad_in: Tensor = match &node.spec {
            LayerSpec::Conv2d {
                stride,
                padding,
                groups,
                bias,
                ..
            } => {
                let w = weights.get(idx, "weight")?;
                let (gi, gw, gb) =
                    conv2d_backward(input_tensor, w, &grad_out, *stride, *padding, *groups, *bias);
                grads.insert((idx, "weight".into()), gw);
                if let Some(gb) = gb {
                    grads.insert((idx, "bias".into()), Tensor::from_vec(&[gb.len()], gb).unwrap());
                }
                gi
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let gamma = &weights.get(idx, "gamma")?.data;
                let mean = &weights.get(idx, "mean")?.data;
                let var = &weights.get(idx, "var")?.data;
                let (nn, c, h, w) = input_tensor.dims4().expect("bn input rank");
                let plane = h * w;
                let mut gi = Tensor::zeros(&input_tensor.shape);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for img in 0..nn {
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] + eps).sqrt();
                        let off = (img * c + ch) * plane;
                        for k in 0..plane {
                            let dy = grad_out.data[off + k];
                            let xh = (input_tensor.data[off + k] - mean[ch]) * inv;
                            gi.data[off + k] = dy * gamma[ch] * inv;
                            dgamma[ch] += dy * xh;
                            dbeta[ch] += dy;
                        }
                    }
                }
                grads.insert((idx, "gamma".into()), Tensor::from_vec(&[c], dgamma).unwrap());
                grads.insert((idx, "beta".into()), Tensor::from_vec(&[c], dbeta).unwrap());
                gi
            }
            LayerSpec::Act(kind) => {
                let data = input_tensor
                    .data
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&x, &dy)| dy * activation_grad_scalar(*kind, x))
                    .collect();
                Tensor {
                    shape: input_tensor.shape.clone(),
                    data,
                }
            }
            LayerSpec::ResidualAdd { skip } => {
                add_into(&mut node_grads[*skip], grad_out.clone());
                grad_out.clone()
            }
            LayerSpec::ChannelShuffle { groups } => {
                let (nn, c, h, w) = input_tensor.dims4().expect("shuffle input rank");
                let perm = shuffle_permutation(c, *groups);
                let plane = h * w;
                let mut gi = Tensor::zeros(&input_tensor.shape);
                for img in 0..nn {
                    for (src, &dst) in perm.iter().enumerate() {
                        let s = (img * c + dst) * plane;
                        let t = (img * c + src) * plane;
                        gi.data[t..t + plane].copy_from_slice(&grad_out.data[s..s + plane]);
                    }
                }
                gi
            }
            LayerSpec::GlobalAvgPool => {
                let (nn, c, h, w) = input_tensor.dims4().expect("pool input rank");
                let plane = h * w;
                let scale = 1.0 / plane as f32;
                let mut gi = Tensor::zeros(&input_tensor.shape);
                for img in 0..nn {
                    for ch in 0..c {
                        let dy = grad_out.data[img * c + ch] * scale;
                        let off = (img * c + ch) * plane;
                        gi.data[off..off + plane].fill(dy);
                    }
                }
                gi
            }
            LayerSpec::Linear { bias, .. } => {
                let w = weights.get(idx, "weight")?;
                let (nn, in_dim) = input_tensor.dims2().expect("linear input rank");
                let out_dim = w.shape[0];
                // dW = dY^T X : (out x n) * (n x in)
                let mut gw = Tensor::zeros(&w.shape);
                unsafe {
                    matrixmultiply::sgemm(
                        out_dim,
                        nn,
                        in_dim,
                        1.0,
                        grad_out.data.as_ptr(),
                        1,
                        out_dim as isize,
                        input_tensor.data.as_ptr(),
                        in_dim as isize,
                        1,
                        0.0,
                        gw.data.as_mut_ptr(),
                        in_dim as isize,
                        1,
                    );
                }
                grads.insert((idx, "weight".into()), gw);
                if *bias {
                    let mut gb = vec![0.0f32; out_dim];
                    for row in grad_out.data.chunks(out_dim) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    grads.insert((idx, "bias".into()), Tensor::from_vec(&[out_dim], gb).unwrap());
                }
                // dX = dY W : (n x out) * (out x in)
                let mut gi = Tensor::zeros(&input_tensor.shape);
                unsafe {
                    matrixmultiply::sgemm(
                        nn,
                        out_dim,
                        in_dim,
                        1.0,
                        grad_out.data.as_ptr(),
                        out_dim as isize,
                        1,
                        w.data.as_ptr(),
                        in_dim as isize,
                        1,
                        0.0,
                        gi.data.as_mut_ptr(),
                        in_dim as isize,
                        1,
                    );
                }
                gi
            }
        };
        match node.input {
            None => {
                for (a, b) in grad_input.data.iter_mut().zip(&grad_in.data) {
                    *a += b;
                }
            }
            Some(j) => add_into(&mut node_grads[j], grad_in),
        }
    }

    Ok(BackwardResult { grads, grad_input })
}
