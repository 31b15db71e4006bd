//! Layer arithmetic: convolution via patch-matrix lowering, channel shuffle,
//! batch norm, activations, pooling, linear projection and L2 normalization.
//!
//! Reduction order inside every op is fixed, so repeated forward passes on
//! identical inputs are bit-identical.

use super::BackboneError;
use crate::tensor::Tensor;

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lowers one image's channel block into a (c*k*k) x (out_h*out_w) row-major
/// patch matrix. Padding cells are written as `pad_value`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    pad_value: f32,
    out: &mut [f32],
) {
    let patch = out_h * out_w;
    debug_assert_eq!(out.len(), c * kernel * kernel * patch);
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

/// Scatter-add of a patch-matrix gradient back onto the input layout; the
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    grad_input: &mut [f32],
) {
    let patch = out_h * out_w;
    for ch in 0..c {
        let plane = &mut grad_input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = ((ch * kernel + ki) * kernel + kj) * patch;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += cols[row + oy * out_w + ox];
                    }
                }
            }
        }
    }
}

fn sgemm_rowmajor(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard cross-correlation. Weight shape is (out_ch, in_ch/groups, k, k);
/// groups = in_ch gives depthwise behavior.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = input.dims4().ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("conv input must be 4-d, got {:?}", input.shape))
    })?;
    let [out_ch, in_ch_g, k, k2]: [usize; 4] = weight
        .shape
        .clone()
        .try_into()
        .map_err(|_| BackboneError::ShapeMismatch(format!("conv weight shape {:?}", weight.shape)))?;
    if k != k2 || groups == 0 || c != groups * in_ch_g || out_ch % groups != 0 {
        return Err(BackboneError::ShapeMismatch(format!(
            "conv: input channels {c}, weight {:?}, groups {groups}",
            weight.shape
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(BackboneError::ShapeMismatch(format!(
                "conv bias length {} vs out_ch {out_ch}",
                b.len()
            )));
        }
    }
    let out_h = conv_out_size(h, k, stride, padding).ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("conv: spatial {h}x{w} too small for k={k} pad={padding}"))
    })?;
    let out_w = conv_out_size(w, k, stride, padding).unwrap();

    let patch = out_h * out_w;
    let kdim = in_ch_g * k * k;
    let out_g = out_ch / groups;
    let mut cols = vec![0.0f32; kdim * patch];
    let mut output = vec![0.0f32; n * out_ch * patch];

    for img in 0..n {
        for g in 0..groups {
            let in_off = (img * c + g * in_ch_g) * h * w;
            im2col(
                &input.data[in_off..in_off + in_ch_g * h * w],
                in_ch_g,
                h,
                w,
                k,
                stride,
                padding,
                out_h,
                out_w,
                0.0,
                &mut cols,
            );
            let w_off = g * out_g * kdim;
            let o_off = (img * out_ch + g * out_g) * patch;
            sgemm_rowmajor(
                out_g,
                kdim,
                patch,
                &weight.data[w_off..w_off + out_g * kdim],
                &cols,
                0.0,
                &mut output[o_off..o_off + out_g * patch],
            );
        }
        if let Some(b) = bias {
            for oc in 0..out_ch {
                let o_off = (img * out_ch + oc) * patch;
                for v in &mut output[o_off..o_off + patch] {
                    *v += b[oc];
                }
            }
        }
    }
    Tensor::from_vec(&[n, out_ch, out_h, out_w], output)
        .map_err(|e| BackboneError::ShapeMismatch(e.to_string()))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
    has_bias: bool,
) -> (Tensor, Tensor, Option<Vec<f32>>) {
    let (n, c, h, w) = input.dims4().expect("conv input rank");
    let (_, out_ch, out_h, out_w) = grad_output.dims4().expect("conv grad rank");
    let k = weight.shape[2];
    let in_ch_g = weight.shape[1];
    let out_g = out_ch / groups;
    let kdim = in_ch_g * k * k;
    let patch = out_h * out_w;

    let mut grad_input = Tensor::zeros(&input.shape);
    let mut grad_weight = Tensor::zeros(&weight.shape);
    let mut grad_bias = if has_bias { Some(vec![0.0f32; out_ch]) } else { None };

    let mut cols = vec![0.0f32; kdim * patch];
    let mut grad_cols = vec![0.0f32; kdim * patch];

    for img in 0..n {
        for g in 0..groups {
            let in_off = (img * c + g * in_ch_g) * h * w;
            im2col(
                &input.data[in_off..in_off + in_ch_g * h * w],
                in_ch_g,
                h,
                w,
                k,
                stride,
                padding,
                out_h,
                out_w,
                0.0,
                &mut cols,
            );
            let go_off = (img * out_ch + g * out_g) * patch;
            let go = &grad_output.data[go_off..go_off + out_g * patch];
            let w_off = g * out_g * kdim;

            // dW += dY * cols^T  -> (out_g x patch) * (patch x kdim)
            unsafe {
                matrixmultiply::sgemm(
                    out_g,
                    patch,
                    kdim,
                    1.0,
                    go.as_ptr(),
                    patch as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    patch as isize,
                    1.0,
                    grad_weight.data[w_off..w_off + out_g * kdim].as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            // dCols = W^T * dY -> (kdim x out_g) * (out_g x patch)
            unsafe {
                matrixmultiply::sgemm(
                    kdim,
                    out_g,
                    patch,
                    1.0,
                    weight.data[w_off..w_off + out_g * kdim].as_ptr(),
                    1,
                    kdim as isize,
                    go.as_ptr(),
                    patch as isize,
                    1,
                    0.0,
                    grad_cols.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
            col2im_add(
                &grad_cols,
                in_ch_g,
                h,
                w,
                k,
                stride,
                padding,
                out_h,
                out_w,
                &mut grad_input.data[in_off..in_off + in_ch_g * h * w],
            );
        }
        if let Some(gb) = grad_bias.as_mut() {
            for oc in 0..out_ch {
                let go_off = (img * out_ch + oc) * patch;
                gb[oc] += grad_output.data[go_off..go_off + patch].iter().sum::<f32>();
            }
        }
    }
    (grad_input, grad_weight, grad_bias)
}

/// The standard shuffle permutation: channels reshaped (g, C/g), transposed
/// and flattened. Values are unchanged.
pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = input.dims4().ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("shuffle input must be 4-d, got {:?}", input.shape))
    })?;
    if groups == 0 || c % groups != 0 {
        return Err(BackboneError::ShapeMismatch(format!(
            "shuffle: {c} channels not divisible by {groups} groups"
        )));
    }
    let per = c / groups;
    let plane = h * w;
    let mut out = vec![0.0f32; input.len()];
    for img in 0..n {
        for g in 0..groups {
            for j in 0..per {
                let src = (img * c + g * per + j) * plane;
                let dst = (img * c + j * groups + g) * plane;
                out[dst..dst + plane].copy_from_slice(&input.data[src..src + plane]);
            }
        }
    }
    Tensor::from_vec(&input.shape, out).map_err(|e| BackboneError::ShapeMismatch(e.to_string()))
}

/// Permutation sending source channel index to its shuffled position.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    let mut perm = vec![0usize; channels];
    for g in 0..groups {
        for j in 0..per {
            perm[g * per + j] = j * groups + g;
        }
    }
    perm
}

/// Inference-mode batch norm: y = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn batchnorm(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = input.dims4().ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("bn input must be 4-d, got {:?}", input.shape))
    })?;
    if [gamma.len(), beta.len(), mean.len(), var.len()] != [c; 4] {
        return Err(BackboneError::ShapeMismatch(format!(
            "bn parameter lengths must equal {c} channels"
        )));
    }
    let plane = h * w;
    let mut out = input.data.clone();
    for img in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            let off = (img * c + ch) * plane;
            for v in &mut out[off..off + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_vec(&input.shape, out).map_err(|e| BackboneError::ShapeMismatch(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ActKind {
    Relu,
    Relu6,
    HardSwish,
}

pub fn activation_scalar(kind: ActKind, x: f32) -> f32 {
    match kind {
        ActKind::Relu => x.max(0.0),
        ActKind::Relu6 => x.clamp(0.0, 6.0),
        ActKind::HardSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
    }
}

pub fn activation_grad_scalar(kind: ActKind, x: f32) -> f32 {
    match kind {
        ActKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActKind::Relu6 => {
            if x > 0.0 && x < 6.0 {
                1.0
            } else {
                0.0
            }
        }
        ActKind::HardSwish => {
            if x <= -3.0 {
                0.0
            } else if x >= 3.0 {
                1.0
            } else {
                (2.0 * x + 3.0) / 6.0
            }
        }
    }
}

pub fn apply_activation(input: &Tensor, kind: ActKind) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .map(|&x| activation_scalar(kind, x))
            .collect(),
    }
}

/// (N, C, H, W) -> (N, C) mean over the spatial grid.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = input.dims4().ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("pool input must be 4-d, got {:?}", input.shape))
    })?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c);
    for img in 0..n {
        for ch in 0..c {
            let off = (img * c + ch) * plane;
            out.push(input.data[off..off + plane].iter().sum::<f32>() / plane as f32);
        }
    }
    Tensor::from_vec(&[n, c], out).map_err(|e| BackboneError::ShapeMismatch(e.to_string()))
}

/// y = x W^T + b with weight shape (out_dim, in_dim).
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor, BackboneError> {
    let (n, d_in) = input.dims2().ok_or_else(|| {
        BackboneError::ShapeMismatch(format!("linear input must be 2-d, got {:?}", input.shape))
    })?;
    let [out_dim, in_dim]: [usize; 2] = weight
        .shape
        .clone()
        .try_into()
        .map_err(|_| BackboneError::ShapeMismatch(format!("linear weight shape {:?}", weight.shape)))?;
    if in_dim != d_in {
        return Err(BackboneError::ShapeMismatch(format!(
            "linear: input dim {d_in} vs weight in dim {in_dim}"
        )));
    }
    let mut out = vec![0.0f32; n * out_dim];
    // x (n x in) * W^T (in x out)
    unsafe {
        matrixmultiply::sgemm(
            n,
            in_dim,
            out_dim,
            1.0,
            input.data.as_ptr(),
            in_dim as isize,
            1,
            weight.data.as_ptr(),
            1,
            in_dim as isize,
            0.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
    if let Some(b) = bias {
        if b.len() != out_dim {
            return Err(BackboneError::ShapeMismatch(format!(
                "linear bias length {} vs out dim {out_dim}",
                b.len()
            )));
        }
        for row in out.chunks_mut(out_dim) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[n, out_dim], out).map_err(|e| BackboneError::ShapeMismatch(e.to_string()))
}

pub const DEGENERATE_NORM: f32 = 1e-12;

/// Row-wise L2 normalization; rows with pre-normalization norm below
/// [`DEGENERATE_NORM`] are set to zero and flagged.
pub fn l2_normalize(input: &Tensor) -> (Tensor, Vec<bool>) {
    let (n, d) = input.dims2().expect("normalize expects (N, D)");
    let mut out = vec![0.0f32; n * d];
    let mut degenerate = vec![false; n];
    for row in 0..n {
        let src = &input.data[row * d..(row + 1) * d];
        let norm = src.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < DEGENERATE_NORM {
            degenerate[row] = true;
            continue;
        }
        for (o, &v) in out[row * d..(row + 1) * d].iter_mut().zip(src) {
            *o = v / norm;
        }
    }
    (
        Tensor::from_vec(&[n, d], out).expect("same shape"),
        degenerate,
    )
}
