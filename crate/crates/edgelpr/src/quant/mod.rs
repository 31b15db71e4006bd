//! Static post-training quantization: calibration statistics, MSE scale and
//! zero-point search, fixed-point requantization, and bit-exact INT8 / FP16
//! execution paths.

pub mod container;
pub mod fp16;
pub mod int8;

use crate::backbone::{run_nodes, BackboneError, LayerSpec, ModelGraph, WeightStore};
use crate::bev::BevImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use fp16::{forward_fp16, Fp16Result};
pub use int8::{forward_int8, forward_int8_traced, quantize_model, Int8Trace, QuantizedModel};

/// [`forward_fp16`] on a list of BEV images.
pub fn forward_fp16_images(
    graph: &ModelGraph,
    weights: &WeightStore,
    images: &[&BevImage],
) -> Result<Fp16Result, QuantError> {
    let batch = crate::bev::batch_tensor(images);
    forward_fp16(graph, weights, &batch)
}

/// Smallest admissible scale, used for degenerate (constant-zero) ranges.
pub const SCALE_FLOOR: f32 = 1e-8;

/// Cap on the per-site calibration reservoir.
pub const RESERVOIR_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("missing calibration stats for site {0}")]
    MissingStats(usize),
    #[error("graph still contains a batch norm at node {0}; fold it first")]
    UnfoldedGraph(usize),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("malformed quantized container: {0}")]
    MalformedContainer(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Affine quantization parameters. Dequantization is x = s * (q - z).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(QuantError::NonFiniteValue("quant scale".into()));
        }
        if !(-128..=127).contains(&self.zero_point) {
            return Err(QuantError::NonFiniteValue("zero point out of i8 range".into()));
        }
        Ok(())
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

/// q = clamp(round_half_even(x / s) + z, -128, 127).
pub fn quantize_value(x: f32, params: QuantParams) -> i8 {
    let r = (x / params.scale).round_ties_even();
    let q = if r >= 127.0 - params.zero_point as f32 {
        127
    } else if r <= -128.0 - params.zero_point as f32 {
        -128
    } else {
        r as i32 + params.zero_point
    };
    q.clamp(-128, 127) as i8
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn dequantize(&self) -> crate::tensor::Tensor {
        let data = self.data.iter().map(|&q| self.params.dequantize(q)).collect();
        crate::tensor::Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

pub fn quantize_tensor(x: &crate::tensor::Tensor, params: QuantParams) -> QuantTensor {
    QuantTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| quantize_value(v, params)).collect(),
        params,
    }
}

fn mse_for(samples: &[f32], params: QuantParams) -> f64 {
    let mut acc = 0.0f64;
    for &x in samples {
        let e = (x - params.dequantize(quantize_value(x, params))) as f64;
        acc += e * e;
    }
    acc / samples.len() as f64
}

/// Grid-searches (s, z) minimizing the empirical squared reconstruction
/// error. 120 scales geometrically span [0.25, 1.2] times the min-max scale,
/// each paired with the range-aligned zero-point and with z = 0; the plain
/// min-max candidate itself is also scored, so the result never loses to
/// min-max calibration.
pub fn calibrate_mse(samples: &[f32]) -> Result<QuantParams, QuantError> {
    let finite: Vec<f32> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let min = finite.iter().copied().fold(f32::INFINITY, f32::min);
    let max = finite.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    if min == max {
        // Constant input. A nonzero constant c is reproduced exactly by
        // s = |c|, z = 0 (q = sign(c)); all-zero input takes the floor scale.
        let c = min;
        if c == 0.0 {
            return Ok(QuantParams {
                scale: SCALE_FLOOR,
                zero_point: 0,
            });
        }
        return Ok(QuantParams {
            scale: c.abs().max(SCALE_FLOOR),
            zero_point: 0,
        });
    }

    let base = ((max - min) / 255.0).max(SCALE_FLOOR);
    // The zero point is clamped to the i8 range, so a representable range is
    // always anchored near zero. When the data sits in a narrow band away
    // from zero, (max - min) / 255 scales cannot reach it; the grid therefore
    // spans up to the zero-anchored scale as well.
    let base_zero = ((max.max(0.0) - min.min(0.0)) / 255.0).max(base);
    let mut candidates: Vec<QuantParams> = Vec::with_capacity(244);
    let lo = 0.25 * base as f64;
    let hi = 1.2 * base_zero as f64;
    for i in 0..120 {
        let t = i as f64 / 119.0;
        let s = (lo * (hi / lo).powf(t)) as f32;
        push_scale_candidates(&mut candidates, s.max(SCALE_FLOOR), min);
    }
    push_scale_candidates(&mut candidates, base, min);
    push_scale_candidates(&mut candidates, base_zero, min);

    let mut best = candidates[0];
    let mut best_mse = mse_for(&finite, best);
    for &cand in &candidates[1..] {
        let mse = mse_for(&finite, cand);
        if mse < best_mse {
            best = cand;
            best_mse = mse;
        }
    }
    Ok(best)
}

fn push_scale_candidates(out: &mut Vec<QuantParams>, s: f32, min: f32) {
    let z = ((-min / s).round() as i64 - 128).clamp(-128, 127) as i32;
    out.push(QuantParams {
        scale: s,
        zero_point: z,
    });
    out.push(QuantParams {
        scale: s,
        zero_point: 0,
    });
}

/// The naive min-max parameters for a sample range, used as the comparison
/// baseline in the dominance property.
pub fn minmax_params(min: f32, max: f32) -> QuantParams {
    let s = ((max - min) / 255.0).max(SCALE_FLOOR);
    QuantParams {
        scale: s,
        zero_point: ((-min / s).round() as i64 - 128).clamp(-128, 127) as i32,
    }
}

/// Running range plus a bounded value reservoir for one activation site.
#[derive(Debug, Clone)]
pub struct CalibrationStats {
    pub min: f32,
    pub max: f32,
    pub reservoir: Vec<f32>,
    pub seen: u64,
    rng: ChaCha8Rng,
}

impl CalibrationStats {
    pub fn new(seed: u64, site: usize) -> Self {
        CalibrationStats {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            reservoir: Vec::new(),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(
                seed ^ (site as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ),
        }
    }

    /// Algorithm R reservoir sampling; sequential and deterministic for a
    /// fixed seed and update order.
    pub fn update(&mut self, value: f32) {
        if !value.is_finite() {
            return;
        }
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        if self.reservoir.len() < RESERVOIR_CAP {
            self.reservoir.push(value);
        } else {
            let j = self.rng.gen_range(0..=self.seen);
            if (j as usize) < RESERVOIR_CAP {
                self.reservoir[j as usize] = value;
            }
        }
        self.seen += 1;
    }

    pub fn update_all(&mut self, values: &[f32]) {
        for &v in values {
            self.update(v);
        }
    }
}

/// Runs every calibration image through the folded graph and accumulates
/// per-site statistics. Site 0 is the graph input; site i+1 is node i's
/// output.
pub fn collect_stats(
    graph: &ModelGraph,
    weights: &WeightStore,
    calib_images: &[&BevImage],
    seed: u64,
) -> Result<Vec<CalibrationStats>, QuantError> {
    if calib_images.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    for (idx, node) in graph.nodes.iter().enumerate() {
        if matches!(node.spec, LayerSpec::BatchNorm { .. }) {
            return Err(QuantError::UnfoldedGraph(idx));
        }
    }
    let mut stats: Vec<CalibrationStats> = (0..graph.nodes.len() + 1)
        .map(|site| CalibrationStats::new(seed, site))
        .collect();
    for image in calib_images {
        let input = image.to_tensor();
        stats[0].update_all(&input.data);
        let outputs = run_nodes(graph, weights, &input)?;
        for (idx, out) in outputs.iter().enumerate() {
            stats[idx + 1].update_all(&out.data);
        }
    }
    Ok(stats)
}

/// Fixed-point encoding of a positive real multiplier as
/// mantissa * 2^(-shift) with mantissa in [2^30, 2^31).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FixedMultiplier {
    pub mantissa: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn from_real(real: f64) -> Result<Self, QuantError> {
        if !(real > 0.0 && real.is_finite()) {
            return Err(QuantError::NonFiniteValue(format!(
                "requant multiplier {real}"
            )));
        }
        let mut shift = 0i32;
        let mut r = real;
        while r < 0.5 {
            r *= 2.0;
            shift += 1;
        }
        while r >= 1.0 {
            r /= 2.0;
            shift -= 1;
        }
        // r in [0.5, 1); mantissa = round(r * 2^31) in [2^30, 2^31].
        let mut mantissa = (r * (1u64 << 31) as f64).round() as i64;
        if mantissa == 1 << 31 {
            mantissa >>= 1;
            shift -= 1;
        }
        Ok(FixedMultiplier {
            mantissa: mantissa as i32,
            shift: shift + 31,
        })
    }

    pub fn to_real(self) -> f64 {
        self.mantissa as f64 * 2f64.powi(-self.shift)
    }

    /// acc * mantissa * 2^(-shift) with round-half-up on the shifted value.
    pub fn apply(self, acc: i32) -> i32 {
        let prod = acc as i64 * self.mantissa as i64;
        let v = if self.shift > 0 {
            (prod + (1i64 << (self.shift - 1))) >> self.shift
        } else {
            prod << (-self.shift)
        };
        v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }
}
