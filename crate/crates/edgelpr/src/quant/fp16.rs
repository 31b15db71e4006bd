//! Bit-exact emulated half precision.
//!
//! Weights and every inter-layer activation are rounded through IEEE 754
//! binary16 (round to nearest, ties to even); arithmetic inside each layer
//! stays in f32. Out-of-range values saturate to infinity per IEEE rules and
//! are reported through a flag.

use super::QuantError;
use crate::backbone::{run_node, LayerSpec, ModelGraph, WeightStore};
use crate::tensor::Tensor;
use half::f16;

/// Rounds every element through binary16. Returns true if any element became
/// non-finite in half precision.
fn round_slice_f16(data: &mut [f32]) -> bool {
    let mut nonfinite = false;
    for v in data.iter_mut() {
        let h = f16::from_f32(*v);
        if !h.is_finite() {
            nonfinite = true;
        }
        *v = h.to_f32();
    }
    nonfinite
}

pub fn round_tensor_f16(t: &Tensor) -> (Tensor, bool) {
    let mut out = t.clone();
    let nonfinite = round_slice_f16(&mut out.data);
    (out, nonfinite)
}

#[derive(Debug, Clone)]
pub struct Fp16Result {
    /// (N, d) unit rows, float32.
    pub descriptors: Tensor,
    pub degenerate: Vec<bool>,
    /// True if any binary16 infinity or NaN appeared anywhere in the pass.
    pub nonfinite: bool,
}

/// Forward pass with all parameters and inter-layer activations stored in
/// binary16. The final linear output is kept in f32 and L2-normalized there,
/// matching how a mixed-precision deployment keeps the descriptor head in
/// full precision.
pub fn forward_fp16(
    graph: &ModelGraph,
    weights: &WeightStore,
    batch: &Tensor,
) -> Result<Fp16Result, QuantError> {
    let mut nonfinite = false;
    let mut half_weights = weights.clone();
    for t in half_weights.params.values_mut() {
        nonfinite |= round_slice_f16(&mut t.data);
    }

    let (input, nf) = round_tensor_f16(batch);
    nonfinite |= nf;

    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let last = graph.nodes.len().saturating_sub(1);
    for (idx, node) in graph.nodes.iter().enumerate() {
        let node_input = match node.input {
            None => &input,
            Some(i) => &outputs[i],
        };
        let skip = match node.spec {
            LayerSpec::ResidualAdd { skip } => Some(&outputs[skip]),
            _ => None,
        };
        let mut out = run_node(idx, &node.spec, node_input, skip, &half_weights)?;
        if idx != last {
            nonfinite |= round_slice_f16(&mut out.data);
        }
        outputs.push(out);
    }
    let prenorm = outputs
        .last()
        .ok_or_else(|| QuantError::NonFiniteValue("empty graph".into()))?;
    nonfinite |= !prenorm.all_finite();
    let (descriptors, degenerate) = crate::backbone::ops::l2_normalize(prenorm);
    Ok(Fp16Result {
        descriptors,
        degenerate,
        nonfinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward, presets::build_preset, WeightStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary16_rounding_examples() {
        assert_eq!(f16::from_f32(1.0).to_f32(), 1.0);
        // last representable step at magnitude 1 is 2^-10
        let x = 1.0 + 2f32.powi(-10);
        assert_eq!(f16::from_f32(x).to_f32(), x);
        // 65520 is the midpoint between 65504 (max finite) and 65536; ties
        // to even picks 65536, which overflows to infinity
        assert!(f16::from_f32(65520.0).is_infinite());
        assert_eq!(f16::from_f32(65519.0).to_f32(), 65504.0);
    }

    #[test]
    fn fp16_close_to_fp32_on_presets() {
        for preset in crate::backbone::presets::PRESET_NAMES {
            let mut graph = build_preset(preset, 16).unwrap();
            graph.input_shape = [3, 32, 32];
            let weights = WeightStore::init_random(&graph, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
            let batch = Tensor::from_vec(&[1, 3, 32, 32], data).unwrap();
            let full = forward(&graph, &weights, &batch).unwrap();
            let half = forward_fp16(&graph, &weights, &batch).unwrap();
            assert!(!half.nonfinite);
            let cos: f32 = full
                .descriptors
                .data
                .iter()
                .zip(&half.descriptors.data)
                .map(|(a, b)| a * b)
                .sum();
            assert!(cos >= 0.999, "{preset}: cosine {cos}");
        }
    }

    #[test]
    fn fp16_flags_overflow() {
        let graph = build_preset("tiny_resnet", 16).unwrap();
        let mut graph = graph;
        graph.input_shape = [3, 16, 16];
        let mut weights = WeightStore::init_random(&graph, 8);
        // blow up the stem conv so activations overflow binary16
        for ((_, name), t) in weights.params.iter_mut() {
            if name == "weight" {
                for v in &mut t.data {
                    *v *= 1e6;
                }
                break;
            }
        }
        let batch = Tensor::from_vec(&[1, 3, 16, 16], vec![1.0; 3 * 256]).unwrap();
        let res = forward_fp16(&graph, &weights, &batch).unwrap();
        assert!(res.nonfinite);
    }

    #[test]
    fn fp16_is_deterministic() {
        let mut graph = build_preset("tiny_mobilenet", 16).unwrap();
        graph.input_shape = [3, 32, 32];
        let weights = WeightStore::init_random(&graph, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::from_vec(&[1, 3, 32, 32], data).unwrap();
        let a = forward_fp16(&graph, &weights, &batch).unwrap();
        let b = forward_fp16(&graph, &weights, &batch).unwrap();
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.descriptors), bits(&b.descriptors));
    }
}
