//! Batch-norm folding into preceding convolutions, so post-training
//! quantization sees inference-time weights.

use super::{BackboneError, LayerSpec, ModelGraph, Node, WeightStore};
use crate::tensor::Tensor;

/// Folds BN parameters into conv weights:
/// w' = w * gamma / sqrt(var + eps) per output channel,
/// b' = (b - mean) * gamma / sqrt(var + eps) + beta.
#[allow(clippy::too_many_arguments)]
pub fn fold_batchnorm(
    weight: &Tensor,
    bias: Option<&[f32]>,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    bn_layer: usize,
) -> Result<(Tensor, Vec<f32>), BackboneError> {
    let out_ch = weight.shape[0];
    if gamma.len() != out_ch {
        return Err(BackboneError::ShapeMismatch(format!(
            "bn fold: {} channels vs conv out {out_ch}",
            gamma.len()
        )));
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(BackboneError::NegativeVariance(bn_layer));
    }
    let per_out: usize = weight.shape[1..].iter().product();
    let mut folded_w = weight.data.clone();
    let mut folded_b = vec![0.0f32; out_ch];
    for oc in 0..out_ch {
        let scale = gamma[oc] / (var[oc] + eps).sqrt();
        for v in &mut folded_w[oc * per_out..(oc + 1) * per_out] {
            *v *= scale;
        }
        let b0 = bias.map_or(0.0, |b| b[oc]);
        folded_b[oc] = (b0 - mean[oc]) * scale + beta[oc];
    }
    Ok((
        Tensor::from_vec(&weight.shape, folded_w).expect("same shape"),
        folded_b,
    ))
}

/// Rewrites the graph with every conv -> bn pair merged into a biased conv.
/// Skip edges and input edges are remapped onto the new indices.
pub fn fold_graph(
    graph: &ModelGraph,
    weights: &WeightStore,
) -> Result<(ModelGraph, WeightStore), BackboneError> {
    let n = graph.nodes.len();
    // old index -> new index (BN nodes map to their conv's new index)
    let mut remap = vec![usize::MAX; n];
    let mut new_nodes: Vec<Node> = Vec::with_capacity(n);
    let mut new_weights = WeightStore::default();

    let mut i = 0;
    while i < n {
        let node = &graph.nodes[i];
        let folds_with_next = matches!(node.spec, LayerSpec::Conv2d { .. })
            && i + 1 < n
            && matches!(graph.nodes[i + 1].spec, LayerSpec::BatchNorm { .. })
            && graph.nodes[i + 1].input == Some(i);
        let new_idx = new_nodes.len();
        let map_input = |inp: Option<usize>| -> Result<Option<usize>, BackboneError> {
            match inp {
                None => Ok(None),
                Some(j) => {
                    let m = remap[j];
                    if m == usize::MAX {
                        return Err(BackboneError::InvalidGraph(format!(
                            "fold: node {i} consumes unfolded node {j}"
                        )));
                    }
                    Ok(Some(m))
                }
            }
        };

        if folds_with_next {
            let (bn_layer, eps) = match graph.nodes[i + 1].spec {
                LayerSpec::BatchNorm { eps, .. } => (i + 1, eps),
                _ => unreachable!(),
            };
            // the conv's raw output must not feed anything but this BN
            for (k, other) in graph.nodes.iter().enumerate() {
                if k == i + 1 {
                    continue;
                }
                let consumes = other.input == Some(i)
                    || matches!(other.spec, LayerSpec::ResidualAdd { skip } if skip == i);
                if consumes {
                    return Err(BackboneError::InvalidGraph(format!(
                        "fold: conv {i} output consumed by node {k} besides its BN"
                    )));
                }
            }
            let (mut spec, had_bias) = match &node.spec {
                LayerSpec::Conv2d { bias, .. } => (node.spec.clone(), *bias),
                _ => unreachable!(),
            };
            let weight = weights.get(i, "weight")?;
            let bias = if had_bias {
                Some(weights.get(i, "bias")?.data.clone())
            } else {
                None
            };
            let (fw, fb) = fold_batchnorm(
                weight,
                bias.as_deref(),
                &weights.get(bn_layer, "gamma")?.data,
                &weights.get(bn_layer, "beta")?.data,
                &weights.get(bn_layer, "mean")?.data,
                &weights.get(bn_layer, "var")?.data,
                eps,
                bn_layer,
            )?;
            if let LayerSpec::Conv2d { bias, .. } = &mut spec {
                *bias = true;
            }
            let out_ch = fb.len();
            new_weights.insert(new_idx, "weight", fw);
            new_weights.insert(new_idx, "bias", Tensor::from_vec(&[out_ch], fb).unwrap());
            new_nodes.push(Node {
                spec,
                input: map_input(node.input)?,
            });
            remap[i] = new_idx;
            remap[i + 1] = new_idx;
            i += 2;
            continue;
        }

        if matches!(node.spec, LayerSpec::BatchNorm { .. }) {
            return Err(BackboneError::InvalidGraph(format!(
                "fold: batch norm at node {i} does not directly follow its conv"
            )));
        }

        let mut spec = node.spec.clone();
        if let LayerSpec::ResidualAdd { skip } = &mut spec {
            let m = remap[*skip];
            if m == usize::MAX {
                return Err(BackboneError::InvalidGraph(format!(
                    "fold: residual skip {skip} unresolved"
                )));
            }
            *skip = m;
        }
        // copy parameters of pass-through layers
        for name in ["weight", "bias"] {
            if let Ok(t) = weights.get(i, name) {
                new_weights.insert(new_idx, name, t.clone());
            }
        }
        new_nodes.push(Node {
            spec,
            input: map_input(node.input)?,
        });
        remap[i] = new_idx;
        i += 1;
    }

    let folded = ModelGraph {
        nodes: new_nodes,
        input_shape: graph.input_shape,
        descriptor_dim: graph.descriptor_dim,
    };
    Ok((folded, new_weights))
}
