//! Layer graph, FP32 forward inference and model footprint arithmetic.
//!
//! A [`ModelGraph`] is a topologically ordered node list with explicit input
//! edges; the tail is always GlobalAvgPool followed by a Linear projection to
//! the descriptor dimension. Descriptors are L2-normalized.

pub mod container;
pub mod fold;
pub mod ops;
pub mod presets;

use crate::tensor::Tensor;
use ops::ActKind;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("negative variance in batch norm at layer {0}")]
    NegativeVariance(usize),
    #[error("missing parameter {name} for layer {layer}")]
    MissingParameter { layer: usize, name: String },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed container: {0}")]
    MalformedContainer(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Act(ActKind),
    /// Adds the output of node `skip` to this node's input.
    ResidualAdd {
        skip: usize,
    },
    ChannelShuffle {
        groups: usize,
    },
    GlobalAvgPool,
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Node {
    pub spec: LayerSpec,
    /// Producing node index; `None` means the graph input.
    pub input: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    /// (C, H, W) of a single input image.
    pub input_shape: [usize; 3],
    pub descriptor_dim: usize,
}

impl ModelGraph {
    /// Static shape inference: per-node output shapes (without the batch
    /// dimension folded in; shapes include N as given).
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>, BackboneError> {
        let input_shape = vec![
            batch,
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        ];
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let in_shape = match node.input {
                None => &input_shape,
                Some(i) if i < idx => &shapes[i],
                Some(i) => {
                    return Err(BackboneError::InvalidGraph(format!(
                        "node {idx} consumes later node {i}"
                    )))
                }
            };
            let out = match &node.spec {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    groups,
                    ..
                } => {
                    let [n, c, h, w]: [usize; 4] = in_shape.clone().try_into().map_err(|_| {
                        BackboneError::ShapeMismatch(format!("node {idx}: conv input {in_shape:?}"))
                    })?;
                    if c != *in_ch || in_ch % groups != 0 || out_ch % groups != 0 {
                        return Err(BackboneError::ShapeMismatch(format!(
                            "node {idx}: conv expects {in_ch} channels (groups {groups}), got {c}"
                        )));
                    }
                    let oh = ops::conv_out_size(h, *kernel, *stride, *padding).ok_or_else(|| {
                        BackboneError::ShapeMismatch(format!("node {idx}: conv spatial underflow"))
                    })?;
                    let ow = ops::conv_out_size(w, *kernel, *stride, *padding).unwrap();
                    vec![n, *out_ch, oh, ow]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    if in_shape.len() != 4 || in_shape[1] != *channels {
                        return Err(BackboneError::ShapeMismatch(format!(
                            "node {idx}: bn expects {channels} channels, got {in_shape:?}"
                        )));
                    }
                    in_shape.clone()
                }
                LayerSpec::Act(_) => in_shape.clone(),
                LayerSpec::ResidualAdd { skip } => {
                    if *skip >= idx {
                        return Err(BackboneError::InvalidGraph(format!(
                            "node {idx}: residual skip {skip} is not earlier"
                        )));
                    }
                    if shapes[*skip] != *in_shape {
                        return Err(BackboneError::ShapeMismatch(format!(
                            "node {idx}: residual shapes {:?} vs {:?}",
                            shapes[*skip], in_shape
                        )));
                    }
                    in_shape.clone()
                }
                LayerSpec::ChannelShuffle { groups } => {
                    if in_shape.len() != 4 || *groups == 0 || in_shape[1] % groups != 0 {
                        return Err(BackboneError::ShapeMismatch(format!(
                            "node {idx}: shuffle groups {groups} vs shape {in_shape:?}"
                        )));
                    }
                    in_shape.clone()
                }
                LayerSpec::GlobalAvgPool => {
                    let [n, c, _, _]: [usize; 4] = in_shape.clone().try_into().map_err(|_| {
                        BackboneError::ShapeMismatch(format!("node {idx}: pool input {in_shape:?}"))
                    })?;
                    vec![n, c]
                }
                LayerSpec::Linear { in_dim, out_dim, .. } => {
                    if in_shape.len() != 2 || in_shape[1] != *in_dim {
                        return Err(BackboneError::ShapeMismatch(format!(
                            "node {idx}: linear expects (N, {in_dim}), got {in_shape:?}"
                        )));
                    }
                    vec![in_shape[0], *out_dim]
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Structural validation: acyclicity (by construction of input edges),
    /// shape soundness, and the pool -> linear tail.
    pub fn validate(&self) -> Result<(), BackboneError> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(BackboneError::InvalidGraph("graph needs a pool+linear tail".into()));
        }
        let pools = self
            .nodes
            .iter()
            .filter(|nd| matches!(nd.spec, LayerSpec::GlobalAvgPool))
            .count();
        let linears = self
            .nodes
            .iter()
            .filter(|nd| matches!(nd.spec, LayerSpec::Linear { .. }))
            .count();
        if pools != 1 || linears != 1 {
            return Err(BackboneError::InvalidGraph(
                "graph must contain exactly one GlobalAvgPool and one Linear".into(),
            ));
        }
        if !matches!(self.nodes[n - 2].spec, LayerSpec::GlobalAvgPool) {
            return Err(BackboneError::InvalidGraph("second-to-last node must be GlobalAvgPool".into()));
        }
        match self.nodes[n - 1].spec {
            LayerSpec::Linear { out_dim, .. } if out_dim == self.descriptor_dim => {}
            _ => {
                return Err(BackboneError::InvalidGraph(
                    "last node must be Linear projecting to descriptor_dim".into(),
                ))
            }
        }
        self.infer_shapes(1)?;
        Ok(())
    }

    /// Trainable parameter count (conv/linear weights and biases, BN gamma
    /// and beta; running statistics are buffers, not parameters).
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| spec_param_count(&n.spec)).sum()
    }

    /// Backbone vs head split. The head is the tail Linear projection; both
    /// bias-counting conventions are reported.
    pub fn param_split(&self) -> ParamSplit {
        let total = self.param_count();
        let (head_with_bias, head_without_bias) = match self.nodes.last().map(|n| &n.spec) {
            Some(LayerSpec::Linear { in_dim, out_dim, bias }) => (
                in_dim * out_dim + if *bias { *out_dim } else { 0 },
                in_dim * out_dim,
            ),
            _ => (0, 0),
        };
        ParamSplit {
            total,
            backbone: total - head_with_bias,
            head_with_bias,
            head_without_bias,
        }
    }
}

fn spec_param_count(spec: &LayerSpec) -> usize {
    match spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            groups,
            bias,
            ..
        } => kernel * kernel * (in_ch / groups) * out_ch + if *bias { *out_ch } else { 0 },
        LayerSpec::BatchNorm { channels, .. } => 2 * channels,
        LayerSpec::Linear { in_dim, out_dim, bias } => {
            in_dim * out_dim + if *bias { *out_dim } else { 0 }
        }
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSplit {
    pub total: usize,
    pub backbone: usize,
    pub head_with_bias: usize,
    pub head_without_bias: usize,
}

/// Per-layer parameter tensors keyed by (layer index, parameter name).
/// Names: conv/linear use "weight"/"bias"; batch norm uses "gamma", "beta",
/// "mean", "var".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub params: BTreeMap<(usize, String), Tensor>,
}

impl WeightStore {
    pub fn get(&self, layer: usize, name: &str) -> Result<&Tensor, BackboneError> {
        self.params
            .get(&(layer, name.to_string()))
            .ok_or_else(|| BackboneError::MissingParameter {
                layer,
                name: name.to_string(),
            })
    }

    pub fn insert(&mut self, layer: usize, name: &str, tensor: Tensor) {
        self.params.insert((layer, name.to_string()), tensor);
    }

    /// Deterministic He-style random initialization for a graph.
    pub fn init_random(graph: &ModelGraph, seed: u64) -> Self {
        use rand::prelude::*;
        use rand_distr::Normal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WeightStore::default();
        for (idx, node) in graph.nodes.iter().enumerate() {
            match &node.spec {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    groups,
                    bias,
                    ..
                } => {
                    let fan_in = (in_ch / groups) * kernel * kernel;
                    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
                    let shape = [*out_ch, in_ch / groups, *kernel, *kernel];
                    let data: Vec<f32> = (0..shape.iter().product::<usize>())
                        .map(|_| dist.sample(&mut rng))
                        .collect();
                    ws.insert(idx, "weight", Tensor::from_vec(&shape, data).unwrap());
                    if *bias {
                        ws.insert(idx, "bias", Tensor::zeros(&[*out_ch]));
                    }
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    ws.insert(idx, "gamma", Tensor::from_vec(&[*channels], vec![1.0; *channels]).unwrap());
                    ws.insert(idx, "beta", Tensor::zeros(&[*channels]));
                    ws.insert(idx, "mean", Tensor::zeros(&[*channels]));
                    ws.insert(idx, "var", Tensor::from_vec(&[*channels], vec![1.0; *channels]).unwrap());
                }
                LayerSpec::Linear { in_dim, out_dim, bias } => {
                    let dist = Normal::new(0.0f32, (2.0 / *in_dim as f32).sqrt()).unwrap();
                    let data: Vec<f32> = (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect();
                    ws.insert(idx, "weight", Tensor::from_vec(&[*out_dim, *in_dim], data).unwrap());
                    if *bias {
                        ws.insert(idx, "bias", Tensor::zeros(&[*out_dim]));
                    }
                }
                _ => {}
            }
        }
        ws
    }
}

/// Descriptors plus degenerate-row flags (rows whose pre-normalization norm
/// fell below 1e-12 and were normalized to the zero vector).
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// (N, d) unit-norm rows (except degenerate rows, which are zero).
    pub descriptors: Tensor,
    pub degenerate: Vec<bool>,
}

/// Evaluates one node given its input and the store.
pub fn run_node(
    idx: usize,
    spec: &LayerSpec,
    input: &Tensor,
    skip_value: Option<&Tensor>,
    weights: &WeightStore,
) -> Result<Tensor, BackboneError> {
    match spec {
        LayerSpec::Conv2d {
            stride,
            padding,
            groups,
            bias,
            ..
        } => {
            let w = weights.get(idx, "weight")?;
            let b = if *bias {
                Some(weights.get(idx, "bias")?.data.as_slice())
            } else {
                None
            };
            ops::conv2d(input, w, b, *stride, *padding, *groups)
        }
        LayerSpec::BatchNorm { eps, .. } => ops::batchnorm(
            input,
            &weights.get(idx, "gamma")?.data,
            &weights.get(idx, "beta")?.data,
            &weights.get(idx, "mean")?.data,
            &weights.get(idx, "var")?.data,
            *eps,
        ),
        LayerSpec::Act(kind) => Ok(ops::apply_activation(input, *kind)),
        LayerSpec::ResidualAdd { .. } => {
            let skip = skip_value.expect("residual skip value provided");
            if skip.shape != input.shape {
                return Err(BackboneError::ShapeMismatch(format!(
                    "residual add: {:?} vs {:?}",
                    input.shape, skip.shape
                )));
            }
            let data = input
                .data
                .iter()
                .zip(&skip.data)
                .map(|(a, b)| a + b)
                .collect();
            Ok(Tensor {
                shape: input.shape.clone(),
                data,
            })
        }
        LayerSpec::ChannelShuffle { groups } => ops::channel_shuffle(input, *groups),
        LayerSpec::GlobalAvgPool => ops::global_avg_pool(input),
        LayerSpec::Linear { bias, .. } => {
            let w = weights.get(idx, "weight")?;
            let b = if *bias {
                Some(weights.get(idx, "bias")?.data.as_slice())
            } else {
                None
            };
            ops::linear(input, w, b)
        }
    }
}

/// Runs all nodes and returns every node output (kept for skip edges,
/// backward passes and calibration).
pub fn run_nodes(
    graph: &ModelGraph,
    weights: &WeightStore,
    batch: &Tensor,
) -> Result<Vec<Tensor>, BackboneError> {
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let input = match node.input {
            None => batch,
            Some(i) => &outputs[i],
        };
        let skip = match node.spec {
            LayerSpec::ResidualAdd { skip } => Some(&outputs[skip]),
            _ => None,
        };
        let out = run_node(idx, &node.spec, input, skip, weights)?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Pure inference: g = normalize(linear(pool(f(I)))). Deterministic; batch
/// norm uses stored statistics.
pub fn forward(
    graph: &ModelGraph,
    weights: &WeightStore,
    batch: &Tensor,
) -> Result<ForwardResult, BackboneError> {
    let outputs = run_nodes(graph, weights, batch)?;
    let prenorm = outputs.last().ok_or_else(|| {
        BackboneError::InvalidGraph("empty graph".into())
    })?;
    let (descriptors, degenerate) = ops::l2_normalize(prenorm);
    Ok(ForwardResult {
        descriptors,
        degenerate,
    })
}

/// Bytes per parameter for each precision regime.
pub fn bytes_per_param(precision: Precision) -> usize {
    match precision {
        Precision::Fp32 => 4,
        Precision::Fp16 => 2,
        Precision::Int8 => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
    Int8,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Fp32 => write!(f, "fp32"),
            Precision::Fp16 => write!(f, "fp16"),
            Precision::Int8 => write!(f, "int8"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            other => Err(format!("unknown precision: {other}")),
        }
    }
}

/// Model size in MiB: param_count * bytes-per-param / 1024^2.
pub fn memory_footprint(param_count: usize, precision: Precision) -> f64 {
    (param_count * bytes_per_param(precision)) as f64 / (1024.0 * 1024.0)
}
