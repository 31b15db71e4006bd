//! Desk-scale backbone presets. Each preserves the signature ops of one
//! lightweight-CNN family (residual adds; depthwise conv + hard-swish;
//! channel shuffle) at a fraction of the size, with a shared
//! pool -> linear descriptor head.

use super::ops::ActKind;
use super::{BackboneError, LayerSpec, ModelGraph, Node};

/// Small helper building a sequential chain with occasional skip edges.
struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder { nodes: Vec::new() }
    }

    /// Pushes a node consuming the previous node (or the graph input).
    fn push(&mut self, spec: LayerSpec) -> usize {
        let input = if self.nodes.is_empty() {
            None
        } else {
            Some(self.nodes.len() - 1)
        };
        self.nodes.push(Node { spec, input });
        self.nodes.len() - 1
    }

    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn conv_bn(&mut self, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, groups: usize) {
        self.push(LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
            bias: false,
        });
        self.push(LayerSpec::BatchNorm {
            channels: out_ch,
            eps: 1e-5,
        });
    }

    fn conv_bn_act(
        &mut self,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: ActKind,
    ) {
        self.conv_bn(in_ch, out_ch, kernel, stride, groups);
        self.push(LayerSpec::Act(act));
    }
}

fn tiny_resnet(descriptor_dim: usize) -> ModelGraph {
    let mut b = GraphBuilder::new();
    // stem: 256 -> 16 spatial, 24 channels
    b.conv_bn_act(3, 8, 3, 2, 1, ActKind::Relu);
    b.conv_bn_act(8, 12, 3, 2, 1, ActKind::Relu);
    b.conv_bn_act(12, 16, 3, 2, 1, ActKind::Relu);
    b.conv_bn_act(16, 24, 3, 2, 1, ActKind::Relu);
    // two basic residual blocks at 16x16
    for _ in 0..2 {
        let block_in = b.last();
        b.conv_bn_act(24, 24, 3, 1, 1, ActKind::Relu);
        b.conv_bn(24, 24, 3, 1, 1);
        b.push(LayerSpec::ResidualAdd { skip: block_in });
        b.push(LayerSpec::Act(ActKind::Relu));
    }
    b.push(LayerSpec::GlobalAvgPool);
    b.push(LayerSpec::Linear {
        in_dim: 24,
        out_dim: descriptor_dim,
        bias: true,
    });
    ModelGraph {
        nodes: b.nodes,
        input_shape: [3, 256, 256],
        descriptor_dim,
    }
}

fn tiny_mobilenet(descriptor_dim: usize) -> ModelGraph {
    let mut b = GraphBuilder::new();
    b.conv_bn_act(3, 8, 3, 2, 1, ActKind::HardSwish);
    // depthwise separable stages
    b.conv_bn_act(8, 8, 3, 2, 8, ActKind::Relu); // depthwise
    b.conv_bn_act(8, 16, 1, 1, 1, ActKind::HardSwish); // pointwise
    b.conv_bn_act(16, 16, 3, 2, 16, ActKind::Relu); // depthwise
    b.conv_bn_act(16, 24, 1, 1, 1, ActKind::HardSwish);
    b.conv_bn_act(24, 24, 3, 2, 24, ActKind::Relu6); // depthwise
    b.conv_bn_act(24, 32, 1, 1, 1, ActKind::HardSwish);
    b.conv_bn_act(32, 32, 3, 1, 32, ActKind::HardSwish); // depthwise
    b.conv_bn_act(32, 32, 1, 1, 1, ActKind::HardSwish);
    b.push(LayerSpec::GlobalAvgPool);
    b.push(LayerSpec::Linear {
        in_dim: 32,
        out_dim: descriptor_dim,
        bias: true,
    });
    ModelGraph {
        nodes: b.nodes,
        input_shape: [3, 256, 256],
        descriptor_dim,
    }
}

fn tiny_shufflenet(descriptor_dim: usize) -> ModelGraph {
    let mut b = GraphBuilder::new();
    b.conv_bn_act(3, 8, 3, 2, 1, ActKind::Relu);
    b.conv_bn_act(8, 16, 3, 2, 1, ActKind::Relu);
    // shuffle unit 1: grouped pointwise, shuffle, depthwise stride 2, pointwise
    b.conv_bn_act(16, 16, 1, 1, 2, ActKind::Relu);
    b.push(LayerSpec::ChannelShuffle { groups: 2 });
    b.conv_bn(16, 16, 3, 2, 16);
    b.conv_bn_act(16, 24, 1, 1, 2, ActKind::Relu);
    // shuffle unit 2
    b.conv_bn_act(24, 24, 1, 1, 3, ActKind::Relu);
    b.push(LayerSpec::ChannelShuffle { groups: 3 });
    b.conv_bn(24, 24, 3, 2, 24);
    b.conv_bn_act(24, 32, 1, 1, 2, ActKind::Relu);
    // tail conv at 16x16
    b.conv_bn_act(32, 32, 1, 1, 1, ActKind::Relu);
    b.push(LayerSpec::GlobalAvgPool);
    b.push(LayerSpec::Linear {
        in_dim: 32,
        out_dim: descriptor_dim,
        bias: true,
    });
    ModelGraph {
        nodes: b.nodes,
        input_shape: [3, 256, 256],
        descriptor_dim,
    }
}

pub const PRESET_NAMES: &[&str] = &["tiny_resnet", "tiny_mobilenet", "tiny_shufflenet"];

pub fn build_preset(name: &str, descriptor_dim: usize) -> Result<ModelGraph, BackboneError> {
    if descriptor_dim == 0 {
        return Err(BackboneError::InvalidGraph("descriptor_dim must be > 0".into()));
    }
    let graph = match name {
        "tiny_resnet" => tiny_resnet(descriptor_dim),
        "tiny_mobilenet" => tiny_mobilenet(descriptor_dim),
        "tiny_shufflenet" => tiny_shufflenet(descriptor_dim),
        other => return Err(BackboneError::UnknownPreset(other.to_string())),
    };
    debug_assert!(graph.validate().is_ok());
    Ok(graph)
}
