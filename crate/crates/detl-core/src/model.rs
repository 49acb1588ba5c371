//! Block-structured CNN models.
//!
//! A model is an ordered list of layers, each tagged with a block id and a
//! trainable flag, plus a parameter store keyed by layer index. Block ids are
//! non-decreasing along the layer list; the classifier head carries the
//! maximal id. That structure is what makes "freeze everything up to the
//! last convolutional block" a well-defined operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    /// 2x2 max pool, stride 2.
    MaxPool,
    Relu,
    GlobalAvgPool,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    /// Adds the output of layer `from` (an identity shortcut) to the
    /// previous layer's output.
    ResidualAdd {
        from: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub block_id: usize,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, block_id: usize) -> Self {
        LayerSpec {
            kind,
            block_id,
            trainable: true,
        }
    }
}

/// Parameters of a single layer.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv { kernels: Tensor, bias: Tensor },
    Dense { weight: Tensor, bias: Tensor },
}

/// Identifies one parameter tensor: a layer index plus a slot within the
/// layer (0 = kernels/weight, 1 = bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub slot: u8,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let slot = if self.slot == 0 { "weights" } else { "bias" };
        write!(f, "layer{}.{}", self.layer, slot)
    }
}

/// The three desk-scale architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    MiniAlex,
    MiniVgg,
    MiniRes,
}

impl PresetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::MiniAlex => "mini-alex",
            PresetName::MiniVgg => "mini-vgg",
            PresetName::MiniRes => "mini-res",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini-alex" => Ok(PresetName::MiniAlex),
            "mini-vgg" => Ok(PresetName::MiniVgg),
            "mini-res" => Ok(PresetName::MiniRes),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Preset identity carried by models built from [`build_preset`]; needed to
/// reconstruct the architecture when loading a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetMeta {
    pub name: PresetName,
    pub width_base: usize,
}

/// An ordered layer graph with parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    input_shape: (usize, usize, usize),
    class_count: usize,
    preset: Option<PresetMeta>,
    /// Activation shapes without the batch extent; entry 0 is the input.
    act_shapes: Vec<Vec<usize>>,
}

/// A taped forward pass: the tape itself plus handles to the logits, the
/// last convolution output (Grad-CAM's feature maps), and parameter leaves.
pub struct ForwardRun {
    pub tape: Tape,
    pub logits: NodeId,
    pub last_conv: Option<NodeId>,
    param_nodes: Vec<Option<(NodeId, NodeId)>>,
}

impl ModelGraph {
    /// Validate a layer list plus parameter store into a model.
    pub fn new(
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        input_shape: (usize, usize, usize),
        class_count: usize,
    ) -> Result<Self> {
        if layers.len() != params.len() {
            return Err(Error::Config(format!(
                "layer list ({}) and parameter store ({}) lengths differ",
                layers.len(),
                params.len()
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].block_id < pair[0].block_id {
                return Err(Error::Config(format!(
                    "block ids must be non-decreasing, got {} after {}",
                    pair[1].block_id, pair[0].block_id
                )));
            }
        }
        match layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense { out_dim, .. }) if *out_dim == class_count => {}
            _ => {
                return Err(Error::Config(format!(
                    "model must end with a dense layer of {class_count} outputs"
                )))
            }
        }
        let act_shapes = propagate_shapes(&layers, &params, input_shape)?;
        Ok(ModelGraph {
            layers,
            params,
            input_shape,
            class_count,
            preset: None,
            act_shapes,
        })
    }

    fn with_preset(mut self, meta: PresetMeta) -> Self {
        self.preset = Some(meta);
        self
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn preset(&self) -> Option<PresetMeta> {
        self.preset
    }

    /// Parameters in layer order.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(ParamKey, &'a Tensor, bool)) {
        for (i, (spec, params)) in self.layers.iter().zip(&self.params).enumerate() {
            if let Some(p) = params {
                let (a, b) = p.tensors();
                f(ParamKey { layer: i, slot: 0 }, a, spec.trainable);
                f(ParamKey { layer: i, slot: 1 }, b, spec.trainable);
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKey, &mut Tensor, bool)) {
        for (i, (spec, params)) in self.layers.iter().zip(&mut self.params).enumerate() {
            if let Some(p) = params {
                let (a, b) = p.tensors_mut();
                f(ParamKey { layer: i, slot: 0 }, a, spec.trainable);
                f(ParamKey { layer: i, slot: 1 }, b, spec.trainable);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t, _| n += t.numel());
        n
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t, trainable| {
            if trainable {
                n += t.numel()
            }
        });
        n
    }

    /// Overwrite one parameter tensor's values (shape must match).
    pub fn set_param_data(&mut self, key: ParamKey, data: Vec<f32>) -> Result<()> {
        let tensor = self.param_tensor_mut(key)?;
        if tensor.numel() != data.len() {
            return Err(Error::shape(
                format!("set_param_data {key}"),
                format!("{} elements", tensor.numel()),
                format!("{} elements", data.len()),
            ));
        }
        tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn param_tensor(&self, key: ParamKey) -> Result<&Tensor> {
        let p = self
            .params
            .get(key.layer)
            .and_then(|p| p.as_ref())
            .ok_or_else(|| Error::Config(format!("no parameters at layer {}", key.layer)))?;
        let (a, b) = p.tensors();
        match key.slot {
            0 => Ok(a),
            1 => Ok(b),
            s => Err(Error::Config(format!("invalid parameter slot {s}"))),
        }
    }

    pub fn param_tensor_mut(&mut self, key: ParamKey) -> Result<&mut Tensor> {
        let p = self
            .params
            .get_mut(key.layer)
            .and_then(|p| p.as_mut())
            .ok_or_else(|| Error::Config(format!("no parameters at layer {}", key.layer)))?;
        let (a, b) = p.tensors_mut();
        match key.slot {
            0 => Ok(a),
            1 => Ok(b),
            s => Err(Error::Config(format!("invalid parameter slot {s}"))),
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, t, _| t.clear_grad());
    }

    /// Highest block id that contains a convolution layer.
    pub fn last_conv_block_id(&self) -> Option<usize> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
            .map(|l| l.block_id)
            .max()
    }

    pub fn max_block_id(&self) -> usize {
        self.layers.iter().map(|l| l.block_id).max().unwrap_or(0)
    }

    /// Index of the last convolution layer, if any.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
    }

    /// Mark layers with `block_id < first_trainable_block` frozen and the
    /// rest trainable.
    pub fn set_trainable_from_block(&mut self, first_trainable_block: usize) -> Result<()> {
        let max = self.max_block_id();
        if first_trainable_block > max + 1 {
            return Err(Error::UnknownBlock {
                id: first_trainable_block,
                max,
            });
        }
        for layer in &mut self.layers {
            layer.trainable = layer.block_id >= first_trainable_block;
        }
        Ok(())
    }

    /// Replace the final dense layer with a freshly initialized one sized to
    /// `new_classes`. All other parameters are copied unchanged.
    pub fn replace_head(&self, new_classes: usize, seed: u64) -> Result<ModelGraph> {
        if new_classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        let head = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .ok_or_else(|| Error::Config("model has no dense head to replace".into()))?;
        let in_dim = match self.layers[head].kind {
            LayerKind::Dense { in_dim, .. } => in_dim,
            _ => unreachable!(),
        };
        let mut layers = self.layers.clone();
        let mut params = self.params.clone();
        layers[head].kind = LayerKind::Dense {
            in_dim,
            out_dim: new_classes,
        };
        let mut rng = rng_from(seed, &[stream::HEAD]);
        params[head] = Some(glorot_dense(in_dim, new_classes, &mut rng));
        let mut model = ModelGraph::new(layers, params, self.input_shape, new_classes)?;
        model.preset = self.preset;
        Ok(model)
    }

    /// Run a taped forward pass over a batch shaped `[B, C, H, W]`.
    /// The last convolution output is retained for Grad-CAM.
    pub fn run_forward(&self, batch: &Tensor) -> Result<ForwardRun> {
        let (_, c, h, w) = batch.dims4()?;
        if (c, h, w) != self.input_shape {
            return Err(Error::shape(
                "model input",
                format!("{:?}", self.input_shape),
                format!("({c}, {h}, {w})"),
            ));
        }
        let last_conv_layer = self.last_conv_layer();
        let mut tape = Tape::new();
        let mut acts: Vec<NodeId> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(tape.leaf(batch, false));
        let mut param_nodes: Vec<Option<(NodeId, NodeId)>> = Vec::with_capacity(self.layers.len());
        let mut last_conv = None;

        for (i, (spec, params)) in self.layers.iter().zip(&self.params).enumerate() {
            let prev = *acts.last().expect("input activation present");
            let out = match (&spec.kind, params) {
                (
                    LayerKind::Conv3x3 {
                        stride, padding, ..
                    },
                    Some(LayerParams::Conv { kernels, bias }),
                ) => {
                    let k = tape.leaf(kernels, spec.trainable);
                    let b = tape.leaf(bias, spec.trainable);
                    param_nodes.push(Some((k, b)));
                    let out = tape.conv2d(prev, k, b, *stride, *padding)?;
                    if Some(i) == last_conv_layer {
                        tape.retain_grad(out);
                        last_conv = Some(out);
                    }
                    out
                }
                (LayerKind::Dense { .. }, Some(LayerParams::Dense { weight, bias })) => {
                    let wn = tape.leaf(weight, spec.trainable);
                    let b = tape.leaf(bias, spec.trainable);
                    param_nodes.push(Some((wn, b)));
                    tape.dense(prev, wn, b)?
                }
                (LayerKind::MaxPool, None) => {
                    param_nodes.push(None);
                    tape.maxpool2x2(prev)?
                }
                (LayerKind::Relu, None) => {
                    param_nodes.push(None);
                    tape.relu(prev)
                }
                (LayerKind::GlobalAvgPool, None) => {
                    param_nodes.push(None);
                    tape.global_avg_pool(prev)?
                }
                (LayerKind::Flatten, None) => {
                    param_nodes.push(None);
                    tape.flatten(prev)?
                }
                (LayerKind::ResidualAdd { from }, None) => {
                    param_nodes.push(None);
                    tape.add(prev, acts[from + 1])?
                }
                (kind, _) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({kind:?}) has a mismatched parameter entry"
                    )))
                }
            };
            acts.push(out);
        }

        Ok(ForwardRun {
            tape,
            logits: *acts.last().expect("at least one layer"),
            last_conv,
            param_nodes,
        })
    }

    /// Forward pass returning only the logits.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let run = self.run_forward(batch)?;
        Tensor::from_vec(
            run.tape.shape(run.logits),
            run.tape.value(run.logits).to_vec(),
        )
    }

    pub(crate) fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub(crate) fn act_shapes(&self) -> &[Vec<usize>] {
        &self.act_shapes
    }
}

impl ForwardRun {
    /// Copy gradients from the tape back onto the model's trainable
    /// parameter tensors.
    pub fn harvest_grads(&self, model: &mut ModelGraph) {
        let param_nodes = &self.param_nodes;
        let tape = &self.tape;
        model.visit_params_mut(|key, tensor, trainable| {
            if !trainable {
                return;
            }
            let Some((weights_node, bias_node)) = param_nodes[key.layer] else {
                return;
            };
            let node = if key.slot == 0 { weights_node } else { bias_node };
            if let Some(grad) = tape.grad(node) {
                tensor.set_grad(grad.to_vec());
            }
        });
    }
}

impl LayerParams {
    fn tensors(&self) -> (&Tensor, &Tensor) {
        match self {
            LayerParams::Conv { kernels, bias } => (kernels, bias),
            LayerParams::Dense { weight, bias } => (weight, bias),
        }
    }

    fn tensors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            LayerParams::Conv { kernels, bias } => (kernels, bias),
            LayerParams::Dense { weight, bias } => (weight, bias),
        }
    }
}

/// Symmetric uniform init with limit sqrt(6 / (fan_in + fan_out)).
fn glorot_uniform(rng: &mut ChaCha8Rng, numel: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..numel).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Fresh 3x3 convolution parameters.
pub fn glorot_conv(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    let fan_in = in_channels * 9;
    let fan_out = out_channels * 9;
    let numel = out_channels * in_channels * 9;
    let kernels = Tensor::from_vec(
        &[out_channels, in_channels, 3, 3],
        glorot_uniform(rng, numel, fan_in, fan_out),
    )
    .expect("finite init");
    let bias = Tensor::zeros(&[out_channels]);
    LayerParams::Conv { kernels, bias }
}

/// Fresh dense parameters.
pub fn glorot_dense(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    let weight = Tensor::from_vec(
        &[out_dim, in_dim],
        glorot_uniform(rng, out_dim * in_dim, in_dim, out_dim),
    )
    .expect("finite init");
    let bias = Tensor::zeros(&[out_dim]);
    LayerParams::Dense { weight, bias }
}

fn propagate_shapes(
    layers: &[LayerSpec],
    params: &[Option<LayerParams>],
    input_shape: (usize, usize, usize),
) -> Result<Vec<Vec<usize>>> {
    let (c, h, w) = input_shape;
    let mut shapes: Vec<Vec<usize>> = vec![vec![c, h, w]];
    for (i, (spec, p)) in layers.iter().zip(params).enumerate() {
        let prev = shapes.last().unwrap().clone();
        let ctx = format!("layer {i} ({:?})", spec.kind);
        let next = match &spec.kind {
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                let [pc, ph, pw] = three(&prev, &ctx)?;
                if pc != *in_channels {
                    return Err(Error::shape(&ctx, format!("{in_channels} channels"), format!("{pc} channels")));
                }
                match p {
                    Some(LayerParams::Conv { kernels, bias }) => {
                        if kernels.shape() != [*out_channels, *in_channels, 3, 3] {
                            return Err(Error::shape(
                                &ctx,
                                format!("kernels [{out_channels}, {in_channels}, 3, 3]"),
                                format!("{:?}", kernels.shape()),
                            ));
                        }
                        if bias.shape() != [*out_channels] {
                            return Err(Error::shape(
                                &ctx,
                                format!("bias [{out_channels}]"),
                                format!("{:?}", bias.shape()),
                            ));
                        }
                    }
                    _ => return Err(Error::Config(format!("{ctx} requires conv parameters"))),
                }
                let oh = crate::ops::conv2d_out_extent(ph, *stride, *padding).ok_or_else(|| {
                    Error::Config(format!("{ctx}: output height is not a positive integer"))
                })?;
                let ow = crate::ops::conv2d_out_extent(pw, *stride, *padding).ok_or_else(|| {
                    Error::Config(format!("{ctx}: output width is not a positive integer"))
                })?;
                vec![*out_channels, oh, ow]
            }
            LayerKind::MaxPool => {
                let [pc, ph, pw] = three(&prev, &ctx)?;
                if ph % 2 != 0 || pw % 2 != 0 {
                    return Err(Error::Config(format!(
                        "{ctx}: max pool requires even extents, got {ph}x{pw}"
                    )));
                }
                require_no_params(p, &ctx)?;
                vec![pc, ph / 2, pw / 2]
            }
            LayerKind::Relu => {
                require_no_params(p, &ctx)?;
                prev
            }
            LayerKind::GlobalAvgPool => {
                let [pc, _, _] = three(&prev, &ctx)?;
                require_no_params(p, &ctx)?;
                vec![pc]
            }
            LayerKind::Flatten => {
                let [pc, ph, pw] = three(&prev, &ctx)?;
                require_no_params(p, &ctx)?;
                vec![pc * ph * pw]
            }
            LayerKind::Dense { in_dim, out_dim } => {
                if prev.len() != 1 || prev[0] != *in_dim {
                    return Err(Error::shape(&ctx, format!("[{in_dim}]"), format!("{prev:?}")));
                }
                match p {
                    Some(LayerParams::Dense { weight, bias }) => {
                        if weight.shape() != [*out_dim, *in_dim] {
                            return Err(Error::shape(
                                &ctx,
                                format!("weight [{out_dim}, {in_dim}]"),
                                format!("{:?}", weight.shape()),
                            ));
                        }
                        if bias.shape() != [*out_dim] {
                            return Err(Error::shape(
                                &ctx,
                                format!("bias [{out_dim}]"),
                                format!("{:?}", bias.shape()),
                            ));
                        }
                    }
                    _ => return Err(Error::Config(format!("{ctx} requires dense parameters"))),
                }
                vec![*out_dim]
            }
            LayerKind::ResidualAdd { from } => {
                if *from >= i {
                    return Err(Error::Config(format!(
                        "{ctx}: shortcut source {from} must precede the layer"
                    )));
                }
                require_no_params(p, &ctx)?;
                if shapes[*from + 1] != prev {
                    return Err(Error::shape(
                        &ctx,
                        format!("{prev:?}"),
                        format!("{:?}", shapes[*from + 1]),
                    ));
                }
                prev
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

fn three(shape: &[usize], ctx: &str) -> Result<[usize; 3]> {
    match *shape {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(ctx, "[C, H, W] activation", format!("{shape:?}"))),
    }
}

fn require_no_params(p: &Option<LayerParams>, ctx: &str) -> Result<()> {
    if p.is_some() {
        return Err(Error::Config(format!("{ctx} takes no parameters")));
    }
    Ok(())
}

/// Build one of the named presets.
///
/// * `mini-alex`: 5 convolutions and 3 dense layers.
/// * `mini-vgg`: 4 blocks of conv/conv/pool plus 2 dense layers.
/// * `mini-res`: stem conv, 4 two-conv residual blocks with identity
///   shortcuts, global average pooling, and a single dense layer.
///
/// All convolutions are 3x3. `width_base` scales every channel width.
/// Input spatial extent must be a square power of two, at least 32.
pub fn build_preset(
    name: PresetName,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    width_base: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let (c_in, h, w) = input_shape;
    if h != w || h < 32 || !h.is_power_of_two() {
        return Err(Error::Config(format!(
            "preset input must be square with a power-of-two extent >= 32, got {h}x{w}"
        )));
    }
    if num_classes < 2 {
        return Err(Error::Config("presets need at least 2 classes".into()));
    }
    if width_base == 0 {
        return Err(Error::Config("width_base must be positive".into()));
    }
    let mut rng = rng_from(seed, &[stream::INIT]);
    let b = width_base;
    let mut layers = Vec::new();
    let mut params: Vec<Option<LayerParams>> = Vec::new();

    let conv = |layers: &mut Vec<LayerSpec>,
                    params: &mut Vec<Option<LayerParams>>,
                    rng: &mut ChaCha8Rng,
                    cin: usize,
                    cout: usize,
                    block: usize| {
        layers.push(LayerSpec::new(
            LayerKind::Conv3x3 {
                in_channels: cin,
                out_channels: cout,
                stride: 1,
                padding: 1,
            },
            block,
        ));
        params.push(Some(glorot_conv(cin, cout, rng)));
    };
    let plain = |layers: &mut Vec<LayerSpec>,
                 params: &mut Vec<Option<LayerParams>>,
                 kind: LayerKind,
                 block: usize| {
        layers.push(LayerSpec::new(kind, block));
        params.push(None);
    };
    let dense = |layers: &mut Vec<LayerSpec>,
                 params: &mut Vec<Option<LayerParams>>,
                 rng: &mut ChaCha8Rng,
                 n: usize,
                 m: usize,
                 block: usize| {
        layers.push(LayerSpec::new(
            LayerKind::Dense {
                in_dim: n,
                out_dim: m,
            },
            block,
        ));
        params.push(Some(glorot_dense(n, m, rng)));
    };

    match name {
        PresetName::MiniAlex => {
            conv(&mut layers, &mut params, &mut rng, c_in, b, 0);
            plain(&mut layers, &mut params, LayerKind::Relu, 0);
            plain(&mut layers, &mut params, LayerKind::MaxPool, 0);
            conv(&mut layers, &mut params, &mut rng, b, 2 * b, 1);
            plain(&mut layers, &mut params, LayerKind::Relu, 1);
            plain(&mut layers, &mut params, LayerKind::MaxPool, 1);
            conv(&mut layers, &mut params, &mut rng, 2 * b, 4 * b, 2);
            plain(&mut layers, &mut params, LayerKind::Relu, 2);
            conv(&mut layers, &mut params, &mut rng, 4 * b, 4 * b, 3);
            plain(&mut layers, &mut params, LayerKind::Relu, 3);
            conv(&mut layers, &mut params, &mut rng, 4 * b, 4 * b, 4);
            plain(&mut layers, &mut params, LayerKind::Relu, 4);
            plain(&mut layers, &mut params, LayerKind::MaxPool, 4);
            plain(&mut layers, &mut params, LayerKind::Flatten, 5);
            let spatial = h / 8;
            let flat = 4 * b * spatial * spatial;
            dense(&mut layers, &mut params, &mut rng, flat, 16 * b, 5);
            plain(&mut layers, &mut params, LayerKind::Relu, 5);
            dense(&mut layers, &mut params, &mut rng, 16 * b, 8 * b, 5);
            plain(&mut layers, &mut params, LayerKind::Relu, 5);
            dense(&mut layers, &mut params, &mut rng, 8 * b, num_classes, 5);
        }
        PresetName::MiniVgg => {
            let mut cin = c_in;
            for block in 0..4 {
                let cout = b << block;
                conv(&mut layers, &mut params, &mut rng, cin, cout, block);
                plain(&mut layers, &mut params, LayerKind::Relu, block);
                conv(&mut layers, &mut params, &mut rng, cout, cout, block);
                plain(&mut layers, &mut params, LayerKind::Relu, block);
                plain(&mut layers, &mut params, LayerKind::MaxPool, block);
                cin = cout;
            }
            plain(&mut layers, &mut params, LayerKind::Flatten, 4);
            let spatial = h / 16;
            let flat = cin * spatial * spatial;
            dense(&mut layers, &mut params, &mut rng, flat, 16 * b, 4);
            plain(&mut layers, &mut params, LayerKind::Relu, 4);
            dense(&mut layers, &mut params, &mut rng, 16 * b, num_classes, 4);
        }
        PresetName::MiniRes => {
            let width = 4 * b;
            conv(&mut layers, &mut params, &mut rng, c_in, width, 0);
            plain(&mut layers, &mut params, LayerKind::Relu, 0);
            plain(&mut layers, &mut params, LayerKind::MaxPool, 0);
            for block in 1..=4 {
                let entry = layers.len() - 1;
                conv(&mut layers, &mut params, &mut rng, width, width, block);
                plain(&mut layers, &mut params, LayerKind::Relu, block);
                conv(&mut layers, &mut params, &mut rng, width, width, block);
                plain(
                    &mut layers,
                    &mut params,
                    LayerKind::ResidualAdd { from: entry },
                    block,
                );
                plain(&mut layers, &mut params, LayerKind::Relu, block);
                plain(&mut layers, &mut params, LayerKind::MaxPool, block);
            }
            plain(&mut layers, &mut params, LayerKind::GlobalAvgPool, 5);
            dense(&mut layers, &mut params, &mut rng, width, num_classes, 5);
        }
    }

    ModelGraph::new(layers, params, input_shape, num_classes).map(|m| {
        m.with_preset(PresetMeta {
            name,
            width_base: b,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_learnable(model: &ModelGraph) -> usize {
        model
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. }))
            .count()
    }

    #[test]
    fn mini_alex_has_eight_learnable_layers() {
        let m = build_preset(PresetName::MiniAlex, (1, 64, 64), 2, 4, 7).unwrap();
        assert_eq!(count_learnable(&m), 8);
        match m.layers().last().unwrap().kind {
            LayerKind::Dense { out_dim, .. } => assert_eq!(out_dim, 2),
            _ => panic!("head must be dense"),
        }
    }

    #[test]
    fn mini_vgg_has_ten_learnable_layers() {
        let m = build_preset(PresetName::MiniVgg, (1, 64, 64), 4, 4, 7).unwrap();
        assert_eq!(count_learnable(&m), 10);
    }

    #[test]
    fn mini_res_has_one_gap_and_one_dense() {
        let m = build_preset(PresetName::MiniRes, (1, 64, 64), 2, 4, 7).unwrap();
        let gaps = m
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::GlobalAvgPool))
            .count();
        let denses = m
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .count();
        assert_eq!((gaps, denses), (1, 1));
    }

    #[test]
    fn presets_build_for_all_required_sizes_and_classes() {
        for name in [PresetName::MiniAlex, PresetName::MiniVgg, PresetName::MiniRes] {
            for size in [32, 64, 128] {
                for classes in [2, 4] {
                    let m = build_preset(name, (1, size, size), classes, 4, 1)
                        .unwrap_or_else(|e| panic!("{name} at {size}/{classes}: {e}"));
                    assert_eq!(m.class_count(), classes);
                }
            }
        }
    }

    #[test]
    fn preset_rejects_bad_input_extent() {
        assert!(build_preset(PresetName::MiniVgg, (1, 48, 48), 2, 4, 1).is_err());
        assert!(build_preset(PresetName::MiniVgg, (1, 16, 16), 2, 4, 1).is_err());
    }

    #[test]
    fn every_conv_kernel_is_3x3() {
        for name in [PresetName::MiniAlex, PresetName::MiniVgg, PresetName::MiniRes] {
            let m = build_preset(name, (1, 64, 64), 4, 4, 7).unwrap();
            m.visit_params(|key, t, _| {
                if key.slot == 0 && t.shape().len() == 4 {
                    assert_eq!(&t.shape()[2..], &[3, 3]);
                }
            });
        }
    }

    #[test]
    fn replace_head_keeps_trunk_bitwise() {
        let m = build_preset(PresetName::MiniVgg, (1, 32, 32), 2, 2, 7).unwrap();
        let replaced = m.replace_head(4, 99).unwrap();
        assert_eq!(replaced.class_count(), 4);
        let head = m
            .layers()
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .unwrap();
        m.visit_params(|key, t, _| {
            if key.layer != head {
                let other = replaced.param_tensor(key).unwrap();
                assert_eq!(t.data(), other.data(), "trunk {key} must be unchanged");
            }
        });
    }

    #[test]
    fn replace_head_param_count_delta_matches_fan_in() {
        let m = build_preset(PresetName::MiniVgg, (1, 32, 32), 2, 2, 7).unwrap();
        let replaced = m.replace_head(4, 99).unwrap();
        let head = m
            .layers()
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .unwrap();
        let fan_in = match m.layers()[head].kind {
            LayerKind::Dense { in_dim, .. } => in_dim,
            _ => unreachable!(),
        };
        let delta = replaced.param_count() as i64 - m.param_count() as i64;
        assert_eq!(delta, (4 - 2) * (fan_in as i64 + 1));
    }

    #[test]
    fn freeze_threshold_partitions_layers() {
        let mut m = build_preset(PresetName::MiniVgg, (1, 32, 32), 2, 2, 7).unwrap();
        let last_conv = m.last_conv_block_id().unwrap();
        m.set_trainable_from_block(last_conv).unwrap();
        for layer in m.layers() {
            assert_eq!(layer.trainable, layer.block_id >= last_conv);
        }

        m.set_trainable_from_block(0).unwrap();
        assert!(m.layers().iter().all(|l| l.trainable));

        let max = m.max_block_id();
        m.set_trainable_from_block(max + 1).unwrap();
        assert!(m.layers().iter().all(|l| !l.trainable));
        assert!(m.set_trainable_from_block(max + 2).is_err());
    }

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let mut m = build_preset(PresetName::MiniAlex, (1, 32, 32), 2, 2, 7).unwrap();
        m.visit_params_mut(|_, t, _| t.data_mut().fill(0.0));
        let batch = Tensor::from_vec(&[1, 1, 32, 32], vec![0.5; 1024]).unwrap();
        let logits = m.forward_logits(&batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_forward_matches_single_sample() {
        let m = build_preset(PresetName::MiniRes, (1, 32, 32), 4, 2, 3).unwrap();
        let mut rng = rng_from(11, &[1]);
        let data: Vec<f32> = (0..2 * 1024).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::from_vec(&[2, 1, 32, 32], data.clone()).unwrap();
        let batched = m.forward_logits(&batch).unwrap();
        for s in 0..2 {
            let single =
                Tensor::from_vec(&[1, 1, 32, 32], data[s * 1024..(s + 1) * 1024].to_vec())
                    .unwrap();
            let logits = m.forward_logits(&single).unwrap();
            assert_eq!(
                logits.data(),
                &batched.data()[s * 4..(s + 1) * 4],
                "row {s} must match"
            );
        }
    }
}
