//! Declarative model descriptions and the layer stack built from them.
//!
//! A model is a list of layer specs. Each `conv` starts a block that extends
//! over the `bn`/`relu` layers directly after it; the block's output `h_i`
//! is the feature map that group pooling and the equivariance loss read.
//! Blocks are numbered from 0 in order of appearance.

mod spec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormLayer, ConvLayer, GroupLayout, LinearLayer, Mode};
use crate::tensor::{conv_output_extent, BatchStats, Scalar, Tape, Tensor, Var};
use crate::util::{derive_seed, fnv1a64};

pub use spec::{ConvSpec, LayerSpec};

fn default_layout() -> String {
    "R4".into()
}

fn default_groups() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    /// Layout for convs that do not name one; `none` leaves them without
    /// feature groups.
    #[serde(default = "default_layout")]
    pub layout: String,
    /// Feature groups per conv for convs that do not set `groups`.
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Six conv-bn-relu blocks with two max pools, global average pooling
    /// and a linear head. `groups` feature groups of the given layout per
    /// conv.
    pub fn six_conv(layout: &str, groups: usize) -> Self {
        let conv = || LayerSpec::Conv(ConvSpec::same(3));
        let mut layers = Vec::new();
        for block in 0..6 {
            layers.extend([conv(), LayerSpec::BatchNorm, LayerSpec::Relu]);
            if block == 0 || block == 2 {
                layers.push(LayerSpec::MaxPool { k: 2, stride: 2 });
            }
        }
        layers.extend([LayerSpec::GlobalAvgPool, LayerSpec::Linear { out: None }]);
        ModelConfig {
            input: [1, 28, 28],
            classes: 10,
            layout: layout.into(),
            groups,
            layers,
        }
    }

    /// The Rot-MNIST desk-scale model: six convs of 8 `R4` groups (32
    /// channels).
    pub fn mini_rot_mnist() -> Self {
        Self::six_conv("R4", 8)
    }

    /// VGG-style stack: `stages[i]` convs then a max pool per stage.
    pub fn vgg(input: [usize; 3], classes: usize, layout: &str, groups: usize, stages: &[usize]) -> Self {
        let mut layers = Vec::new();
        for &convs in stages {
            for _ in 0..convs {
                layers.extend([LayerSpec::Conv(ConvSpec::same(3)), LayerSpec::BatchNorm, LayerSpec::Relu]);
            }
            layers.push(LayerSpec::MaxPool { k: 2, stride: 2 });
        }
        layers.extend([LayerSpec::GlobalAvgPool, LayerSpec::Linear { out: None }]);
        ModelConfig {
            input,
            classes,
            layout: layout.into(),
            groups,
            layers,
        }
    }

    /// Canonical TOML form of this config.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// 64-bit FNV-1a of [`ModelConfig::canonical`].
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    /// Layout of every conv block, `None` where the conv has no groups.
    pub fn block_layouts(&self) -> Result<Vec<Option<GroupLayout>>> {
        let mut out = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv(c) = layer {
                out.push(self.resolve_conv(index, c)?.1);
            }
        }
        Ok(out)
    }

    /// Channel count and layout for the conv at `index`.
    fn resolve_conv(&self, index: usize, c: &ConvSpec) -> Result<(usize, Option<GroupLayout>)> {
        let text = c.layout.as_deref().unwrap_or(&self.layout);
        let groups = c.groups.unwrap_or(self.groups);
        if text == "none" {
            let channels = c.channels.ok_or_else(|| Error::ModelShape {
                index,
                reason: "conv without a layout needs `channels`".into(),
            })?;
            return Ok((channels, None));
        }
        let layout = GroupLayout::parse(text, groups).map_err(|e| Error::ModelShape {
            index,
            reason: e.to_string(),
        })?;
        if let Some(ch) = c.channels {
            if ch != layout.total_channels() {
                return Err(Error::ModelShape {
                    index,
                    reason: format!(
                        "conv has {ch} channels but layout `{layout}` covers {}",
                        layout.total_channels()
                    ),
                });
            }
        }
        Ok((layout.total_channels(), Some(layout)))
    }
}

/// Pooled channel count (`Σ count`) of every conv block; raw channels for
/// convs without a layout.
pub fn pooled_channel_count(config: &ModelConfig) -> Result<Vec<usize>> {
    let mut counts = Vec::new();
    for (index, layer) in config.layers.iter().enumerate() {
        if let LayerSpec::Conv(c) = layer {
            let (channels, layout) = config.resolve_conv(index, c)?;
            counts.push(layout.map_or(channels, |l| l.pooled_channels()));
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv {
        conv: ConvLayer<T>,
        layout: Option<GroupLayout>,
    },
    BatchNorm(BatchNormLayer<T>),
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear(LinearLayer<T>),
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: usize,
    /// Index of the last layer belonging to the block.
    end: usize,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward<T> {
    pub logits: Var,
    /// Raw block outputs `h_i`, one per conv block.
    pub taps: Vec<Var>,
    /// Bound parameters in [`Model::params`] order.
    pub params: Vec<Var>,
    stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    blocks: Vec<Block>,
}

#[derive(Clone, Copy)]
enum Feat {
    Map(usize, usize, usize),
    Flat(usize),
}

/// Instantiates a model with seeded fan-in-scaled normal weights.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let [c0, h0, w0] = config.input;
    if c0 == 0 || h0 == 0 || w0 == 0 || config.classes == 0 {
        return Err(Error::ModelShape {
            index: 0,
            reason: format!("input {:?} with {} classes", config.input, config.classes),
        });
    }
    let mut feat = Feat::Map(c0, h0, w0);
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut blocks: Vec<Block> = Vec::new();
    let shape_err = |index: usize, reason: String| Error::ModelShape { index, reason };
    for (index, spec) in config.layers.iter().enumerate() {
        let layer_seed = derive_seed(seed, index as u64);
        let layer = match (spec, feat) {
            (LayerSpec::Conv(c), Feat::Map(ch, h, w)) => {
                let (out, layout) = config.resolve_conv(index, c)?;
                let (Some(oh), Some(ow)) = (
                    conv_output_extent(h, c.kernel, c.stride, c.pad),
                    conv_output_extent(w, c.kernel, c.stride, c.pad),
                ) else {
                    return Err(shape_err(index, format!("conv k={} on {h}x{w} has no output", c.kernel)));
                };
                feat = Feat::Map(out, oh, ow);
                blocks.push(Block { conv: index, end: index });
                Layer::Conv {
                    conv: ConvLayer::new(ch, out, c.kernel, c.stride, c.pad, layer_seed)?,
                    layout,
                }
            }
            (LayerSpec::BatchNorm, Feat::Map(ch, ..)) => Layer::BatchNorm(BatchNormLayer::new(ch)),
            (LayerSpec::Relu, _) => Layer::Relu,
            (LayerSpec::MaxPool { k, stride }, Feat::Map(ch, h, w)) => {
                let (Some(oh), Some(ow)) = (conv_output_extent(h, *k, *stride, 0), conv_output_extent(w, *k, *stride, 0))
                else {
                    return Err(shape_err(index, format!("maxpool {k}/{stride} on {h}x{w}")));
                };
                feat = Feat::Map(ch, oh, ow);
                Layer::MaxPool { k: *k, stride: *stride }
            }
            (LayerSpec::GlobalAvgPool, Feat::Map(ch, ..)) => {
                feat = Feat::Flat(ch);
                Layer::GlobalAvgPool
            }
            (LayerSpec::Linear { out }, Feat::Flat(inp)) => {
                let out = out.unwrap_or(config.classes);
                feat = Feat::Flat(out);
                Layer::Linear(LinearLayer::new(inp, out, layer_seed)?)
            }
            (LayerSpec::Block(_), _) => {
                return Err(shape_err(index, "residual blocks are reserved and not built".into()));
            }
            (spec, Feat::Flat(_)) => {
                return Err(shape_err(index, format!("`{spec}` needs a feature map, got flat features")));
            }
            (spec, Feat::Map(..)) => {
                return Err(shape_err(index, format!("`{spec}` needs flat features; add `gap` first")));
            }
        };
        if matches!(spec, LayerSpec::BatchNorm | LayerSpec::Relu) {
            if let Some(b) = blocks.last_mut() {
                if b.end + 1 == index {
                    b.end = index;
                }
            }
        }
        layers.push(layer);
    }
    match feat {
        Feat::Flat(n) if n == config.classes => {}
        _ => {
            return Err(shape_err(
                config.layers.len().saturating_sub(1),
                format!("network must end in {} flat logits", config.classes),
            ))
        }
    }
    Ok(Model {
        config: config.clone(),
        layers,
        blocks,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_layout(&self, block: usize) -> Option<&GroupLayout> {
        match self.layers.get(self.blocks.get(block)?.conv)? {
            Layer::Conv { layout, .. } => layout.as_ref(),
            _ => None,
        }
    }

    pub fn block_conv(&self, block: usize) -> Option<&ConvLayer<T>> {
        match self.layers.get(self.blocks.get(block)?.conv)? {
            Layer::Conv { conv, .. } => Some(conv),
            _ => None,
        }
    }

    pub fn block_conv_mut(&mut self, block: usize) -> Option<&mut ConvLayer<T>> {
        let index = self.blocks.get(block)?.conv;
        match self.layers.get_mut(index)? {
            Layer::Conv { conv, .. } => Some(conv),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self) -> Option<&mut LinearLayer<T>> {
        self.layers.iter_mut().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
    }

    /// Trainable tensors with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push((format!("{i}.conv.weight"), &conv.weight));
                    out.push((format!("{i}.conv.bias"), &conv.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{i}.bn.gamma"), &bn.gamma));
                    out.push((format!("{i}.bn.beta"), &bn.beta));
                }
                Layer::Linear(lin) => {
                    out.push((format!("{i}.linear.weight"), &lin.weight));
                    out.push((format!("{i}.linear.bias"), &lin.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { conv, .. } => out.extend([&mut conv.weight, &mut conv.bias]),
                Layer::BatchNorm(bn) => out.extend([&mut bn.gamma, &mut bn.beta]),
                Layer::Linear(lin) => out.extend([&mut lin.weight, &mut lin.bias]),
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics) with stable names.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                out.push((format!("{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.extend([&mut bn.running_mean, &mut bn.running_var]);
            }
        }
        out
    }

    /// Records a forward pass of `x: [N, C, H, W]`. Parameters are bound as
    /// gradient leaves when `trainable`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<Forward<T>> {
        let mut params = Vec::new();
        let mut bind = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = tape.leaf(t.clone(), trainable);
            params.push(v);
            v
        };
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        let mut h = x;
        let mut next_block = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv { conv, .. } => {
                    let w = bind(tape, &conv.weight);
                    let b = bind(tape, &conv.bias);
                    nn::conv2d(tape, h, conv, w, b)?
                }
                Layer::BatchNorm(bn) => {
                    let g = bind(tape, &bn.gamma);
                    let b = bind(tape, &bn.beta);
                    let (y, s) = nn::batchnorm2d(tape, h, bn, g, b, mode)?;
                    if let Some(s) = s {
                        stats.push((i, s));
                    }
                    y
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool { k, stride } => tape.max_pool2d(h, *k, *stride)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Linear(lin) => {
                    let w = bind(tape, &lin.weight);
                    let b = bind(tape, &lin.bias);
                    tape.linear(h, w, Some(b))?
                }
            };
            if next_block < self.blocks.len() && self.blocks[next_block].end == i {
                taps.push(h);
                next_block += 1;
            }
        }
        Ok(Forward {
            logits: h,
            taps,
            params,
            stats,
        })
    }

    /// Group-pooled map `ĥ_i` of block `block` from a recorded forward pass.
    pub fn pooled(&self, tape: &mut Tape<T>, fwd: &Forward<T>, block: usize) -> Result<Var> {
        let layout = self.block_layout(block).ok_or(Error::MissingLayout(block))?;
        let tap = *fwd.taps.get(block).ok_or(Error::MissingLayout(block))?;
        nn::group_pool(tape, tap, layout)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, fwd: &Forward<T>) {
        for (i, s) in &fwd.stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*i] {
                bn.update_running(s);
            }
        }
    }

    /// Eval-mode logits for a batch, outside any training tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, Mode::Eval, false)?;
        Ok(tape.value(fwd.logits).clone())
    }
}
