//! ResNet-style bottleneck classifiers with a pluggable spatial kernel.
//!
//! Every block is `1x1 reduce -> spatial kernel -> 1x1 expand` with batch
//! norm after each stage, a residual shortcut and a final ReLU. The spatial
//! kernel is a 3x3 convolution, fixed-extent attention or adaptive-span
//! attention; nothing else changes between primitives. Downsampling blocks
//! run their kernel at the input resolution and average-pool the expanded
//! output.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionLayerConfig, AttentionLayerParams, AttentionVariant};
use crate::error::{Error, Result};
use crate::mask::{kernel_extent, DEFAULT_INIT_SPAN, DEFAULT_RAMP};
use crate::tensor::ops::ChannelStats;
use crate::tensor::ops::BN_MOMENTUM;
use crate::tensor::{Float, Graph, Parameter, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Conv,
    Fixed,
    Adaptive,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Conv, Primitive::Fixed, Primitive::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv => "conv",
            Primitive::Fixed => "fixed",
            Primitive::Adaptive => "adaptive",
        }
    }

    pub fn is_attention(self) -> bool {
        self != Primitive::Conv
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown primitive {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    pub fn channels(self) -> Vec<usize> {
        match self {
            SizeClass::Small => vec![32, 64, 128],
            SizeClass::Medium => vec![32, 64, 128, 256],
            SizeClass::Large => vec![32, 64, 64, 64, 128, 128, 128, 128, 256],
        }
    }

    pub fn strides(self) -> Vec<usize> {
        match self {
            SizeClass::Small => vec![2, 2, 2],
            SizeClass::Medium => vec![1, 2, 2, 2],
            SizeClass::Large => vec![1, 2, 1, 1, 2, 1, 1, 1, 2],
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SizeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown size class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub primitive: Primitive,
    pub size: SizeClass,
    pub num_classes: usize,
    pub heads: usize,
    pub ramp: usize,
    pub fixed_extent: usize,
    pub conv_extent: usize,
    pub init_span: f64,
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Bottleneck widths, one block each.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Block output channels per unit of width.
    pub expansion: usize,
}

impl ModelConfig {
    pub fn new(primitive: Primitive, size: SizeClass) -> Self {
        Self {
            primitive,
            size,
            num_classes: 100,
            heads: 4,
            ramp: DEFAULT_RAMP,
            fixed_extent: 5,
            conv_extent: 3,
            init_span: DEFAULT_INIT_SPAN,
            input_size: 32,
            in_channels: 3,
            stem_channels: 32,
            channels: size.channels(),
            strides: size.strides(),
            expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidChannelPlan(m));
        if self.channels.is_empty() {
            return bad("no blocks".into());
        }
        if self.channels.len() != self.strides.len() {
            return bad(format!(
                "{} widths but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || self.stem_channels == 0 || self.in_channels == 0 {
            return bad("zero-width layer".into());
        }
        if self.expansion == 0 || self.num_classes == 0 {
            return bad("empty expansion or head".into());
        }
        if self.conv_extent % 2 == 0 || self.fixed_extent % 2 == 0 {
            return bad("kernel extents must be odd".into());
        }
        if self.ramp == 0 || self.heads == 0 {
            return bad("ramp and heads must be positive".into());
        }
        let mut s = self.input_size;
        for (i, (&c, &st)) in self.channels.iter().zip(&self.strides).enumerate() {
            if st != 1 && st != 2 {
                return bad(format!("block {i} has stride {st}"));
            }
            if s == 0 || s % st != 0 {
                return bad(format!("block {i} cannot stride {st} over a {s}x{s} map"));
            }
            if self.primitive.is_attention() && (c % self.heads != 0 || (c / self.heads) % 2 != 0) {
                return bad(format!(
                    "block {i} width {c} does not split into {} heads of even size",
                    self.heads
                ));
            }
            s /= st;
        }
        if !self.init_span.is_finite() {
            return bad("initial span must be finite".into());
        }
        Ok(())
    }

    /// Spatial side of the feature map entering each block.
    pub fn block_input_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.strides
            .iter()
            .map(|&st| {
                let here = s;
                s /= st;
                here
            })
            .collect()
    }
}

/// Batch norm affine terms with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running: ChannelStats<T>,
}

impl<T: Float> BatchNorm<T> {
    fn new(c: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::ones(&[c])).without_decay(),
            beta: Parameter::new(Tensor::zeros(&[c])).without_decay(),
            running: ChannelStats::identity(c),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
        let (y, stats) = g.batch_norm(x, gm, bt, &self.running, training)?;
        if let Some(stats) = stats {
            self.running.update(&stats, BN_MOMENTUM);
        }
        Ok(y)
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

fn kaiming<T: Float>(shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter<T> {
    let fan_in: usize = shape[1..].iter().product();
    Parameter::new(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng))
}

#[derive(Clone, Debug)]
pub enum SpatialKernel<T> {
    Conv {
        weight: Parameter<T>,
        extent: usize,
    },
    Attention {
        params: AttentionLayerParams<T>,
        config: AttentionLayerConfig,
    },
}

#[derive(Clone, Debug)]
pub struct BottleneckBlock<T> {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub input_size: usize,
    pub reduce: Parameter<T>,
    pub bn1: BatchNorm<T>,
    pub spatial: SpatialKernel<T>,
    pub bn2: BatchNorm<T>,
    pub expand: Parameter<T>,
    pub bn3: BatchNorm<T>,
    pub shortcut: Option<(Parameter<T>, BatchNorm<T>)>,
}

impl<T: Float> BottleneckBlock<T> {
    fn new(
        cfg: &ModelConfig,
        cin: usize,
        width: usize,
        stride: usize,
        input_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cout = width * cfg.expansion;
        let spatial = match cfg.primitive {
            Primitive::Conv => SpatialKernel::Conv {
                weight: kaiming(&[width, width, cfg.conv_extent, cfg.conv_extent], rng),
                extent: cfg.conv_extent,
            },
            p => {
                let config = AttentionLayerConfig {
                    in_channels: width,
                    out_channels: width,
                    heads: cfg.heads,
                    stride: 1,
                    variant: if p == Primitive::Adaptive {
                        AttentionVariant::Adaptive
                    } else {
                        AttentionVariant::Fixed
                    },
                    fixed_kernel_extent: cfg.fixed_extent,
                    ramp: cfg.ramp,
                    input_size,
                };
                SpatialKernel::Attention {
                    params: AttentionLayerParams::init(&config, cfg.init_span, rng)?,
                    config,
                }
            }
        };
        let shortcut = (stride != 1 || cin != cout).then(|| (kaiming(&[cout, cin, 1, 1], rng), BatchNorm::new(cout)));
        Ok(Self {
            in_channels: cin,
            width,
            out_channels: cout,
            stride,
            input_size,
            reduce: kaiming(&[width, cin, 1, 1], rng),
            bn1: BatchNorm::new(width),
            spatial,
            bn2: BatchNorm::new(width),
            expand: kaiming(&[cout, width, 1, 1], rng),
            bn3: BatchNorm::new(cout),
            shortcut,
        })
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let w = g.param(&self.reduce);
        let h = g.conv2d(x, w, 1, 0)?;
        let h = self.bn1.forward(g, h, training)?;
        let h = g.relu(h);
        let h = match &self.spatial {
            SpatialKernel::Conv { weight, extent } => {
                let w = g.param(weight);
                g.conv2d(h, w, 1, extent / 2)?
            }
            SpatialKernel::Attention { params, config } => attention_forward(g, h, params, config)?,
        };
        let h = self.bn2.forward(g, h, training)?;
        let h = g.relu(h);
        let w = g.param(&self.expand);
        let h = g.conv2d(h, w, 1, 0)?;
        let mut h = self.bn3.forward(g, h, training)?;
        if self.stride == 2 {
            h = g.avg_pool2(h)?;
        }
        let sc = match self.shortcut.as_mut() {
            Some((w, bn)) => {
                let w = g.param(w);
                let s = g.conv2d(x, w, self.stride, 0)?;
                bn.forward(g, s, training)?
            }
            None => x,
        };
        let y = g.add(h, sc)?;
        Ok(g.relu(y))
    }

    pub fn attention(&self) -> Option<(&AttentionLayerParams<T>, &AttentionLayerConfig)> {
        match &self.spatial {
            SpatialKernel::Attention { params, config } => Some((params, config)),
            SpatialKernel::Conv { .. } => None,
        }
    }

    /// Extent of the spatial kernel under the current parameters.
    pub fn spatial_extent(&self) -> Result<usize> {
        match &self.spatial {
            SpatialKernel::Conv { extent, .. } => Ok(*extent),
            SpatialKernel::Attention { params, config } => params.extent(config),
        }
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.stride
    }
}

/// Spans and derived window extent of one adaptive layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpans {
    pub block: usize,
    pub spans: Vec<f64>,
    pub max_size: usize,
    pub extent: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub stem: Parameter<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<BottleneckBlock<T>>,
    pub head_weight: Parameter<T>,
    pub head_bias: Parameter<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.conv_extent;
        let stem = kaiming(&[config.stem_channels, config.in_channels, k, k], &mut rng);
        let mut cin = config.stem_channels;
        let mut blocks = Vec::with_capacity(config.channels.len());
        for ((&w, &st), s) in config
            .channels
            .iter()
            .zip(&config.strides)
            .zip(config.block_input_sizes())
        {
            let b = BottleneckBlock::new(&config, cin, w, st, s, &mut rng)?;
            cin = b.out_channels;
            blocks.push(b);
        }
        let bound = 1.0 / (cin as f64).sqrt();
        let head_weight = Parameter::new(Tensor::uniform(&[config.num_classes, cin], -bound, bound, &mut rng));
        let head_bias = Parameter::new(Tensor::zeros(&[config.num_classes])).without_decay();
        Ok(Self {
            stem_bn: BatchNorm::new(config.stem_channels),
            config,
            stem,
            blocks,
            head_weight,
            head_bias,
        })
    }

    /// Class logits `[B, num_classes]` for images `[B, C, S, S]`. Training
    /// mode normalizes with batch statistics and updates the running ones.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != self.config.in_channels || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::ShapeMismatch(format!(
                "model expects [B, {}, {s}, {s}], got {:?}",
                self.config.in_channels,
                g.shape(x),
                s = self.config.input_size
            )));
        }
        let sw = g.param(&self.stem);
        let mut h = g.conv2d(x, sw, 1, self.config.conv_extent / 2)?;
        h = self.stem_bn.forward(g, h, training)?;
        h = g.relu(h);
        for b in &mut self.blocks {
            h = b.forward(g, h, training)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let hw = g.param(&self.head_weight);
        let hwt = g.transpose(hw)?;
        let logits = g.matmul(pooled, hwt)?;
        let hb = g.param(&self.head_bias);
        g.add(logits, hb)
    }

    /// Sum of all spans on the graph, for an L1 span penalty.
    pub fn span_sum(&self, g: &mut Graph<T>) -> Option<Var> {
        let mut total: Option<Var> = None;
        for (params, _) in self.blocks.iter().filter_map(|b| b.attention()) {
            if let Some(z) = &params.spans {
                let zv = g.param(z);
                let s = g.sum(zv);
                total = Some(match total {
                    Some(t) => g.add(t, s).expect("scalar add"),
                    None => s,
                });
            }
        }
        total
    }

    /// Clamps every span into `[0, input_size]` of its layer.
    pub fn project_spans(&mut self) {
        for b in &mut self.blocks {
            if let SpatialKernel::Attention { params, config } = &mut b.spatial {
                params.project_spans(config.input_size);
            }
        }
    }

    /// Overwrites the spans of every adaptive layer, one list per layer,
    /// then clamps them into range.
    pub fn set_spans(&mut self, spans: &[Vec<f64>]) -> Result<()> {
        let mut layers: Vec<&mut Parameter<T>> = self
            .blocks
            .iter_mut()
            .filter_map(|b| match &mut b.spatial {
                SpatialKernel::Attention { params, .. } => params.spans.as_mut(),
                SpatialKernel::Conv { .. } => None,
            })
            .collect();
        if layers.is_empty() {
            return Err(Error::NotAdaptiveModel);
        }
        if layers.len() != spans.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} span lists for {} adaptive layers",
                spans.len(),
                layers.len()
            )));
        }
        for (p, z) in layers.iter_mut().zip(spans) {
            if z.len() != p.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "{} spans for {} heads",
                    z.len(),
                    p.numel()
                )));
            }
            for (dst, &v) in p.value.data_mut().iter_mut().zip(z) {
                *dst = T::from_f64(v);
            }
        }
        self.project_spans();
        Ok(())
    }

    pub fn report_learned_spans(&self) -> Result<Vec<LayerSpans>> {
        if self.config.primitive != Primitive::Adaptive {
            return Err(Error::NotAdaptiveModel);
        }
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.attention().map(|a| (i, a)))
            .map(|(i, (params, config))| {
                let spans = params.span_values();
                let extent = kernel_extent(&spans, config.ramp, config.input_size)?;
                Ok(LayerSpans {
                    block: i,
                    spans,
                    max_size: extent / 2,
                    extent,
                })
            })
            .collect()
    }

    /// Current spans of every adaptive layer, empty for other primitives.
    pub fn span_snapshot(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .filter_map(|b| b.attention())
            .filter(|(p, _)| p.spans.is_some())
            .map(|(p, _)| p.span_values())
            .collect()
    }

    /// Trainable parameters under their canonical paths, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("stem.conv.weight".to_string(), &self.stem)];
        push_bn(&mut out, "stem.bn", &self.stem_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.reduce.weight"), &b.reduce));
            push_bn(&mut out, &format!("{p}.bn1"), &b.bn1);
            match &b.spatial {
                SpatialKernel::Conv { weight, .. } => out.push((format!("{p}.conv.weight"), weight)),
                SpatialKernel::Attention { params, .. } => {
                    out.push((format!("{p}.attn.q"), &params.q));
                    out.push((format!("{p}.attn.k"), &params.k));
                    out.push((format!("{p}.attn.v"), &params.v));
                    out.push((format!("{p}.attn.emb_h"), &params.emb_h));
                    out.push((format!("{p}.attn.emb_w"), &params.emb_w));
                    if let Some(z) = &params.spans {
                        out.push((format!("{p}.attn.span"), z));
                    }
                }
            }
            push_bn(&mut out, &format!("{p}.bn2"), &b.bn2);
            out.push((format!("{p}.expand.weight"), &b.expand));
            push_bn(&mut out, &format!("{p}.bn3"), &b.bn3);
            if let Some((w, bn)) = &b.shortcut {
                out.push((format!("{p}.shortcut.conv.weight"), w));
                push_bn(&mut out, &format!("{p}.shortcut.bn"), bn);
            }
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable counterpart of [`Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![("stem.conv.weight".to_string(), &mut self.stem)];
        push_bn_mut(&mut out, "stem.bn", &mut self.stem_bn);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.reduce.weight"), &mut b.reduce));
            push_bn_mut(&mut out, &format!("{p}.bn1"), &mut b.bn1);
            match &mut b.spatial {
                SpatialKernel::Conv { weight, .. } => out.push((format!("{p}.conv.weight"), weight)),
                SpatialKernel::Attention { params, .. } => {
                    out.push((format!("{p}.attn.q"), &mut params.q));
                    out.push((format!("{p}.attn.k"), &mut params.k));
                    out.push((format!("{p}.attn.v"), &mut params.v));
                    out.push((format!("{p}.attn.emb_h"), &mut params.emb_h));
                    out.push((format!("{p}.attn.emb_w"), &mut params.emb_w));
                    if let Some(z) = &mut params.spans {
                        out.push((format!("{p}.attn.span"), z));
                    }
                }
            }
            push_bn_mut(&mut out, &format!("{p}.bn2"), &mut b.bn2);
            out.push((format!("{p}.expand.weight"), &mut b.expand));
            push_bn_mut(&mut out, &format!("{p}.bn3"), &mut b.bn3);
            if let Some((w, bn)) = &mut b.shortcut {
                out.push((format!("{p}.shortcut.conv.weight"), w));
                push_bn_mut(&mut out, &format!("{p}.shortcut.bn"), bn);
            }
        }
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    /// Batch-norm running statistics (not trainable) under canonical paths.
    pub fn buffers(&self) -> Vec<(String, &[T])> {
        let mut bns: Vec<(String, &BatchNorm<T>)> = vec![("stem.bn".to_string(), &self.stem_bn)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            bns.push((format!("{p}.bn1"), &b.bn1));
            bns.push((format!("{p}.bn2"), &b.bn2));
            bns.push((format!("{p}.bn3"), &b.bn3));
            if let Some((_, bn)) = &b.shortcut {
                bns.push((format!("{p}.shortcut.bn"), bn));
            }
        }
        bns.into_iter()
            .flat_map(|(n, bn)| {
                [
                    (format!("{n}.running_mean"), bn.running.mean.as_slice()),
                    (format!("{n}.running_var"), bn.running.var.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable counterpart of [`Model::buffers`], same order.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        push_stats(&mut out, "stem.bn", &mut self.stem_bn);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            push_stats(&mut out, &format!("{p}.bn1"), &mut b.bn1);
            push_stats(&mut out, &format!("{p}.bn2"), &mut b.bn2);
            push_stats(&mut out, &format!("{p}.bn3"), &mut b.bn3);
            if let Some((_, bn)) = &mut b.shortcut {
                push_stats(&mut out, &format!("{p}.shortcut.bn"), bn);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}

fn push_stats<'a, T>(out: &mut Vec<(String, &'a mut Vec<T>)>, name: &str, bn: &'a mut BatchNorm<T>) {
    let ChannelStats { mean, var } = &mut bn.running;
    out.push((format!("{name}.running_mean"), mean));
    out.push((format!("{name}.running_var"), var));
}

fn push_bn<'a, T>(out: &mut Vec<(String, &'a Parameter<T>)>, name: &str, bn: &'a BatchNorm<T>) {
    out.push((format!("{name}.gamma"), &bn.gamma));
    out.push((format!("{name}.beta"), &bn.beta));
}

fn push_bn_mut<'a, T>(out: &mut Vec<(String, &'a mut Parameter<T>)>, name: &str, bn: &'a mut BatchNorm<T>) {
    out.push((format!("{name}.gamma"), &mut bn.gamma));
    out.push((format!("{name}.beta"), &mut bn.beta));
}
