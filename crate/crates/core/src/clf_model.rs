//! Slice detector (2 outputs) and lobe lesion categorizer (4 outputs) over a
//! shared convolutional backbone. Backbones follow the torchvision layouts of
//! the compared architectures, plus a compact dense family for small inputs.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{BatchNorm, Linear, ModuleT, VarBuilder, VarMap};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::labels::LesionCategory;
use crate::nn;
use crate::nn::layers::{self, bn_relu, max_pool_padded, Conv2d, ConvSpec};
use crate::seg_model::LobeCrop;
use crate::volume_io::NormStats;

const CHECKPOINT_KIND: &str = "lungscope.clf";
const FORMAT_VERSION: &str = "1";
const BACKBONE: &str = "backbone";
const HEAD: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "dense121")]
    Dense121,
    #[serde(rename = "dense169")]
    Dense169,
    #[serde(rename = "dense201")]
    Dense201,
    #[serde(rename = "res18")]
    Res18,
    #[serde(rename = "res34")]
    Res34,
    #[serde(rename = "res50")]
    Res50,
    #[serde(rename = "res101")]
    Res101,
    #[serde(rename = "res152")]
    Res152,
    #[serde(rename = "alex")]
    Alex,
    #[serde(rename = "squeeze")]
    Squeeze,
    #[serde(rename = "resnext")]
    Resnext,
    /// Compact dense network for desk-scale inputs; sized by [`DenseCustomConfig`].
    #[serde(rename = "dense_custom")]
    DenseCustom,
}

impl Family {
    /// The architectures of the published comparison (the custom family excluded).
    pub const COMPARED: [Family; 11] = [
        Family::Dense201,
        Family::Dense121,
        Family::Dense169,
        Family::Res18,
        Family::Res34,
        Family::Res50,
        Family::Res101,
        Family::Res152,
        Family::Alex,
        Family::Squeeze,
        Family::Resnext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Dense121 => "dense121",
            Family::Dense169 => "dense169",
            Family::Dense201 => "dense201",
            Family::Res18 => "res18",
            Family::Res34 => "res34",
            Family::Res50 => "res50",
            Family::Res101 => "res101",
            Family::Res152 => "res152",
            Family::Alex => "alex",
            Family::Squeeze => "squeeze",
            Family::Resnext => "resnext",
            Family::DenseCustom => "dense_custom",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::COMPARED
            .iter()
            .chain(std::iter::once(&Family::DenseCustom))
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown backbone family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseCustomConfig {
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub init_features: usize,
    pub bn_size: usize,
}

impl Default for DenseCustomConfig {
    fn default() -> Self {
        Self {
            growth_rate: 8,
            block_layers: vec![2, 2, 2],
            init_features: 16,
            bn_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    pub head_outputs: usize,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub custom: DenseCustomConfig,
}

fn default_input() -> usize {
    224
}

impl BackboneConfig {
    pub fn new(family: Family, head_outputs: usize) -> Self {
        Self {
            family,
            pretrained_weights: None,
            head_outputs,
            input_size: default_input(),
            custom: DenseCustomConfig::default(),
        }
    }

    pub fn detector() -> Self {
        Self::new(Family::Dense201, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_outputs != 2 && self.head_outputs != 4 {
            return Err(Error::invalid(format!("head_outputs must be 2 or 4, got {}", self.head_outputs)));
        }
        let min = if self.family == Family::DenseCustom { 8 } else { 32 };
        if self.input_size < min {
            return Err(Error::invalid(format!("input_size {} too small for {}", self.input_size, self.family)));
        }
        if self.family == Family::DenseCustom {
            let c = &self.custom;
            if c.growth_rate == 0 || c.init_features == 0 || c.bn_size == 0 || c.block_layers.is_empty() || c.block_layers.contains(&0) {
                return Err(Error::invalid("dense_custom sizes must be >= 1"));
            }
        }
        Ok(())
    }
}

trait Stage: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
    pool: Option<(usize, usize, usize)>,
}

impl Stage for ConvBnRelu {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = bn_relu(&self.bn, &self.conv.forward(x)?, train)?;
        match self.pool {
            Some((k, s, p)) => max_pool_padded(&y, k, s, p, false),
            None => Ok(y),
        }
    }
}

struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(in_c: usize, n: usize, growth: usize, bn_size: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..n)
            .map(|j| {
                let c = in_c + j * growth;
                let vb = vb.pp(format!("denselayer{}", j + 1));
                Ok(DenseLayer {
                    bn1: layers::batch_norm(c, vb.pp("norm1"))?,
                    conv1: Conv2d::new(c, bn_size * growth, ConvSpec::k(1).no_bias(), vb.pp("conv1"))?,
                    bn2: layers::batch_norm(bn_size * growth, vb.pp("norm2"))?,
                    conv2: Conv2d::new(bn_size * growth, growth, ConvSpec::k(3).no_bias(), vb.pp("conv2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl Stage for DenseBlock {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut feats = vec![x.clone()];
        for l in &self.layers {
            let inp = Tensor::cat(&feats, 1)?;
            let y = l.conv1.forward(&bn_relu(&l.bn1, &inp, train)?)?;
            let y = l.conv2.forward(&bn_relu(&l.bn2, &y, train)?)?;
            feats.push(y);
        }
        Tensor::cat(&feats, 1)
    }
}

struct DenseTransition {
    bn: BatchNorm,
    conv: Conv2d,
}

impl Stage for DenseTransition {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.conv.forward(&bn_relu(&self.bn, x, train)?)?.avg_pool2d(2)
    }
}

struct NormRelu {
    bn: BatchNorm,
}

impl Stage for NormRelu {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        bn_relu(&self.bn, x, train)
    }
}

enum ResBlock {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        down: Option<(Conv2d, BatchNorm)>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        conv3: Conv2d,
        bn3: BatchNorm,
        down: Option<(Conv2d, BatchNorm)>,
    },
}

impl ResBlock {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (y, down) = match self {
            ResBlock::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                down,
            } => {
                let y = bn_relu(bn1, &conv1.forward(x)?, train)?;
                (bn2.forward_t(&conv2.forward(&y)?, train)?, down)
            }
            ResBlock::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                down,
            } => {
                let y = bn_relu(bn1, &conv1.forward(x)?, train)?;
                let y = bn_relu(bn2, &conv2.forward(&y)?, train)?;
                (bn3.forward_t(&conv3.forward(&y)?, train)?, down)
            }
        };
        let identity = match down {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (y + identity)?.relu()
    }
}


struct ResLayer {
    blocks: Vec<ResBlock>,
}

impl Stage for ResLayer {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward_t(&y, train)?;
        }
        Ok(y)
    }
}

struct ConvRelu {
    conv: Conv2d,
}

impl Stage for ConvRelu {
    fn forward_t(&self, x: &Tensor, _train: bool) -> candle_core::Result<Tensor> {
        self.conv.forward(x)?.relu()
    }
}

struct MaxPool {
    kernel: usize,
    stride: usize,
    ceil: bool,
    adaptive: Option<usize>,
}

impl Stage for MaxPool {
    fn forward_t(&self, x: &Tensor, _train: bool) -> candle_core::Result<Tensor> {
        let y = max_pool_padded(x, self.kernel, self.stride, 0, self.ceil)?;
        match self.adaptive {
            Some(o) => layers::adaptive_avg_pool(&y, o),
            None => Ok(y),
        }
    }
}

struct Fire {
    squeeze: Conv2d,
    expand1: Conv2d,
    expand3: Conv2d,
}

impl Stage for Fire {
    fn forward_t(&self, x: &Tensor, _train: bool) -> candle_core::Result<Tensor> {
        let s = self.squeeze.forward(x)?.relu()?;
        let a = self.expand1.forward(&s)?.relu()?;
        let b = self.expand3.forward(&s)?.relu()?;
        Tensor::cat(&[a, b], 1)
    }
}

enum Neck {
    GlobalAvg,
    /// Flatten, then two dropout-linear-ReLU layers.
    Mlp(Linear, Linear),
}

struct Backbone {
    stages: Vec<(String, Box<dyn Stage>)>,
    neck: Neck,
    features: usize,
}

fn dense_backbone(
    stem: ConvBnRelu,
    init: usize,
    growth: usize,
    bn_size: usize,
    blocks: &[usize],
    final_name: &str,
    vb: &VarBuilder,
) -> Result<Backbone> {
    let mut stages: Vec<(String, Box<dyn Stage>)> = vec![("stem".into(), Box::new(stem))];
    let mut c = init;
    for (i, &n) in blocks.iter().enumerate() {
        let name = format!("denseblock{}", i + 1);
        stages.push((name.clone(), Box::new(DenseBlock::new(c, n, growth, bn_size, vb.pp(&name))?)));
        c += n * growth;
        if i + 1 < blocks.len() {
            let name = format!("transition{}", i + 1);
            let vbt = vb.pp(&name);
            stages.push((
                name,
                Box::new(DenseTransition {
                    bn: layers::batch_norm(c, vbt.pp("norm"))?,
                    conv: Conv2d::new(c, c / 2, ConvSpec::k(1).no_bias(), vbt.pp("conv"))?,
                }),
            ));
            c /= 2;
        }
    }
    stages.push((
        final_name.into(),
        Box::new(NormRelu {
            bn: layers::batch_norm(c, vb.pp(final_name))?,
        }),
    ));
    Ok(Backbone {
        stages,
        neck: Neck::GlobalAvg,
        features: c,
    })
}

fn torchvision_dense(blocks: &[usize], vb: &VarBuilder) -> Result<Backbone> {
    let stem = ConvBnRelu {
        conv: Conv2d::new(3, 64, ConvSpec::k(7).stride(2).pad(3).no_bias(), vb.pp("stem.conv0"))?,
        bn: layers::batch_norm(64, vb.pp("stem.norm0"))?,
        pool: Some((3, 2, 1)),
    };
    dense_backbone(stem, 64, 32, 4, blocks, "norm5", vb)
}

fn custom_dense(cfg: &DenseCustomConfig, vb: &VarBuilder) -> Result<Backbone> {
    let stem = ConvBnRelu {
        conv: Conv2d::new(3, cfg.init_features, ConvSpec::k(3).no_bias(), vb.pp("stem.conv0"))?,
        bn: layers::batch_norm(cfg.init_features, vb.pp("stem.norm0"))?,
        pool: Some((2, 2, 0)),
    };
    dense_backbone(stem, cfg.init_features, cfg.growth_rate, cfg.bn_size, &cfg.block_layers, "norm_final", vb)
}

fn downsample(in_c: usize, out_c: usize, stride: usize, vb: VarBuilder) -> Result<Option<(Conv2d, BatchNorm)>> {
    if stride == 1 && in_c == out_c {
        return Ok(None);
    }
    Ok(Some((
        Conv2d::new(in_c, out_c, ConvSpec::k(1).stride(stride).pad(0).no_bias(), vb.pp("0"))?,
        layers::batch_norm(out_c, vb.pp("1"))?,
    )))
}

fn resnet(blocks: [usize; 4], bottleneck: bool, groups: usize, width_per_group: usize, vb: &VarBuilder) -> Result<Backbone> {
    let stem = ConvBnRelu {
        conv: Conv2d::new(3, 64, ConvSpec::k(7).stride(2).pad(3).no_bias(), vb.pp("stem.conv1"))?,
        bn: layers::batch_norm(64, vb.pp("stem.bn1"))?,
        pool: Some((3, 2, 1)),
    };
    let mut stages: Vec<(String, Box<dyn Stage>)> = vec![("stem".into(), Box::new(stem))];
    let expansion = if bottleneck { 4 } else { 1 };
    let mut in_c = 64;
    for (li, &n) in blocks.iter().enumerate() {
        let planes = 64 << li;
        let name = format!("layer{}", li + 1);
        let vbl = vb.pp(&name);
        let mut list = Vec::with_capacity(n);
        for b in 0..n {
            let stride = if b == 0 && li > 0 { 2 } else { 1 };
            let vb = vbl.pp(b.to_string());
            let out_c = planes * expansion;
            let block = if bottleneck {
                let width = planes * width_per_group / 64 * groups;
                ResBlock::Bottleneck {
                    conv1: Conv2d::new(in_c, width, ConvSpec::k(1).no_bias(), vb.pp("conv1"))?,
                    bn1: layers::batch_norm(width, vb.pp("bn1"))?,
                    conv2: Conv2d::new(width, width, ConvSpec::k(3).stride(stride).groups(groups).no_bias(), vb.pp("conv2"))?,
                    bn2: layers::batch_norm(width, vb.pp("bn2"))?,
                    conv3: Conv2d::new(width, out_c, ConvSpec::k(1).no_bias(), vb.pp("conv3"))?,
                    bn3: layers::batch_norm(out_c, vb.pp("bn3"))?,
                    down: downsample(in_c, out_c, stride, vb.pp("downsample"))?,
                }
            } else {
                ResBlock::Basic {
                    conv1: Conv2d::new(in_c, planes, ConvSpec::k(3).stride(stride).no_bias(), vb.pp("conv1"))?,
                    bn1: layers::batch_norm(planes, vb.pp("bn1"))?,
                    conv2: Conv2d::new(planes, planes, ConvSpec::k(3).no_bias(), vb.pp("conv2"))?,
                    bn2: layers::batch_norm(planes, vb.pp("bn2"))?,
                    down: downsample(in_c, out_c, stride, vb.pp("downsample"))?,
                }
            };
            list.push(block);
            in_c = out_c;
        }
        stages.push((name, Box::new(ResLayer { blocks: list })));
    }
    Ok(Backbone {
        stages,
        neck: Neck::GlobalAvg,
        features: in_c,
    })
}

fn alexnet(vb: &VarBuilder) -> Result<Backbone> {
    let conv = |name: &str, i: usize, o: usize, spec: ConvSpec| -> Result<(String, Box<dyn Stage>)> {
        Ok((
            name.to_string(),
            Box::new(ConvRelu {
                conv: Conv2d::new(i, o, spec, vb.pp(name))?,
            }),
        ))
    };
    let pool = |name: &str, adaptive: Option<usize>| -> (String, Box<dyn Stage>) {
        (
            name.to_string(),
            Box::new(MaxPool {
                kernel: 3,
                stride: 2,
                ceil: false,
                adaptive,
            }),
        )
    };
    let stages = vec![
        conv("conv1", 3, 64, ConvSpec::k(11).stride(4).pad(2))?,
        pool("pool1", None),
        conv("conv2", 64, 192, ConvSpec::k(5))?,
        pool("pool2", None),
        conv("conv3", 192, 384, ConvSpec::k(3))?,
        conv("conv4", 384, 256, ConvSpec::k(3))?,
        conv("conv5", 256, 256, ConvSpec::k(3))?,
        pool("pool5", Some(6)),
    ];
    let neck = Neck::Mlp(
        layers::linear(256 * 36, 4096, vb.pp("fc6"))?,
        layers::linear(4096, 4096, vb.pp("fc7"))?,
    );
    Ok(Backbone {
        stages,
        neck,
        features: 4096,
    })
}

fn squeezenet(vb: &VarBuilder) -> Result<Backbone> {
    let fire = |name: &str, i: usize, s: usize, e: usize| -> Result<(String, Box<dyn Stage>)> {
        let vb = vb.pp(name);
        Ok((
            name.to_string(),
            Box::new(Fire {
                squeeze: Conv2d::new(i, s, ConvSpec::k(1), vb.pp("squeeze"))?,
                expand1: Conv2d::new(s, e, ConvSpec::k(1), vb.pp("expand1x1"))?,
                expand3: Conv2d::new(s, e, ConvSpec::k(3), vb.pp("expand3x3"))?,
            }),
        ))
    };
    let pool = |name: &str| -> (String, Box<dyn Stage>) {
        (
            name.to_string(),
            Box::new(MaxPool {
                kernel: 3,
                stride: 2,
                ceil: true,
                adaptive: None,
            }),
        )
    };
    let stages = vec![
        (
            "stem".to_string(),
            Box::new(ConvRelu {
                conv: Conv2d::new(3, 96, ConvSpec::k(7).stride(2).pad(0), vb.pp("stem"))?,
            }) as Box<dyn Stage>,
        ),
        pool("pool1"),
        fire("fire2", 96, 16, 64)?,
        fire("fire3", 128, 16, 64)?,
        fire("fire4", 128, 32, 128)?,
        pool("pool4"),
        fire("fire5", 256, 32, 128)?,
        fire("fire6", 256, 48, 192)?,
        fire("fire7", 384, 48, 192)?,
        fire("fire8", 384, 64, 256)?,
        pool("pool8"),
        fire("fire9", 512, 64, 256)?,
    ];
    Ok(Backbone {
        stages,
        neck: Neck::GlobalAvg,
        features: 512,
    })
}

impl Backbone {
    fn new(config: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp(BACKBONE);
        match config.family {
            Family::Dense121 => torchvision_dense(&[6, 12, 24, 16], &vb),
            Family::Dense169 => torchvision_dense(&[6, 12, 32, 32], &vb),
            Family::Dense201 => torchvision_dense(&[6, 12, 48, 32], &vb),
            Family::DenseCustom => custom_dense(&config.custom, &vb),
            Family::Res18 => resnet([2, 2, 2, 2], false, 1, 64, &vb),
            Family::Res34 => resnet([3, 4, 6, 3], false, 1, 64, &vb),
            Family::Res50 => resnet([3, 4, 6, 3], true, 1, 64, &vb),
            Family::Res101 => resnet([3, 4, 23, 3], true, 1, 64, &vb),
            Family::Res152 => resnet([3, 8, 36, 3], true, 1, 64, &vb),
            Family::Resnext => resnet([3, 4, 6, 3], true, 32, 4, &vb),
            Family::Alex => alexnet(&vb),
            Family::Squeeze => squeezenet(&vb),
        }
    }

    fn stage_index(&self, layer: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|(n, _)| n == layer)
            .ok_or_else(|| Error::NotFound(format!("layer {layer:?}")))
    }

    fn run(&self, x: &Tensor, from: usize, to: usize, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for (_, s) in &self.stages[from..to] {
            y = s.forward_t(&y, train)?;
        }
        Ok(y)
    }

    fn pool(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(match &self.neck {
            Neck::GlobalAvg => layers::global_avg_pool(x)?,
            Neck::Mlp(fc6, fc7) => {
                let x = x.flatten_from(1)?;
                let x = fc6.forward(&dropout(&x, train)?)?.relu()?;
                fc7.forward(&dropout(&x, train)?)?.relu()?
            }
        })
    }
}

fn dropout(x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
    if train {
        candle_nn::ops::dropout(x, 0.5)
    } else {
        Ok(x.clone())
    }
}

/// Backbone plus linear head, with the intensity statistics used to prepare inputs.
pub struct Classifier {
    config: BackboneConfig,
    pub varmap: VarMap,
    backbone: Backbone,
    head: Linear,
    pub norm: NormStats,
    pub dtype: DType,
    pub version: u32,
}

impl Classifier {
    pub fn new(config: &BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = nn::seeded_builder(&varmap, seed, dtype);
        let backbone = Backbone::new(config, vb.clone())?;
        let head = layers::linear(backbone.features, config.head_outputs, vb.pp(HEAD))?;
        Ok(Self {
            config: config.clone(),
            varmap,
            backbone,
            head,
            norm: NormStats::identity(),
            dtype,
            version: 0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn head_outputs(&self) -> usize {
        self.config.head_outputs
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.features
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.backbone.stages.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// The last feature stage of the backbone.
    pub fn default_layer(&self) -> &str {
        &self.backbone.stages.last().expect("backbone has stages").0
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.varmap, None)
    }

    pub fn backbone_param_count(&self) -> usize {
        nn::param_count(&self.varmap, Some("backbone."))
    }

    pub fn head_weight(&self) -> &Tensor {
        self.head.weight()
    }

    /// Sets head weights and bias to zero.
    pub fn zero_head(&self) -> Result<()> {
        for (name, var) in nn::trainable_vars(&self.varmap) {
            if name.starts_with("head.") {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn to_rgb(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.input_size();
        if h != s || w != s || (c != 1 && c != 3) {
            return Err(Error::Shape(format!("expected [n, 1|3, {s}, {s}], got {:?}", x.dims())));
        }
        let x = x.to_dtype(self.dtype)?;
        Ok(if c == 1 { x.repeat((1, 3, 1, 1))? } else { x })
    }

    /// Logits `[n, head_outputs]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.backbone.run(&self.to_rgb(x)?, 0, self.backbone.stages.len(), train)?;
        Ok(self.head.forward(&self.backbone.pool(&a, train)?)?)
    }

    /// Activations at the output of stage `layer` (evaluation mode).
    pub fn activations(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let i = self.backbone.stage_index(layer)?;
        self.backbone.run(&self.to_rgb(x)?, 0, i + 1, false)
    }

    /// Logits computed from activations of stage `layer` (evaluation mode).
    pub fn logits_from(&self, a: &Tensor, layer: &str) -> Result<Tensor> {
        let i = self.backbone.stage_index(layer)?;
        let y = self.backbone.run(a, i + 1, self.backbone.stages.len(), false)?;
        Ok(self.head.forward(&self.backbone.pool(&y, false)?)?)
    }

    /// Row-wise class probabilities in evaluation mode.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward_t(x, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(logits.iter().map(|l| softmax(l)).collect())
    }

    /// Standardizes lung pixels, zeroes everything else, and resizes to the input size.
    pub fn prepare_slice(&self, windowed: &Array2<f32>, lung: &Array2<bool>) -> Result<Array2<f32>> {
        if windowed.dim() != lung.dim() {
            return Err(Error::DimensionMismatch(format!("slice {:?} vs mask {:?}", windowed.dim(), lung.dim())));
        }
        let mut x = windowed.clone();
        ndarray::Zip::from(&mut x).and(lung).for_each(|v, &m| {
            *v = if m { self.norm.apply(*v) } else { 0.0 };
        });
        let s = self.input_size();
        Ok(imageops::resize_bilinear(&x, s, s))
    }

    /// Crop input: standardized lobe pixels, zero elsewhere, padded square and resized.
    pub fn prepare_crop(&self, crop: &LobeCrop) -> Result<Array2<f32>> {
        if crop.image.is_empty() || !(crop.area_fraction > 0.0) {
            return Err(Error::invalid("degenerate crop with zero area"));
        }
        let mut x = crop.image.clone();
        ndarray::Zip::from(&mut x).and(&crop.mask).for_each(|v, &m| {
            *v = if m { self.norm.apply(*v) } else { 0.0 };
        });
        Ok(imageops::fit_square(&x, self.input_size()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = self.config.clone();
        config.pretrained_weights = None;
        let meta = HashMap::from([
            ("kind".to_string(), CHECKPOINT_KIND.to_string()),
            ("format".to_string(), FORMAT_VERSION.to_string()),
            ("config".to_string(), serde_json::to_string(&config)?),
            ("norm".to_string(), serde_json::to_string(&self.norm)?),
            ("version".to_string(), self.version.to_string()),
        ]);
        nn::save_checkpoint(path, &self.varmap, meta)
    }

    /// Loads a checkpoint; the embedded config is validated before any weights are read.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = nn::read_file(path)?;
        let meta = nn::read_checkpoint_metadata(&bytes)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks metadata key {k}", path.display())))
        };
        if get("kind")? != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("{} is not a classifier checkpoint", path.display())));
        }
        if get("format")? != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", get("format")?)));
        }
        let config: BackboneConfig = serde_json::from_str(get("config")?)?;
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("incompatible config: {e}")))?;
        let mut model = Self::new(&config, 0, DType::F32)?;
        model.norm = serde_json::from_str(get("norm")?)?;
        model.version = get("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("version is not an integer".into()))?;
        nn::load_tensors_into(&model.varmap, &bytes, DType::F32)?;
        Ok(model)
    }

    /// Copies `backbone.*` tensors from a safetensors file; names and shapes must match.
    fn load_backbone(&self, path: &Path) -> Result<()> {
        let bytes = nn::read_file(path)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        for (name, var) in nn::named_vars(&self.varmap) {
            if !name.starts_with("backbone.") {
                continue;
            }
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained weights lack {name}")))?;
            if t.dims() != var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "pretrained {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Builds a 2-output detector, optionally initializing the backbone from pretrained weights.
pub fn build_detector(config: &BackboneConfig, seed: u64) -> Result<Classifier> {
    if config.head_outputs != 2 {
        return Err(Error::invalid("a detector has exactly 2 outputs"));
    }
    let model = Classifier::new(config, seed, DType::F32)?;
    if let Some(p) = &config.pretrained_weights {
        model.load_backbone(p)?;
    }
    Ok(model)
}

/// Builds a 4-output categorizer whose backbone is a copy of the detector's.
pub fn build_categorizer(detector: &Classifier, config: &BackboneConfig, seed: u64) -> Result<Classifier> {
    if config.family != detector.family() {
        return Err(Error::invalid(format!(
            "categorizer family {} does not match detector family {}",
            config.family,
            detector.family()
        )));
    }
    if config.head_outputs != 4 {
        return Err(Error::invalid("a categorizer has exactly 4 outputs"));
    }
    let mut config = config.clone();
    config.custom = detector.config.custom.clone();
    config.input_size = detector.input_size();
    config.pretrained_weights = None;
    let mut model = Classifier::new(&config, seed, detector.dtype)?;
    let src = nn::named_vars(&detector.varmap);
    for (name, var) in nn::named_vars(&model.varmap) {
        if name.starts_with("backbone.") {
            let (_, s) = src
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("detector lacks {name}")))?;
            var.set(&s.as_tensor().copy()?)?;
        }
    }
    model.norm = detector.norm;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub scan_id: String,
    pub slice_index: usize,
    pub p_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionPrediction {
    /// Ordered ground glass, consolidation, crazy paving, negative.
    pub probs: [f64; 4],
    pub label: LesionCategory,
    pub scan_id: String,
    pub slice_index: usize,
    pub lobe_index: u8,
}

impl LesionPrediction {
    pub fn from_probs(probs: [f64; 4], crop: &LobeCrop) -> Self {
        let best = (0..4).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        Self {
            probs,
            label: LesionCategory::from_index(best).expect("index < 4"),
            scan_id: crop.scan_id.clone(),
            slice_index: crop.slice_index,
            lobe_index: crop.lobe_index,
        }
    }
}

fn stack(images: &[&Array2<f32>], s: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * s * s);
    for img in images {
        if img.dim() != (s, s) {
            return Err(Error::Shape(format!("input {:?} does not match model input {s}x{s}", img.dim())));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, s, s), &Device::Cpu)?)
}

/// Positive-class probability for prepared (masked) slices.
pub fn classify_batch(detector: &Classifier, slices: &[&Array2<f32>]) -> Result<Vec<f64>> {
    if detector.head_outputs() != 2 {
        return Err(Error::invalid("classify_slice needs a 2-output detector"));
    }
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(8) {
        let x = stack(chunk, detector.input_size())?;
        out.extend(detector.probabilities(&x)?.into_iter().map(|p| p[1]));
    }
    Ok(out)
}

pub fn classify_slice(detector: &Classifier, masked_slice: &Array2<f32>, scan_id: &str, slice_index: usize) -> Result<SliceScore> {
    let p = classify_batch(detector, &[masked_slice])?[0];
    Ok(SliceScore {
        scan_id: scan_id.to_string(),
        slice_index,
        p_positive: p,
    })
}

pub fn categorize_crop(categorizer: &Classifier, crop: &LobeCrop) -> Result<LesionPrediction> {
    if categorizer.head_outputs() != 4 {
        return Err(Error::invalid("categorize_crop needs a 4-output categorizer"));
    }
    let x = categorizer.prepare_crop(crop)?;
    let p = categorizer.probabilities(&stack(&[&x], categorizer.input_size())?)?.remove(0);
    Ok(LesionPrediction::from_probs([p[0], p[1], p[2], p[3]], crop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(head: usize) -> BackboneConfig {
        BackboneConfig {
            input_size: 32,
            ..BackboneConfig::new(Family::DenseCustom, head)
        }
    }

    fn random_image(s: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((s, s), |_| rng.random_range(-1.0f32..1.0))
    }

    // Parameter totals of the torchvision reference implementations with the
    // 1000-way classifier replaced by a 2-way linear layer (BN buffers excluded).
    const REFERENCE_COUNTS: [(Family, usize, usize); 11] = [
        (Family::Dense121, 6_955_906, 1024),
        (Family::Dense169, 12_487_810, 1664),
        (Family::Dense201, 18_096_770, 1920),
        (Family::Res18, 11_177_538, 512),
        (Family::Res34, 21_285_698, 512),
        (Family::Res50, 23_512_130, 2048),
        (Family::Res101, 42_504_258, 2048),
        (Family::Res152, 58_147_906, 2048),
        (Family::Alex, 57_012_034, 4096),
        (Family::Squeeze, 736_450, 512),
        (Family::Resnext, 22_984_002, 2048),
    ];

    #[test]
    fn parameter_counts_match_reference_architectures() {
        for (family, count, features) in REFERENCE_COUNTS {
            let m = Classifier::new(&BackboneConfig::new(family, 2), 0, DType::F32).unwrap();
            assert_eq!(m.param_count(), count, "{family}");
            assert_eq!(m.feature_dim(), features, "{family}");
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::COMPARED {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
        assert!("vgg16".parse::<Family>().is_err());
        assert!(serde_json::from_str::<BackboneConfig>(r#"{"family":"vgg16","head_outputs":2}"#).is_err());
        assert!(BackboneConfig::new(Family::Res18, 3).validate().is_err());
    }

    #[test]
    fn forward_shapes_at_reference_resolution() {
        for family in [Family::Res18, Family::Squeeze, Family::Dense121, Family::Alex, Family::Resnext] {
            let m = Classifier::new(&BackboneConfig::new(family, 2), 1, DType::F32).unwrap();
            let x = Tensor::from_vec(random_image(224, 2).into_raw_vec_and_offset().0, (1, 1, 224, 224), &Device::Cpu).unwrap();
            let p = m.probabilities(&x).unwrap();
            assert_eq!(p[0].len(), 2);
            assert_abs_diff_eq!(p[0].iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(p[0].iter().all(|v| v.is_finite() && *v >= 0.0));
            let a = m.activations(&x, m.default_layer()).unwrap();
            assert_eq!(a.rank(), 4, "{family}");
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let m = build_detector(&tiny_config(2), 3).unwrap();
        m.zero_head().unwrap();
        let zero = Array2::zeros((32, 32));
        let s = classify_slice(&m, &zero, "s", 0).unwrap();
        assert_eq!(s.p_positive, 0.5);
        let again = classify_slice(&m, &random_image(32, 1), "s", 0).unwrap();
        assert_eq!(again.p_positive, 0.5);
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert!((softmax(&[-50.0, 50.0])[1] - 1.0).abs() < 1e-6);
        assert_eq!(softmax(&[1.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn classify_is_deterministic_and_checks_size() {
        let m = build_detector(&tiny_config(2), 4).unwrap();
        let x = random_image(32, 5);
        let a = classify_slice(&m, &x, "s", 3).unwrap();
        let b = classify_slice(&m, &x, "s", 3).unwrap();
        assert_eq!(a, b);
        assert!(a.p_positive > 0.0 && a.p_positive < 1.0);
        assert!(classify_slice(&m, &random_image(30, 5), "s", 3).is_err());
    }

    #[test]
    fn categorizer_copies_backbone() {
        for family in [Family::DenseCustom, Family::Res18, Family::Squeeze] {
            let cfg = BackboneConfig {
                input_size: if family == Family::DenseCustom { 32 } else { 64 },
                ..BackboneConfig::new(family, 2)
            };
            let det = build_detector(&cfg, 5).unwrap();
            let cat = build_categorizer(&det, &BackboneConfig::new(family, 4), 6).unwrap();
            let src = nn::named_vars(&det.varmap);
            for (name, var) in nn::named_vars(&cat.varmap) {
                let (_, s) = src.iter().find(|(n, _)| *n == name).unwrap();
                if name.starts_with("backbone.") {
                    let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                    let b = s.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                    assert_eq!(a, b, "{name}");
                }
            }
            let f = det.feature_dim();
            assert_eq!(det.head_weight().dims(), &[2, f]);
            assert_eq!(cat.head_weight().dims(), &[4, f]);
        }
        let det = build_detector(&tiny_config(2), 5).unwrap();
        assert!(build_categorizer(&det, &BackboneConfig::new(Family::Res18, 4), 0).is_err());
    }

    #[test]
    fn every_compared_family_supports_categorizer_copy() {
        for family in Family::COMPARED {
            let det = Classifier::new(&BackboneConfig::new(family, 2), 1, DType::F32).unwrap();
            let cat = build_categorizer(&det, &BackboneConfig::new(family, 4), 2).unwrap();
            assert_eq!(cat.backbone_param_count(), det.backbone_param_count(), "{family}");
            let det_vars = nn::named_vars(&det.varmap);
            let (name, var) = nn::named_vars(&cat.varmap)
                .into_iter()
                .find(|(n, _)| n.starts_with("backbone."))
                .unwrap();
            let (_, s) = det_vars.iter().find(|(n, _)| *n == name).unwrap();
            assert_eq!(
                var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                s.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn categorize_crop_outputs_valid_distribution() {
        let det = build_detector(&tiny_config(2), 7).unwrap();
        let cat = build_categorizer(&det, &tiny_config(4), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let crop = LobeCrop {
            image: Array2::from_shape_fn((20, 12), |_| rng.random_range(0.0f32..1.0)),
            mask: Array2::from_elem((20, 12), true),
            lobe_index: 2,
            scan_id: "s".into(),
            slice_index: 1,
            area_fraction: 0.1,
            bbox: [0, 0, 20, 12],
        };
        let p = categorize_crop(&cat, &crop).unwrap();
        assert_abs_diff_eq!(p.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-5);
        let best = p.probs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(p.probs[p.label.index()], best);
        cat.zero_head().unwrap();
        assert_eq!(categorize_crop(&cat, &crop).unwrap().probs, [0.25; 4]);
        let empty = LobeCrop {
            area_fraction: 0.0,
            ..crop
        };
        assert!(categorize_crop(&cat, &empty).is_err());
    }

    #[test]
    fn prepared_slice_ignores_non_lung_values() {
        let mut m = build_detector(&tiny_config(2), 1).unwrap();
        m.norm = NormStats { mean: 0.4, std: 0.1 };
        let lung = Array2::from_shape_fn((32, 32), |(r, c)| r > 8 && c < 20);
        let a = random_image(32, 1);
        let mut b = a.clone();
        ndarray::Zip::from(&mut b).and(&lung).for_each(|v, &l| {
            if !l {
                *v += 3.0
            }
        });
        assert_eq!(m.prepare_slice(&a, &lung).unwrap(), m.prepare_slice(&b, &lung).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_pretrained_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.safetensors");
        let mut m = build_detector(&tiny_config(2), 10).unwrap();
        m.version = 3;
        m.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        assert_eq!(back.version, 3);
        let x = random_image(32, 11);
        assert_eq!(
            classify_slice(&m, &x, "s", 0).unwrap(),
            classify_slice(&back, &x, "s", 0).unwrap()
        );

        let cfg = BackboneConfig {
            pretrained_weights: Some(path.clone()),
            ..tiny_config(2)
        };
        let warm = build_detector(&cfg, 99).unwrap();
        assert_eq!(warm.backbone_param_count(), m.backbone_param_count());
        let a = m.activations(&stack(&[&x], 32).unwrap(), "norm_final").unwrap();
        let b = warm.activations(&stack(&[&x], 32).unwrap(), "norm_final").unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        let wrong = BackboneConfig {
            pretrained_weights: Some(path),
            custom: DenseCustomConfig {
                growth_rate: 4,
                ..Default::default()
            },
            ..tiny_config(2)
        };
        assert!(matches!(build_detector(&wrong, 0), Err(Error::Checkpoint(_))));
    }
}
