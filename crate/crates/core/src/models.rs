//! Reference architectures: a plain CNN and two U-Net variants.
//!
//! All builders emit a [`ModelSpec`]; weights come from a [`WeightStore`]
//! (for example [`WeightStore::random`]).
//!
//! [`WeightStore`]: crate::graph::WeightStore
//! [`WeightStore::random`]: crate::graph::WeightStore::random

use serde::{Deserialize, Serialize};

use crate::dense::UpsampleMode;
use crate::error::{Error, Result};
use crate::graph::{ModelSpec, NodeSpec, OpSpec, DEFAULT_REFRESH_N, INPUT_ID};
use crate::sparsify::DEFAULT_EMA_DECAY;
use crate::tensor::TileShape;

/// Where sparsification nodes go in the plain CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Before every convolution.
    #[default]
    EveryConv,
    /// Before the first convolution of each pair.
    EveryPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_shape: [usize; 3],
    /// Number of conv blocks.
    pub depth: usize,
    /// Channels of the first block; each later block doubles them.
    pub base_channels: usize,
    pub kernel: usize,
    pub t_p: f32,
    pub tile: TileShape,
    pub placement: Placement,
    /// 2x2 max pooling between blocks.
    pub pool: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_shape: [2, 180, 240],
            depth: 4,
            base_channels: 8,
            kernel: 3,
            t_p: 0.1,
            tile: TileShape::default(),
            placement: Placement::EveryConv,
            pool: true,
        }
    }
}

struct Builder {
    nodes: Vec<NodeSpec>,
    t_p: f32,
}

impl Builder {
    fn new(t_p: f32) -> Self {
        Self { nodes: Vec::new(), t_p }
    }

    fn push(&mut self, id: String, op: OpSpec, inputs: &[&str]) -> String {
        self.nodes.push(NodeSpec::new(id.clone(), op, inputs));
        id
    }

    fn sparsify(&mut self, id: String, input: &str) -> String {
        let op = OpSpec::Sparsify {
            t_p: self.t_p,
            ema_decay: DEFAULT_EMA_DECAY,
        };
        self.push(id, op, &[input])
    }

    fn conv(&mut self, id: String, input: &str, out_channels: usize, kernel: usize, stride: usize) -> String {
        let op = OpSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            bias: true,
        };
        self.push(id, op, &[input])
    }

    fn upsample(&mut self, id: String, input: &str, factor: usize, mode: UpsampleMode) -> String {
        self.push(id, OpSpec::Upsample { factor, mode }, &[input])
    }

    /// Upsamples by `2^levels` with a chain of x4 and x2 steps.
    fn upsample_to_full(&mut self, prefix: &str, input: &str, levels: usize, mode: UpsampleMode) -> String {
        let mut cur = input.to_string();
        let mut left = levels;
        let mut i = 0;
        while left > 0 {
            let f = if left >= 2 { 4 } else { 2 };
            left -= if f == 4 { 2 } else { 1 };
            cur = self.upsample(format!("{prefix}.up{i}"), &cur, f, mode);
            i += 1;
        }
        cur
    }
}

/// Stack of `[sparsify] -> conv -> relu` blocks with optional pooling between them.
pub fn plain_cnn(cfg: &CnnConfig) -> Result<ModelSpec> {
    if cfg.depth == 0 || cfg.base_channels == 0 || cfg.kernel.is_multiple_of(2) {
        return Err(Error::Config(
            "plain CNN needs depth >= 1, channels >= 1 and an odd kernel".into(),
        ));
    }
    let mut b = Builder::new(cfg.t_p);
    let mut cur = INPUT_ID.to_string();
    for i in 0..cfg.depth {
        let sparsified = match cfg.placement {
            Placement::EveryConv => true,
            Placement::EveryPair => i % 2 == 0,
        };
        if sparsified {
            cur = b.sparsify(format!("b{i}.sp"), &cur);
        }
        cur = b.conv(format!("b{i}.conv"), &cur, cfg.base_channels << i, cfg.kernel, 1);
        cur = b.push(format!("b{i}.relu"), OpSpec::Relu, &[&cur]);
        if cfg.pool && i + 1 < cfg.depth {
            cur = b.push(format!("b{i}.pool"), OpSpec::MaxPool { window: 2, stride: 2 }, &[&cur]);
        }
    }
    let spec = ModelSpec {
        name: format!("cnn{}", cfg.depth),
        input_shape: cfg.input_shape,
        tile: [cfg.tile.h, cfg.tile.w],
        output: cur,
        refresh_n: DEFAULT_REFRESH_N,
        nodes: b.nodes,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetVariant {
    /// Each decoder consumes the upsampled decoder and prediction below it.
    #[default]
    Standard,
    /// Decoders see encoder features only; a full-resolution head fuses all levels.
    Delayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Stride-2 convolution.
    #[default]
    StridedConv,
    /// 2x2 max pooling followed by a stride-1 convolution.
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub variant: UNetVariant,
    pub input_shape: [usize; 3],
    /// Encoder levels, including the full-resolution one.
    pub levels: usize,
    pub base_channels: usize,
    /// Channel multiplier per level.
    pub growth: usize,
    pub kernel: usize,
    /// Channels of each prediction head.
    pub pred_channels: usize,
    pub downsample: Downsample,
    pub upsample: UpsampleMode,
    pub t_p: f32,
    pub tile: TileShape,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            variant: UNetVariant::Standard,
            input_shape: [2, 176, 240],
            levels: 4,
            base_channels: 8,
            growth: 2,
            kernel: 3,
            pred_channels: 2,
            downsample: Downsample::StridedConv,
            upsample: UpsampleMode::Nearest,
            t_p: 0.1,
            tile: TileShape::default(),
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.growth.pow(level as u32)
    }
}

/// Decoder level of a node id (`dec{l}.*` or `pred{l}.*`).
pub fn decoder_level(id: &str) -> Option<usize> {
    let rest = id.strip_prefix("dec").or_else(|| id.strip_prefix("pred"))?;
    let (level, _) = rest.split_once('.')?;
    level.parse().ok()
}

/// Ids of the last `n` convolutions in declaration order.
pub fn final_convs(spec: &ModelSpec, n: usize) -> Vec<String> {
    let convs: Vec<&NodeSpec> = spec.nodes.iter().filter(|n| n.op.is_conv()).collect();
    convs[convs.len().saturating_sub(n)..].iter().map(|n| n.id.clone()).collect()
}

/// Ids of the decoder-to-decoder data edges: an input of a level-`j`
/// decoder node produced by a decoder node of a different level.
pub fn decoder_edges(spec: &ModelSpec) -> Vec<(String, String)> {
    spec.edges()
        .into_iter()
        .filter(|(from, to)| match (decoder_level(from), decoder_level(to)) {
            (Some(a), Some(b)) => a != b,
            _ => false,
        })
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

/// U-Net with `levels` encoder stages, a decoder per lower level and a
/// prediction head on every decoder.
pub fn unet(cfg: &UNetConfig) -> Result<ModelSpec> {
    let l = cfg.levels;
    if l < 2 || cfg.base_channels == 0 || cfg.growth == 0 || cfg.kernel.is_multiple_of(2) || cfg.pred_channels == 0 {
        return Err(Error::Config(
            "U-Net needs >= 2 levels, nonzero channels and an odd kernel".into(),
        ));
    }
    let [_, h, w] = cfg.input_shape;
    let scale = 1usize << (l - 1);
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!(
            "input {h}x{w} must be divisible by {scale} for {l} levels"
        )));
    }
    let k = cfg.kernel;
    let mode = cfg.upsample;
    let mut b = Builder::new(cfg.t_p);

    let mut enc = Vec::with_capacity(l);
    let mut cur = INPUT_ID.to_string();
    for i in 0..l {
        let stride = match (i, cfg.downsample) {
            (0, _) => 1,
            (_, Downsample::StridedConv) => 2,
            (_, Downsample::MaxPool) => {
                cur = b.push(format!("enc{i}.pool"), OpSpec::MaxPool { window: 2, stride: 2 }, &[&cur]);
                1
            }
        };
        cur = b.sparsify(format!("enc{i}.sp"), &cur);
        cur = b.conv(format!("enc{i}.conv"), &cur, cfg.channels(i), k, stride);
        cur = b.push(format!("enc{i}.relu"), OpSpec::Relu, &[&cur]);
        enc.push(cur.clone());
    }

    let mut dec = vec![String::new(); l - 1];
    let mut pred = vec![String::new(); l - 1];
    for i in (0..l - 1).rev() {
        let lowest = i == l - 2;
        let feature = if lowest {
            let up = b.upsample(format!("dec{i}.up"), &enc[l - 1], 2, mode);
            b.push(format!("dec{i}.cat"), OpSpec::Concat, &[&up, &enc[i]])
        } else {
            match cfg.variant {
                UNetVariant::Standard => {
                    let up = b.upsample(format!("dec{i}.up"), &dec[i + 1], 2, mode);
                    let pup = b.upsample(format!("dec{i}.pup"), &pred[i + 1], 2, mode);
                    b.push(format!("dec{i}.cat"), OpSpec::Concat, &[&up, &pup, &enc[i]])
                }
                UNetVariant::Delayed => enc[i].clone(),
            }
        };
        let s = b.sparsify(format!("dec{i}.sp"), &feature);
        let c = b.conv(format!("dec{i}.conv"), &s, cfg.channels(i), k, 1);
        dec[i] = b.push(format!("dec{i}.relu"), OpSpec::Relu, &[&c]);
        let s = b.sparsify(format!("pred{i}.sp"), &dec[i]);
        pred[i] = b.conv(format!("pred{i}.conv"), &s, cfg.pred_channels, 1, 1);
    }

    let output = match cfg.variant {
        UNetVariant::Standard => pred[0].clone(),
        UNetVariant::Delayed => {
            let mut parts = Vec::with_capacity(2 * (l - 1));
            for (i, d) in dec.iter().enumerate() {
                parts.push(b.upsample_to_full(&format!("head.d{i}"), d, i, mode));
            }
            for (i, p) in pred.iter().enumerate() {
                parts.push(b.upsample_to_full(&format!("head.p{i}"), p, i, mode));
            }
            let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
            let cat = b.push("head.cat".into(), OpSpec::Concat, &refs);
            let s = b.sparsify("head.sp1".into(), &cat);
            let c = b.conv("head.conv1".into(), &s, cfg.channels(0), k, 1);
            let r = b.push("head.relu1".into(), OpSpec::Relu, &[&c]);
            let s = b.sparsify("head.sp2".into(), &r);
            b.conv("head.conv2".into(), &s, cfg.pred_channels, k, 1)
        }
    };

    let name = match cfg.variant {
        UNetVariant::Standard => "unet",
        UNetVariant::Delayed => "unet_delayed",
    };
    let spec = ModelSpec {
        name: name.into(),
        input_shape: cfg.input_shape,
        tile: [cfg.tile.h, cfg.tile.w],
        output,
        refresh_n: DEFAULT_REFRESH_N,
        nodes: b.nodes,
    };
    spec.infer_shapes()?;
    Ok(spec)
}
