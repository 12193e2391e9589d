use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::{check_upsample_factor, ConvParams, PoolParams, UpsampleMode};
use crate::error::{Error, Result};
use crate::sparsify::DEFAULT_EMA_DECAY;
use crate::tensor::{Shape, TileShape};

/// Reserved id of the graph input.
pub const INPUT_ID: &str = "input";

/// Operator DAG in its serializable form.
///
/// ```toml
/// name = "tiny"
/// input_shape = [2, 32, 32]
/// tile = [6, 6]
/// output = "c1"
///
/// [[node]]
/// id = "s1"
/// op = "sparsify"
/// inputs = ["input"]
/// t_p = 0.1
///
/// [[node]]
/// id = "c1"
/// op = "conv2d"
/// inputs = ["s1"]
/// out_channels = 8
/// kernel = 3
/// padding = 1
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `[channels, height, width]` of the graph input.
    pub input_shape: [usize; 3],
    #[serde(default = "default_tile")]
    pub tile: [usize; 2],
    pub output: String,
    /// Incremental steps between refresh passes; 0 disables refresh.
    #[serde(default = "default_refresh_n")]
    pub refresh_n: usize,
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeSpec>,
}

fn default_tile() -> [usize; 2] {
    [6, 6]
}

/// Refresh interval used when a model does not set one.
pub const DEFAULT_REFRESH_N: usize = 64;

fn default_refresh_n() -> usize {
    DEFAULT_REFRESH_N
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: OpSpec,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_decay() -> f32 {
    DEFAULT_EMA_DECAY
}

fn default_mode() -> UpsampleMode {
    UpsampleMode::Nearest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    Sparsify {
        t_p: f32,
        #[serde(default = "default_decay")]
        ema_decay: f32,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Sigmoid,
    Tanh,
    LeakyRelu {
        alpha: f32,
    },
    Add,
    Mul,
    Concat,
    Upsample {
        factor: usize,
        #[serde(default = "default_mode")]
        mode: UpsampleMode,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Linear {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Sparsify { .. } => "sparsify",
            OpSpec::Conv2d { .. } => "conv2d",
            OpSpec::Relu => "relu",
            OpSpec::Sigmoid => "sigmoid",
            OpSpec::Tanh => "tanh",
            OpSpec::LeakyRelu { .. } => "leaky_relu",
            OpSpec::Add => "add",
            OpSpec::Mul => "mul",
            OpSpec::Concat => "concat",
            OpSpec::Upsample { .. } => "upsample",
            OpSpec::MaxPool { .. } => "max_pool",
            OpSpec::Linear { .. } => "linear",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            OpSpec::Add | OpSpec::Mul => (2, 2),
            OpSpec::Concat => (1, usize::MAX),
            _ => (1, 1),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, OpSpec::Conv2d { .. })
    }
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, op: OpSpec, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }
}

/// Named weight tensor a node requires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn input(&self) -> Shape {
        Shape::new(self.input_shape[0], self.input_shape[1], self.input_shape[2])
    }

    pub fn tile_shape(&self) -> Result<TileShape> {
        TileShape::new(self.tile[0], self.tile[1])
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Overrides `t_p` on every sparsification node.
    pub fn with_t_p(mut self, t_p: f32) -> Self {
        for n in &mut self.nodes {
            if let OpSpec::Sparsify { t_p: tp, .. } = &mut n.op {
                *tp = t_p;
            }
        }
        self
    }

    pub fn with_tile(mut self, tile: TileShape) -> Self {
        self.tile = [tile.h, tile.w];
        self
    }

    /// `None` disables refresh.
    pub fn with_refresh_n(mut self, n: Option<usize>) -> Self {
        self.refresh_n = n.unwrap_or(0);
        self
    }

    /// Refresh interval, `None` when disabled.
    pub fn refresh_interval(&self) -> Option<usize> {
        (self.refresh_n > 0).then_some(self.refresh_n)
    }

    /// Data edges `(from, to)` in declaration order; `from` may be [`INPUT_ID`].
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |i| (i.as_str(), n.id.as_str())))
            .collect()
    }

    /// Whether `to` is reachable from `from` along data edges.
    pub fn reaches(&self, from: &str, to: &str) -> bool {
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        for (a, b) in self.edges() {
            adj.entry(a).or_default().push(b);
        }
        let mut seen = HashSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to && n != from {
                return true;
            }
            for &next in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                if next == to {
                    return true;
                }
                if seen.insert(next) {
                    stack.push(next);
                }
            }
        }
        false
    }

    /// Checks ids, references and arities.
    pub fn validate(&self) -> Result<()> {
        self.tile_shape()?;
        let s = self.input();
        if s.is_empty() {
            return Err(Error::Config(format!("input shape {s} is empty")));
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if n.id == INPUT_ID {
                return Err(Error::Config(format!("node id `{INPUT_ID}` is reserved")));
            }
            if !ids.insert(n.id.as_str()) {
                return Err(Error::DuplicateNode(n.id.clone()));
            }
        }
        for n in &self.nodes {
            for i in &n.inputs {
                if i != INPUT_ID && !ids.contains(i.as_str()) {
                    return Err(Error::UnknownNode {
                        node: n.id.clone(),
                        input: i.clone(),
                    });
                }
            }
            let (lo, hi) = n.op.arity();
            if n.inputs.len() < lo || n.inputs.len() > hi {
                return Err(Error::Config(format!(
                    "node `{}` ({}) takes {} input(s), got {}",
                    n.id,
                    n.op.name(),
                    if lo == hi { lo.to_string() } else { format!("at least {lo}") },
                    n.inputs.len()
                )));
            }
        }
        if !ids.contains(self.output.as_str()) {
            return Err(Error::UnknownNode {
                node: "<output>".into(),
                input: self.output.clone(),
            });
        }
        Ok(())
    }

    /// Node indices in dependency order; ties broken by smallest node id.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut pending: Vec<usize> = self
            .nodes
            .iter()
            .map(|n| n.inputs.iter().filter(|i| i.as_str() != INPUT_ID).count())
            .collect();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (k, n) in self.nodes.iter().enumerate() {
            for i in n.inputs.iter().filter(|i| i.as_str() != INPUT_ID) {
                let src = *index.get(i.as_str()).ok_or_else(|| Error::UnknownNode {
                    node: n.id.clone(),
                    input: i.clone(),
                })?;
                consumers[src].push(k);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(k, _)| pending[*k] == 0)
            .map(|(k, n)| (n.id.as_str(), k))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(first) = ready.pop_first() {
            let k = first.1;
            order.push(k);
            for &c in &consumers[k] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.insert((self.nodes[c].id.as_str(), c));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(k, _)| pending[*k] > 0)
                .map(|(_, n)| n.id.as_str())
                .min()
                .unwrap_or_default();
            return Err(Error::Cycle(stuck.to_string()));
        }
        Ok(order)
    }

    /// Output shape of every node, keyed by id.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Shape>> {
        self.validate()?;
        let order = self.topo_order()?;
        let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
        let input = self.input();
        for k in order {
            let n = &self.nodes[k];
            let ins: Vec<Shape> = n
                .inputs
                .iter()
                .map(|i| if i == INPUT_ID { input } else { shapes[i.as_str()] })
                .collect();
            let out = node_output_shape(n, &ins)?;
            shapes.insert(n.id.clone(), out);
        }
        Ok(shapes)
    }

    /// Weight tensors the model needs, in declaration order.
    pub fn weight_slots(&self) -> Result<Vec<WeightSlot>> {
        let shapes = self.infer_shapes()?;
        let input = self.input();
        let shape_of = |id: &str| if id == INPUT_ID { input } else { shapes[id] };
        let mut slots = Vec::new();
        for n in &self.nodes {
            match n.op {
                OpSpec::Conv2d {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let cin = shape_of(&n.inputs[0]).c;
                    let fan_in = cin * kernel * kernel;
                    slots.push(WeightSlot {
                        name: format!("{}.weight", n.id),
                        shape: vec![out_channels, cin, kernel, kernel],
                        fan_in,
                        is_bias: false,
                    });
                    if bias {
                        slots.push(WeightSlot {
                            name: format!("{}.bias", n.id),
                            shape: vec![out_channels],
                            fan_in,
                            is_bias: true,
                        });
                    }
                }
                OpSpec::Linear { out_features, bias } => {
                    let fan_in = shape_of(&n.inputs[0]).len();
                    slots.push(WeightSlot {
                        name: format!("{}.weight", n.id),
                        shape: vec![out_features, fan_in],
                        fan_in,
                        is_bias: false,
                    });
                    if bias {
                        slots.push(WeightSlot {
                            name: format!("{}.bias", n.id),
                            shape: vec![out_features],
                            fan_in,
                            is_bias: true,
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(slots)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .weight_slots()?
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum())
    }

    /// Dense multiply-accumulates of one forward pass.
    pub fn dense_macs(&self) -> Result<u64> {
        let shapes = self.infer_shapes()?;
        let input = self.input();
        let mut total = 0u64;
        for n in &self.nodes {
            let in_shape = if n.inputs[0] == INPUT_ID {
                input
            } else {
                shapes[n.inputs[0].as_str()]
            };
            match &n.op {
                OpSpec::Conv2d { .. } => total += conv_params(n, in_shape)?.dense_macs(in_shape)?,
                OpSpec::Linear { out_features, .. } => total += (out_features * in_shape.len()) as u64,
                _ => {}
            }
        }
        Ok(total)
    }
}

pub(crate) fn conv_params(n: &NodeSpec, input: Shape) -> Result<ConvParams> {
    match n.op {
        OpSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let p = ConvParams {
                c_in: input.c,
                c_out: out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            };
            p.validate()
                .map_err(|e| Error::Config(format!("node `{}`: {e}", n.id)))?;
            Ok(p)
        }
        _ => Err(Error::Config(format!("node `{}` is not a convolution", n.id))),
    }
}

fn node_output_shape(n: &NodeSpec, ins: &[Shape]) -> Result<Shape> {
    let ctx = |e: Error| match e {
        Error::ShapeMismatch { expected, found, .. } => Error::ShapeMismatch {
            context: format!("node `{}`", n.id),
            expected,
            found,
        },
        Error::ChannelMismatch { expected, found, .. } => Error::ChannelMismatch {
            context: format!("node `{}`", n.id),
            expected,
            found,
        },
        other => Error::Config(format!("node `{}`: {other}", n.id)),
    };
    let first = ins[0];
    match &n.op {
        OpSpec::Sparsify { t_p, ema_decay } => {
            if !(*t_p >= 0.0 && t_p.is_finite()) || !(*ema_decay > 0.0 && *ema_decay < 1.0) {
                return Err(Error::Config(format!(
                    "node `{}`: t_p must be >= 0 and ema_decay in (0, 1)",
                    n.id
                )));
            }
            Ok(first)
        }
        OpSpec::Conv2d { .. } => conv_params(n, first)?.output_shape(first).map_err(ctx),
        OpSpec::Relu | OpSpec::Sigmoid | OpSpec::Tanh | OpSpec::LeakyRelu { .. } => Ok(first),
        OpSpec::Add | OpSpec::Mul => {
            if ins[1] != first {
                return Err(ctx(Error::shape("", first, ins[1])));
            }
            Ok(first)
        }
        OpSpec::Concat => {
            let mut c = 0;
            for s in ins {
                if s.h != first.h || s.w != first.w {
                    return Err(ctx(Error::shape("", Shape::new(s.c, first.h, first.w), *s)));
                }
                c += s.c;
            }
            Ok(Shape::new(c, first.h, first.w))
        }
        OpSpec::Upsample { factor, .. } => {
            check_upsample_factor(*factor).map_err(ctx)?;
            Ok(Shape::new(first.c, first.h * factor, first.w * factor))
        }
        OpSpec::MaxPool { window, stride } => PoolParams {
            window: *window,
            stride: *stride,
        }
        .output_shape(first)
        .map_err(ctx),
        OpSpec::Linear { out_features, .. } => {
            if *out_features == 0 {
                return Err(Error::Config(format!("node `{}`: zero output features", n.id)));
            }
            Ok(Shape::new(*out_features, 1, 1))
        }
    }
}
