use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use super::spec::{conv_params, ModelSpec, OpSpec, INPUT_ID};
use super::weights::WeightStore;
use crate::dense::{
    dense_activation, dense_concat, dense_conv2d, dense_linear, dense_maxpool, dense_mul, dense_upsample, Activation,
    ConvParams, PoolParams, UpsampleMode,
};
use crate::error::{Error, Result};
use crate::incr::{
    flat_to_increment, inc_activation, inc_add, inc_concat, inc_conv2d, inc_linear, inc_maxpool, inc_mul,
    inc_upsample, AccState, FlatIncrement, FlopCounter,
};
use crate::sparsify::{sparsify_step, SparsifyState, ThresholdRule};
use crate::tensor::{integrate_into, DenseTensor, IncrementTensor, Shape, TileShape};

#[derive(Debug, Clone, Copy)]
enum Src {
    Input,
    Node(usize),
}

#[derive(Debug, Clone)]
enum Kind {
    Sparsify(Box<SparsifyState>),
    Conv {
        params: ConvParams,
        weight: Arc<[f32]>,
        bias: Option<Arc<[f32]>>,
    },
    Act {
        f: Activation,
        acc: AccState,
    },
    Add,
    Mul {
        a: AccState,
        b: AccState,
    },
    Concat,
    Upsample {
        factor: usize,
        mode: UpsampleMode,
    },
    MaxPool {
        pool: PoolParams,
        acc: AccState,
    },
    Linear {
        rows: usize,
        matrix: Arc<[f32]>,
        bias: Option<Arc<[f32]>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    id: String,
    op: &'static str,
    kind: Kind,
    inputs: Vec<Src>,
    shape: Shape,
    flops: FlopCounter,
    last_in_false: Option<f64>,
    last_out_false: Option<f64>,
}

/// FLOPs of one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFlops {
    pub id: String,
    pub op: &'static str,
    pub performed: u64,
    pub dense_equiv: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlopReport {
    pub nodes: Vec<NodeFlops>,
    pub total: FlopCounter,
}

impl FlopReport {
    pub fn reduction_pct(&self) -> f64 {
        self.total.reduction_pct()
    }

    pub fn node(&self, id: &str) -> Option<&NodeFlops> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

/// Tile sparsity seen by one node during the last incremental step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSparsity {
    pub id: String,
    pub op: &'static str,
    /// False-tile fraction of the first input increment.
    pub input_false_fraction: Option<f64>,
    pub output_false_fraction: Option<f64>,
}

/// Result of one incremental step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Output increment of this step.
    pub increment: IncrementTensor,
    /// Integrated output after this step.
    pub output: DenseTensor,
    pub flops: FlopReport,
    /// The configured refresh interval says the next step should be dense.
    pub refresh_due: bool,
}

/// Compiled model holding every node's incremental state.
///
/// A [`Graph::dense_pass`] establishes the baseline output and synchronises
/// all state; [`Graph::incr_step`] then consumes input increments and keeps
/// the integrated output up to date.
#[derive(Debug, Clone)]
pub struct Graph {
    name: String,
    input_shape: Shape,
    tile: TileShape,
    nodes: Vec<Node>,
    output: usize,
    refresh_n: Option<usize>,
    y: Option<DenseTensor>,
    steps_since_refresh: usize,
    last_flops: FlopReport,
}

fn weight(store: &WeightStore, name: &str, shape: &[usize], used: &mut HashMap<String, bool>) -> Result<Arc<[f32]>> {
    let t = store.get(name).ok_or_else(|| Error::MissingWeight(name.into()))?;
    if t.shape != shape {
        return Err(Error::WeightShape {
            name: name.into(),
            expected: shape.to_vec(),
            found: t.shape.clone(),
        });
    }
    used.insert(name.into(), true);
    Ok(t.data.clone())
}

impl Graph {
    pub fn build(spec: &ModelSpec, weights: &WeightStore) -> Result<Self> {
        spec.validate()?;
        let order = spec.topo_order()?;
        let shapes = spec.infer_shapes()?;
        let tile = spec.tile_shape()?;
        let input_shape = spec.input();
        let position: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(pos, &k)| (spec.nodes[k].id.as_str(), pos))
            .collect();
        let shape_of = |id: &str| if id == INPUT_ID { input_shape } else { shapes[id] };
        let mut used: HashMap<String, bool> = HashMap::new();
        let mut nodes = Vec::with_capacity(order.len());
        for &k in &order {
            let n = &spec.nodes[k];
            let in0 = shape_of(&n.inputs[0]);
            let shape = shapes[n.id.as_str()];
            let kind = match &n.op {
                OpSpec::Sparsify { t_p, ema_decay } => Kind::Sparsify(Box::new(SparsifyState::new(
                    in0,
                    tile,
                    ThresholdRule::Adaptive {
                        t_p: *t_p,
                        ema_decay: *ema_decay,
                    },
                )?)),
                OpSpec::Conv2d { bias, .. } => {
                    let params = conv_params(n, in0)?;
                    let w = weight(weights, &format!("{}.weight", n.id), &params.weight_shape(), &mut used)?;
                    let b = if *bias {
                        Some(weight(weights, &format!("{}.bias", n.id), &[params.c_out], &mut used)?)
                    } else {
                        None
                    };
                    Kind::Conv {
                        params,
                        weight: w,
                        bias: b,
                    }
                }
                OpSpec::Relu => act(Activation::Relu, in0),
                OpSpec::Sigmoid => act(Activation::Sigmoid, in0),
                OpSpec::Tanh => act(Activation::Tanh, in0),
                OpSpec::LeakyRelu { alpha } => act(Activation::LeakyRelu(*alpha), in0),
                OpSpec::Add => Kind::Add,
                OpSpec::Mul => Kind::Mul {
                    a: AccState::new(in0),
                    b: AccState::new(in0),
                },
                OpSpec::Concat => Kind::Concat,
                OpSpec::Upsample { factor, mode } => Kind::Upsample {
                    factor: *factor,
                    mode: *mode,
                },
                OpSpec::MaxPool { window, stride } => Kind::MaxPool {
                    pool: PoolParams {
                        window: *window,
                        stride: *stride,
                    },
                    acc: AccState::new(in0),
                },
                OpSpec::Linear { out_features, bias } => {
                    let cols = in0.len();
                    let m = weight(weights, &format!("{}.weight", n.id), &[*out_features, cols], &mut used)?;
                    let b = if *bias {
                        Some(weight(weights, &format!("{}.bias", n.id), &[*out_features], &mut used)?)
                    } else {
                        None
                    };
                    Kind::Linear {
                        rows: *out_features,
                        matrix: m,
                        bias: b,
                    }
                }
            };
            let inputs = n
                .inputs
                .iter()
                .map(|i| if i == INPUT_ID { Src::Input } else { Src::Node(position[i.as_str()]) })
                .collect();
            nodes.push(Node {
                id: n.id.clone(),
                op: n.op.name(),
                kind,
                inputs,
                shape,
                flops: FlopCounter::default(),
                last_in_false: None,
                last_out_false: None,
            });
        }
        if let Some(extra) = weights.names().find(|n| !used.contains_key(*n)) {
            return Err(Error::UnusedWeight(extra.into()));
        }
        Ok(Self {
            name: spec.name.clone(),
            input_shape,
            tile,
            output: position[spec.output.as_str()],
            nodes,
            refresh_n: spec.refresh_interval(),
            y: None,
            steps_since_refresh: 0,
            last_flops: FlopReport::default(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes[self.output].shape
    }

    pub fn tile(&self) -> TileShape {
        self.tile
    }

    pub fn refresh_n(&self) -> Option<usize> {
        self.refresh_n
    }

    pub fn set_refresh_n(&mut self, n: Option<usize>) -> Result<()> {
        if n == Some(0) {
            return Err(Error::InvalidParam("refresh interval must be >= 1".into()));
        }
        self.refresh_n = n;
        Ok(())
    }

    /// Node ids in execution order.
    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    pub fn node_shape(&self, id: &str) -> Option<Shape> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.shape)
    }

    /// Integrated output, available after the first dense pass.
    pub fn output(&self) -> Option<&DenseTensor> {
        self.y.as_ref()
    }

    pub fn steps_since_refresh(&self) -> usize {
        self.steps_since_refresh
    }

    /// Whether the next step should be a refresh pass.
    pub fn refresh_due(&self) -> bool {
        self.refresh_n.is_some_and(|n| self.steps_since_refresh + 1 >= n)
    }

    /// Full forward pass with biases. Resets every node's incremental state
    /// to match `x` and makes the result the new integration baseline.
    pub fn dense_pass(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        x.ensure_shape("graph input", self.input_shape)?;
        let before = self.flop_snapshot();
        let mut outs: Vec<DenseTensor> = Vec::with_capacity(self.nodes.len());
        for k in 0..self.nodes.len() {
            let ins: Vec<&DenseTensor> = self.nodes[k]
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input => x,
                    Src::Node(j) => &outs[j],
                })
                .collect();
            let node = &mut self.nodes[k];
            let out = match &mut node.kind {
                Kind::Sparsify(state) => {
                    state.reset(ins[0])?;
                    ins[0].clone()
                }
                Kind::Conv { params, weight, bias } => {
                    let y = dense_conv2d(ins[0], weight, bias.as_deref(), params)?;
                    let flops = 2 * params.dense_macs(ins[0].shape())?;
                    node.flops.add(FlopCounter {
                        performed: flops,
                        dense_equiv: flops,
                    });
                    y
                }
                Kind::Act { f, acc } => {
                    acc.set(ins[0]);
                    dense_activation(ins[0], *f)
                }
                Kind::Add => ins[0].add(ins[1])?,
                Kind::Mul { a, b } => {
                    a.set(ins[0]);
                    b.set(ins[1]);
                    dense_mul(ins[0], ins[1])?
                }
                Kind::Concat => dense_concat(&ins)?,
                Kind::Upsample { factor, mode } => dense_upsample(ins[0], *factor, *mode)?,
                Kind::MaxPool { pool, acc } => {
                    acc.set(ins[0]);
                    dense_maxpool(ins[0], pool)?
                }
                Kind::Linear { rows, matrix, bias } => {
                    let y = dense_linear(ins[0].data(), matrix, bias.as_deref(), *rows)?;
                    let flops = 2 * (*rows * ins[0].shape().len()) as u64;
                    node.flops.add(FlopCounter {
                        performed: flops,
                        dense_equiv: flops,
                    });
                    DenseTensor::from_vec(Shape::new(*rows, 1, 1), y)?
                }
            };
            outs.push(out);
        }
        let y = outs.swap_remove(self.output);
        self.y = Some(y.clone());
        self.steps_since_refresh = 0;
        self.last_flops = self.flop_delta(&before);
        Ok(y)
    }

    /// Re-runs the dense pass on the true current input, discarding drift.
    pub fn refresh(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        self.dense_pass(x)
    }

    /// Pushes one input increment through the graph.
    pub fn incr_step(&mut self, dx: &IncrementTensor) -> Result<StepOutput> {
        if self.y.is_none() {
            return Err(Error::NotInitialized);
        }
        if dx.shape() != self.input_shape {
            return Err(Error::shape("graph input increment", self.input_shape, dx.shape()));
        }
        if dx.tile() != self.tile {
            return Err(Error::TileMismatch(self.tile.dims(), dx.tile().dims()));
        }
        let before = self.flop_snapshot();
        let mut outs: Vec<IncrementTensor> = Vec::with_capacity(self.nodes.len());
        for k in 0..self.nodes.len() {
            let ins: Vec<&IncrementTensor> = self.nodes[k]
                .inputs
                .iter()
                .map(|s| match *s {
                    Src::Input => dx,
                    Src::Node(j) => &outs[j],
                })
                .collect();
            let node = &mut self.nodes[k];
            let out = match &mut node.kind {
                Kind::Sparsify(state) => sparsify_step(ins[0], state)?,
                Kind::Conv { params, weight, .. } => inc_conv2d(ins[0], weight, params, &mut node.flops)?,
                Kind::Act { f, acc } => inc_activation(ins[0], acc, *f)?,
                Kind::Add => inc_add(ins[0], ins[1])?,
                Kind::Mul { a, b } => inc_mul(ins[0], ins[1], a, b)?,
                Kind::Concat => inc_concat(&ins)?,
                Kind::Upsample { factor, mode } => inc_upsample(ins[0], *factor, *mode)?,
                Kind::MaxPool { pool, acc } => inc_maxpool(ins[0], acc, pool)?,
                Kind::Linear { rows, matrix, .. } => {
                    let flat = FlatIncrement::from_increment(ins[0]);
                    flat_to_increment(inc_linear(&flat, matrix, *rows, &mut node.flops)?, self.tile)
                }
            };
            node.last_in_false = Some(ins[0].mask().false_fraction());
            node.last_out_false = Some(out.mask().false_fraction());
            outs.push(out);
        }
        let increment = outs.swap_remove(self.output);
        let y = self.y.as_mut().expect("checked above");
        integrate_into(y, &increment)?;
        let output = y.clone();
        self.steps_since_refresh += 1;
        self.last_flops = self.flop_delta(&before);
        Ok(StepOutput {
            increment,
            output,
            flops: self.last_flops.clone(),
            refresh_due: self.refresh_due(),
        })
    }

    /// Largest absolute difference between the integrated output and `oracle`.
    pub fn drift(&self, oracle: &DenseTensor) -> Result<f32> {
        self.y.as_ref().ok_or(Error::NotInitialized)?.max_abs_diff(oracle)
    }

    /// FLOPs accumulated since construction or the last [`Graph::reset_flops`].
    pub fn flop_report(&self) -> FlopReport {
        let nodes: Vec<NodeFlops> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, Kind::Conv { .. } | Kind::Linear { .. }))
            .map(|n| NodeFlops {
                id: n.id.clone(),
                op: n.op,
                performed: n.flops.performed,
                dense_equiv: n.flops.dense_equiv,
            })
            .collect();
        let mut total = FlopCounter::default();
        for n in &nodes {
            total.add(FlopCounter {
                performed: n.performed,
                dense_equiv: n.dense_equiv,
            });
        }
        FlopReport { nodes, total }
    }

    /// FLOPs of the most recent dense pass or incremental step.
    pub fn last_flops(&self) -> &FlopReport {
        &self.last_flops
    }

    pub fn reset_flops(&mut self) {
        for n in &mut self.nodes {
            n.flops = FlopCounter::default();
        }
    }

    /// Per-node tile sparsity of the last incremental step.
    pub fn sparsity(&self) -> Vec<NodeSparsity> {
        self.nodes
            .iter()
            .map(|n| NodeSparsity {
                id: n.id.clone(),
                op: n.op,
                input_false_fraction: n.last_in_false,
                output_false_fraction: n.last_out_false,
            })
            .collect()
    }

    /// Current rounding multiple of a sparsification node.
    pub fn sparsify_k(&self, id: &str) -> Option<f64> {
        self.nodes.iter().find(|n| n.id == id).and_then(|n| match &n.kind {
            Kind::Sparsify(s) => Some(s.k()),
            _ => None,
        })
    }

    fn flop_snapshot(&self) -> Vec<FlopCounter> {
        self.nodes.iter().map(|n| n.flops).collect()
    }

    fn flop_delta(&self, before: &[FlopCounter]) -> FlopReport {
        let mut report = FlopReport::default();
        for (n, b) in self.nodes.iter().zip(before) {
            if !matches!(n.kind, Kind::Conv { .. } | Kind::Linear { .. }) {
                continue;
            }
            let d = FlopCounter {
                performed: n.flops.performed - b.performed,
                dense_equiv: n.flops.dense_equiv - b.dense_equiv,
            };
            report.total.add(d);
            report.nodes.push(NodeFlops {
                id: n.id.clone(),
                op: n.op,
                performed: d.performed,
                dense_equiv: d.dense_equiv,
            });
        }
        report
    }
}

fn act(f: Activation, shape: Shape) -> Kind {
    Kind::Act {
        f,
        acc: AccState::new(shape),
    }
}
