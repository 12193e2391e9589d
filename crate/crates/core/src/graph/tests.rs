use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dense::UpsampleMode;
use crate::error::Error;
use crate::tensor::{DenseTensor, IncrementTensor, Shape, TileShape};

fn conv(id: &str, input: &str, c: usize, stride: usize) -> NodeSpec {
    NodeSpec::new(
        id,
        OpSpec::Conv2d {
            out_channels: c,
            kernel: 3,
            stride,
            padding: 1,
            bias: true,
        },
        &[input],
    )
}

fn sp(id: &str, input: &str, t_p: f32) -> NodeSpec {
    NodeSpec::new(id, OpSpec::Sparsify { t_p, ema_decay: 0.9 }, &[input])
}

/// Small graph touching every operator.
fn mixed(t_p: f32) -> ModelSpec {
    ModelSpec {
        name: "mixed".into(),
        input_shape: [2, 16, 16],
        tile: [4, 4],
        output: "out".into(),
        refresh_n: 0,
        nodes: vec![
            sp("s0", "input", t_p),
            conv("c0", "s0", 4, 1),
            NodeSpec::new("r0", OpSpec::Relu, &["c0"]),
            NodeSpec::new("p0", OpSpec::MaxPool { window: 2, stride: 2 }, &["r0"]),
            sp("s1", "p0", t_p),
            conv("c1", "s1", 4, 1),
            NodeSpec::new("t1", OpSpec::Tanh, &["c1"]),
            NodeSpec::new(
                "u1",
                OpSpec::Upsample {
                    factor: 2,
                    mode: UpsampleMode::Bilinear,
                },
                &["t1"],
            ),
            NodeSpec::new("a", OpSpec::Add, &["u1", "r0"]),
            NodeSpec::new("g", OpSpec::Sigmoid, &["r0"]),
            NodeSpec::new("m", OpSpec::Mul, &["a", "g"]),
            NodeSpec::new("cat", OpSpec::Concat, &["m", "r0"]),
            NodeSpec::new("lr", OpSpec::LeakyRelu { alpha: 0.1 }, &["cat"]),
            conv("c2", "lr", 3, 2),
            NodeSpec::new(
                "out",
                OpSpec::Linear {
                    out_features: 5,
                    bias: true,
                },
                &["c2"],
            ),
        ],
    }
}

fn random_input(shape: Shape, rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Perturbs a few small rectangles of `x`.
fn perturb(x: &DenseTensor, rng: &mut ChaCha8Rng) -> DenseTensor {
    let mut y = x.clone();
    let s = x.shape();
    for _ in 0..2 {
        let c = rng.gen_range(0..s.c);
        let y0 = rng.gen_range(0..s.h - 3);
        let x0 = rng.gen_range(0..s.w - 3);
        for yy in y0..y0 + 3 {
            for xx in x0..x0 + 3 {
                y.set(c, yy, xx, y.get(c, yy, xx) + rng.gen_range(-0.5..0.5));
            }
        }
    }
    y
}

#[test]
fn incremental_matches_dense_without_sparsification() {
    let spec = mixed(0.0);
    let weights = WeightStore::random(&spec, 3).unwrap();
    let mut g = Graph::build(&spec, &weights).unwrap();
    let mut oracle = g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = random_input(g.input_shape(), &mut rng);
    g.dense_pass(&x).unwrap();
    for _ in 0..30 {
        let next = perturb(&x, &mut rng);
        let dx = IncrementTensor::new(next.sub(&x).unwrap(), g.tile());
        let step = g.incr_step(&dx).unwrap();
        x = next;
        let want = oracle.dense_pass(&x).unwrap();
        let err = step.output.max_abs_diff(&want).unwrap();
        assert!(err <= 1e-4, "drift {err}");
        assert_eq!(g.drift(&want).unwrap(), err);
    }
}

#[test]
fn sparse_inputs_skip_work() {
    let spec = mixed(0.0);
    let weights = WeightStore::random(&spec, 3).unwrap();
    let mut g = Graph::build(&spec, &weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(g.input_shape(), &mut rng);
    g.dense_pass(&x).unwrap();
    assert_eq!(g.last_flops().reduction_pct(), 0.0);
    let mut d = DenseTensor::zeros(g.input_shape());
    d.set(0, 1, 1, 0.5);
    let step = g.incr_step(&IncrementTensor::new(d, g.tile())).unwrap();
    let c0 = step.flops.node("c0").unwrap();
    assert!(c0.performed > 0 && c0.performed < c0.dense_equiv / 4);
    let zero = IncrementTensor::zeros(g.input_shape(), g.tile());
    let step = g.incr_step(&zero).unwrap();
    assert_eq!(step.flops.node("c0").unwrap().performed, 0);
    assert_eq!(step.increment.mask().count_true(), 5);
    let report = g.flop_report();
    assert_eq!(report.nodes.len(), 4);
    g.reset_flops();
    assert_eq!(g.flop_report().total.dense_equiv, 0);
}

#[test]
fn step_before_dense_pass_fails() {
    let spec = mixed(0.1);
    let mut g = Graph::build(&spec, &WeightStore::random(&spec, 0).unwrap()).unwrap();
    let zero = IncrementTensor::zeros(g.input_shape(), g.tile());
    assert!(matches!(g.incr_step(&zero), Err(Error::NotInitialized)));
    let bad_tile = IncrementTensor::zeros(g.input_shape(), TileShape::new(3, 3).unwrap());
    g.dense_pass(&DenseTensor::zeros(g.input_shape())).unwrap();
    assert!(matches!(g.incr_step(&bad_tile), Err(Error::TileMismatch(..))));
}

#[test]
fn build_errors_are_distinct() {
    let spec = mixed(0.1);
    let full = WeightStore::random(&spec, 0).unwrap();

    let mut missing = WeightStore::new();
    for name in full.names().filter(|n| *n != "c1.bias") {
        let t = full.get(name).unwrap();
        missing.insert(name, t.shape.clone(), t.data.to_vec()).unwrap();
    }
    assert!(matches!(Graph::build(&spec, &missing), Err(Error::MissingWeight(n)) if n == "c1.bias"));

    let mut extra = full.clone();
    extra.insert("ghost.weight", vec![1], vec![0.0]).unwrap();
    assert!(matches!(Graph::build(&spec, &extra), Err(Error::UnusedWeight(n)) if n == "ghost.weight"));

    let mut wrong = WeightStore::new();
    for name in full.names() {
        let t = full.get(name).unwrap();
        let shape = if name == "c0.bias" { vec![2, 2] } else { t.shape.clone() };
        wrong.insert(name, shape, t.data.to_vec()).unwrap();
    }
    assert!(matches!(Graph::build(&spec, &wrong), Err(Error::WeightShape { .. })));

    let mut cyclic = spec.clone();
    cyclic.nodes[0].inputs = vec!["out".into()];
    assert!(matches!(Graph::build(&cyclic, &full), Err(Error::Cycle(_))));

    let mut bad_shape = spec.clone();
    bad_shape.nodes[8].inputs = vec!["u1".into(), "p0".into()];
    assert!(matches!(Graph::build(&bad_shape, &full), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn refresh_schedule() {
    let spec = mixed(0.05).with_refresh_n(Some(3));
    let mut g = Graph::build(&spec, &WeightStore::random(&spec, 0).unwrap()).unwrap();
    let x = DenseTensor::full(g.input_shape(), 0.25);
    g.dense_pass(&x).unwrap();
    let zero = IncrementTensor::zeros(g.input_shape(), g.tile());
    assert!(!g.incr_step(&zero).unwrap().refresh_due);
    assert!(g.incr_step(&zero).unwrap().refresh_due);
    g.refresh(&x).unwrap();
    assert_eq!(g.steps_since_refresh(), 0);

    g.set_refresh_n(Some(1)).unwrap();
    assert!(g.refresh_due());
    g.set_refresh_n(None).unwrap();
    assert!(!g.refresh_due());
    assert!(g.set_refresh_n(Some(0)).is_err());
}

#[test]
fn refresh_restores_dense_output() {
    let spec = mixed(0.2);
    let weights = WeightStore::random(&spec, 5).unwrap();
    let mut g = Graph::build(&spec, &weights).unwrap();
    let mut oracle = g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = random_input(g.input_shape(), &mut rng);
    g.dense_pass(&x).unwrap();
    for _ in 0..10 {
        let next = perturb(&x, &mut rng);
        g.incr_step(&IncrementTensor::new(next.sub(&x).unwrap(), g.tile()))
            .unwrap();
        x = next;
    }
    let want = oracle.dense_pass(&x).unwrap();
    assert!(g.drift(&want).unwrap() > 0.0);
    g.refresh(&x).unwrap();
    assert_eq!(g.drift(&want).unwrap(), 0.0);
}

#[test]
fn sparsify_threshold_is_seeded_by_dense_pass() {
    let spec = mixed(0.1);
    let mut g = Graph::build(&spec, &WeightStore::random(&spec, 0).unwrap()).unwrap();
    assert_eq!(g.sparsify_k("s0"), Some(0.0));
    let x = DenseTensor::full(g.input_shape(), 1.0);
    g.dense_pass(&x).unwrap();
    let k = g.sparsify_k("s0").unwrap();
    assert!((k - f64::from(0.1f32) * 512f64.sqrt()).abs() < 1e-9, "{k}");
    assert_eq!(g.sparsify_k("c0"), None);
}
