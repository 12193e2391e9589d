//! Sliding-window replay of an event stream through a model.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use evdelta::events::{encode, slice_window, step_increment, EncoderKind, EventStream};
use evdelta::graph::{Graph, ModelSpec, OpSpec, WeightStore};
use evdelta::DenseTensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dense forward pass on every window.
    Dense,
    /// Incremental steps with periodic refresh.
    Incr,
    /// Incremental run plus a dense oracle for drift.
    Both,
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "incr" => Ok(Mode::Incr),
            "both" => Ok(Mode::Both),
            _ => bail!("unknown mode `{s}` (dense, incr, both)"),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dense => "dense",
            Mode::Incr => "incr",
            Mode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderKind,
    pub window_us: u64,
    pub shift_us: u64,
    pub mode: Mode,
    /// Cap on the number of windows after the first.
    pub max_steps: Option<usize>,
    /// Seed the weights were drawn with, for the report only.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::EventCount,
            window_us: 50_000,
            shift_us: 1_000,
            mode: Mode::Both,
            max_steps: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub encoder: String,
    pub window_us: u64,
    pub shift_us: u64,
    /// Shared `t_p` of all sparsification nodes, absent when they differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_p: Option<f32>,
    pub tile: String,
    /// 0 when refresh is disabled.
    pub refresh_n: usize,
    pub mode: Mode,
}

/// One window. Step 0 is the initial dense pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub tau_us: u64,
    pub events: usize,
    /// The engine ran a dense pass on this step.
    pub refresh: bool,
    pub wall_time_dense_us: Option<f64>,
    pub wall_time_incr_us: Option<f64>,
    pub performed_flops: u64,
    pub dense_equiv_flops: u64,
    /// False-tile fraction of the encoder increment.
    pub input_false_frac: Option<f64>,
    /// False-tile fraction of the increment entering each convolution.
    pub layer_false_frac: Vec<Option<f64>>,
    pub drift: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub meta: RunMeta,
    /// Convolution ids, matching [`StepRecord::layer_false_frac`].
    pub layers: Vec<String>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub steps: usize,
    pub refreshes: usize,
    pub performed_flops: u64,
    pub dense_equiv_flops: u64,
    pub flop_reduction_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_wall_time_dense_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_wall_time_incr_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_input_false_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_input_false_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub meta: RunMeta,
    pub totals: Totals,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl BenchReport {
    pub fn summary(&self) -> Summary {
        let r = &self.records;
        let performed: u64 = r.iter().map(|s| s.performed_flops).sum();
        let dense: u64 = r.iter().map(|s| s.dense_equiv_flops).sum();
        let reduction = if dense == 0 {
            0.0
        } else {
            100.0 * (1.0 - performed as f64 / dense as f64)
        };
        let totals = Totals {
            steps: r.len(),
            refreshes: r.iter().filter(|s| s.refresh).count(),
            performed_flops: performed,
            dense_equiv_flops: dense,
            flop_reduction_pct: reduction,
            mean_drift: mean(r.iter().filter_map(|s| s.drift.map(f64::from))),
            max_drift: r.iter().filter_map(|s| s.drift.map(f64::from)).reduce(f64::max),
            mean_wall_time_dense_us: mean(r.iter().filter_map(|s| s.wall_time_dense_us)),
            mean_wall_time_incr_us: mean(r.iter().filter_map(|s| s.wall_time_incr_us)),
            mean_input_false_frac: mean(r.iter().filter_map(|s| s.input_false_frac)),
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, id)| LayerSummary {
                id: id.clone(),
                mean_input_false_frac: mean(r.iter().filter_map(|s| s.layer_false_frac[i])),
            })
            .collect();
        Summary {
            meta: self.meta.clone(),
            totals,
            layers,
        }
    }

    /// Mean false-tile fraction entering convolution `id` over incremental steps.
    pub fn layer_mean_false_frac(&self, id: &str) -> Option<f64> {
        let i = self.layers.iter().position(|l| l == id)?;
        mean(self.records.iter().filter_map(|s| s.layer_false_frac[i]))
    }

    /// One row per step. Wall-time columns are the only nondeterministic ones.
    pub fn write_csv<W: Write>(&self, out: W) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step",
            "tau_us",
            "events",
            "refresh",
            "wall_time_dense_us",
            "wall_time_incr_us",
            "performed_flops",
            "dense_equiv_flops",
            "input_false_frac",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        if self.meta.mode == Mode::Both {
            header.push("drift".into());
        }
        header.extend(self.layers.iter().map(|l| format!("false_frac:{l}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.records {
            let mut row = vec![
                s.step.to_string(),
                s.tau_us.to_string(),
                s.events.to_string(),
                u8::from(s.refresh).to_string(),
                opt(s.wall_time_dense_us),
                opt(s.wall_time_incr_us),
                s.performed_flops.to_string(),
                s.dense_equiv_flops.to_string(),
                opt(s.input_false_frac),
            ];
            if self.meta.mode == Mode::Both {
                row.push(s.drift.map(|d| d.to_string()).unwrap_or_default());
            }
            row.extend(s.layer_false_frac.iter().map(|v| opt(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-step drift with refresh markers.
    pub fn write_drift_csv<W: Write>(&self, out: W) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "tau_us", "refresh", "drift"])?;
        for s in &self.records {
            w.write_record([
                s.step.to_string(),
                s.tau_us.to_string(),
                u8::from(s.refresh).to_string(),
                s.drift.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<path>` as CSV and the summary next to it with a `.toml` extension.
    pub fn save(&self, csv_path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let summary_path = csv_path.with_extension("toml");
        std::fs::write(&summary_path, self.summary().to_toml()?)
            .with_context(|| format!("writing {}", summary_path.display()))?;
        Ok(())
    }
}

impl Summary {
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn common_t_p(spec: &ModelSpec) -> Option<f32> {
    let mut values = spec.nodes.iter().filter_map(|n| match n.op {
        OpSpec::Sparsify { t_p, .. } => Some(t_p),
        _ => None,
    });
    let first = values.next()?;
    values.all(|v| v == first).then_some(first)
}

/// Window end times: the first window ends at `window_us`, later ones every `shift_us`.
pub fn window_ends(events: &EventStream, cfg: &RunConfig) -> Vec<u64> {
    let last = events.last_t().unwrap_or(0);
    let extra = if last > cfg.window_us {
        (last - cfg.window_us).div_ceil(cfg.shift_us) as usize
    } else {
        0
    };
    let extra = cfg.max_steps.map_or(extra, |m| extra.min(m));
    (0..=extra).map(|i| cfg.window_us + i as u64 * cfg.shift_us).collect()
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

/// Replays `events` through the model described by `spec`.
pub fn run(spec: &ModelSpec, weights: &WeightStore, events: &EventStream, cfg: &RunConfig) -> anyhow::Result<BenchReport> {
    ensure!(cfg.window_us > 0 && cfg.shift_us > 0, "window and shift must be positive");
    let input = cfg.encoder.output_shape(events.sensor());
    ensure!(
        input == spec.input(),
        "encoder `{}` produces {input} but model `{}` expects {}",
        cfg.encoder,
        spec.name,
        spec.input()
    );
    let mut graph = Graph::build(spec, weights)?;
    let mut oracle = (cfg.mode == Mode::Both).then(|| graph.clone());
    let tile = graph.tile();
    let layers: Vec<String> = spec.nodes.iter().filter(|n| n.op.is_conv()).map(|n| n.id.clone()).collect();
    let meta = RunMeta {
        model: spec.name.clone(),
        seed: cfg.seed,
        encoder: cfg.encoder.to_string(),
        window_us: cfg.window_us,
        shift_us: cfg.shift_us,
        t_p: common_t_p(spec),
        tile: format!("{}x{}", tile.h, tile.w),
        refresh_n: spec.refresh_interval().unwrap_or(0),
        mode: cfg.mode,
    };

    let mut records = Vec::new();
    let mut prev: Option<DenseTensor> = None;
    for (step, tau) in window_ends(events, cfg).into_iter().enumerate() {
        let window = slice_window(events, tau, cfg.window_us)?;
        let x = encode(&window, cfg.encoder)?;
        let dx = match &prev {
            Some(p) => Some(step_increment(p, &x, tile)?),
            None => None,
        };
        let mut rec = StepRecord {
            step,
            tau_us: tau,
            events: window.len(),
            refresh: true,
            wall_time_dense_us: None,
            wall_time_incr_us: None,
            performed_flops: 0,
            dense_equiv_flops: 0,
            input_false_frac: dx.as_ref().map(|d| d.mask().false_fraction()),
            layer_false_frac: vec![None; layers.len()],
            drift: None,
        };
        match cfg.mode {
            Mode::Dense => {
                let t0 = Instant::now();
                graph.dense_pass(&x)?;
                rec.wall_time_dense_us = Some(micros(t0));
            }
            Mode::Incr | Mode::Both => {
                let t0 = Instant::now();
                match &dx {
                    Some(d) if !graph.refresh_due() => {
                        graph.incr_step(d)?;
                        rec.refresh = false;
                    }
                    _ => {
                        graph.refresh(&x)?;
                    }
                }
                rec.wall_time_incr_us = Some(micros(t0));
                if !rec.refresh {
                    let sparsity = graph.sparsity();
                    for (slot, id) in rec.layer_false_frac.iter_mut().zip(&layers) {
                        *slot = sparsity.iter().find(|s| &s.id == id).and_then(|s| s.input_false_fraction);
                    }
                }
                if let Some(o) = oracle.as_mut() {
                    let t0 = Instant::now();
                    let want = o.dense_pass(&x)?;
                    rec.wall_time_dense_us = Some(micros(t0));
                    rec.drift = Some(graph.drift(&want)?);
                }
            }
        }
        let flops = graph.last_flops();
        rec.performed_flops = flops.total.performed;
        rec.dense_equiv_flops = flops.total.dense_equiv;
        records.push(rec);
        prev = Some(x);
    }
    Ok(BenchReport { meta, layers, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Sparsification threshold of every node.
    TP,
    /// Window shift in microseconds.
    Shift,
}

impl FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "tp" | "t_p" => Ok(SweepParam::TP),
            "shift" => Ok(SweepParam::Shift),
            _ => bail!("unknown sweep parameter `{s}` (tp, shift)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub flop_reduction_pct: f64,
    pub mean_drift: Option<f64>,
    pub mean_wall_time_incr_us: Option<f64>,
    pub mean_input_false_frac: Option<f64>,
}

impl From<&Summary> for SweepRow {
    fn from(s: &Summary) -> Self {
        Self {
            value: 0.0,
            flop_reduction_pct: s.totals.flop_reduction_pct,
            mean_drift: s.totals.mean_drift,
            mean_wall_time_incr_us: s.totals.mean_wall_time_incr_us,
            mean_input_false_frac: s.totals.mean_input_false_frac,
        }
    }
}

/// One [`run`] per value.
pub fn sweep(
    spec: &ModelSpec,
    weights: &WeightStore,
    events: &EventStream,
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
) -> anyhow::Result<Vec<SweepRow>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    values
        .iter()
        .map(|&v| {
            let report = match param {
                SweepParam::TP => {
                    ensure!(v >= 0.0, "t_p must be >= 0, got {v}");
                    run(&spec.clone().with_t_p(v as f32), weights, events, cfg)?
                }
                SweepParam::Shift => {
                    ensure!(v >= 1.0 && v.fract() == 0.0, "shift must be a positive whole number of microseconds, got {v}");
                    let cfg = RunConfig {
                        shift_us: v as u64,
                        ..cfg.clone()
                    };
                    run(spec, weights, events, &cfg)?
                }
            };
            Ok(SweepRow {
                value: v,
                ..SweepRow::from(&report.summary())
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
