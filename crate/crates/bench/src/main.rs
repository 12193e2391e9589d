use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evdelta::events::{read_events, write_events, EncoderKind, EventFormat, SensorSize};
use evdelta::graph::{ModelSpec, WeightStore};
use evdelta::models::{plain_cnn, unet, CnnConfig, Placement, UNetConfig, UNetVariant};
use evdelta::TileShape;
use evdelta_bench::{generate, run, sweep, write_sweep_csv, Mode, RunConfig, SceneConfig, SweepParam};

#[derive(Parser)]
#[command(name = "evdelta", version, about = "Incremental CNN inference on event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-edge event stream.
    Synth(SynthArgs),
    /// Write a model description built from a reference architecture.
    Model(ModelArgs),
    /// Write seeded random weights for a model.
    GenWeights(GenWeightsArgs),
    /// Replay an event stream through a model.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "both")]
        mode: Mode,
    },
    /// Repeat `run` over several values of one parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "both")]
        mode: Mode,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; shifts are in microseconds.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Per-step drift of the incremental output against a dense oracle.
    Drift {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 150_000)]
    duration_us: u64,
    /// Mean events per second.
    #[arg(long, default_value_t = 100_000.0)]
    rate: f64,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 180)]
    height: u16,
    #[arg(long, default_value_t = 240)]
    width: u16,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Output path; `.csv` writes CSV, anything else EVB.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Cnn,
    Unet,
    UnetDelayed,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    EveryConv,
    EveryPair,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    kind: ModelKind,
    /// Conv blocks of the plain CNN.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Encoder levels of the U-Nets.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    in_channels: usize,
    #[arg(long, default_value_t = 180)]
    height: usize,
    #[arg(long, default_value_t = 240)]
    width: usize,
    #[arg(long, default_value_t = 0.1)]
    tp: f32,
    #[arg(long, default_value = "6x6", value_parser = parse_tile)]
    tile: TileShape,
    #[arg(long, value_enum, default_value = "every-conv")]
    placement: PlacementArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write random weights to this manifest.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    model: PathBuf,
    /// Weight manifest; random weights from `--seed` when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    events: PathBuf,
    /// `count`, `timestamp` or `voxel:B`.
    #[arg(long, default_value = "count")]
    encoder: EncoderKind,
    #[arg(long, default_value_t = 50_000)]
    window_us: u64,
    #[arg(long, default_value_t = 1_000)]
    shift_us: u64,
    /// Overrides the threshold of every sparsification node.
    #[arg(long)]
    tp: Option<f32>,
    /// Steps between refreshes; `inf` disables refresh.
    #[arg(long, value_parser = parse_refresh)]
    refresh_n: Option<RefreshArg>,
    #[arg(long, value_parser = parse_tile)]
    tile: Option<TileShape>,
    /// Cap on the number of windows after the first.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sensor height for CSV input without a header size.
    #[arg(long)]
    height: Option<u16>,
    #[arg(long)]
    width: Option<u16>,
    /// Output CSV; a `.toml` summary is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct RefreshArg(Option<usize>);

fn parse_refresh(s: &str) -> Result<RefreshArg, String> {
    match s {
        "inf" | "never" | "0" => Ok(RefreshArg(None)),
        _ => s
            .parse::<usize>()
            .map(|n| RefreshArg(Some(n)))
            .map_err(|_| format!("expected a step count or `inf`, got `{s}`")),
    }
}

fn parse_tile(s: &str) -> Result<TileShape, String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad tile height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad tile width in `{s}`"))?;
    TileShape::new(h, w).map_err(|e| e.to_string())
}

struct Session {
    spec: ModelSpec,
    weights: WeightStore,
    events: evdelta::events::EventStream,
    cfg: RunConfig,
}

fn session(c: &CommonArgs, mode: Mode) -> anyhow::Result<Session> {
    let mut spec = ModelSpec::load(&c.model)?;
    if let Some(tp) = c.tp {
        spec = spec.with_t_p(tp);
    }
    if let Some(tile) = c.tile {
        spec = spec.with_tile(tile);
    }
    if let Some(RefreshArg(n)) = c.refresh_n {
        spec = spec.with_refresh_n(n);
    }
    let weights = match &c.weights {
        Some(p) => WeightStore::load(p).with_context(|| format!("loading weights {}", p.display()))?,
        None => WeightStore::random(&spec, c.seed)?,
    };
    let sensor = match (c.height, c.width) {
        (Some(h), Some(w)) => Some(SensorSize::new(h, w)),
        (None, None) => None,
        _ => bail!("--height and --width must be given together"),
    };
    let events = read_events(&c.events, EventFormat::from_path(&c.events), sensor)
        .with_context(|| format!("reading events {}", c.events.display()))?;
    let cfg = RunConfig {
        encoder: c.encoder,
        window_us: c.window_us,
        shift_us: c.shift_us,
        mode,
        max_steps: c.steps,
        seed: c.weights.is_none().then_some(c.seed),
    };
    Ok(Session {
        spec,
        weights,
        events,
        cfg,
    })
}

fn create(path: &Path) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let stream = generate(&SceneConfig {
                seed: a.seed,
                duration_us: a.duration_us,
                rate_hz: a.rate,
                n_objects: a.objects,
                sensor: SensorSize::new(a.height, a.width),
                noise_fraction: a.noise,
            })?;
            write_events(&a.out, EventFormat::from_path(&a.out), &stream)
                .with_context(|| format!("writing {}", a.out.display()))?;
            println!("wrote {} events to {}", stream.len(), a.out.display());
        }
        Command::Model(a) => {
            let input_shape = [a.in_channels, a.height, a.width];
            let spec = match a.kind {
                ModelKind::Cnn => plain_cnn(&CnnConfig {
                    input_shape,
                    depth: a.depth,
                    base_channels: a.channels,
                    t_p: a.tp,
                    tile: a.tile,
                    placement: match a.placement {
                        PlacementArg::EveryConv => Placement::EveryConv,
                        PlacementArg::EveryPair => Placement::EveryPair,
                    },
                    ..Default::default()
                })?,
                ModelKind::Unet | ModelKind::UnetDelayed => unet(&UNetConfig {
                    variant: match a.kind {
                        ModelKind::UnetDelayed => UNetVariant::Delayed,
                        _ => UNetVariant::Standard,
                    },
                    input_shape,
                    levels: a.levels,
                    base_channels: a.channels,
                    t_p: a.tp,
                    tile: a.tile,
                    ..Default::default()
                })?,
            };
            spec.save(&a.out)?;
            println!(
                "wrote {} ({} nodes, {} parameters) to {}",
                spec.name,
                spec.nodes.len(),
                spec.parameter_count()?,
                a.out.display()
            );
            if let Some(w) = a.weights_out {
                WeightStore::random(&spec, a.seed)?.save(&w)?;
                println!("wrote weights to {}", w.display());
            }
        }
        Command::GenWeights(a) => {
            let spec = ModelSpec::load(&a.model)?;
            let store = WeightStore::random(&spec, a.seed)?;
            store.save(&a.out)?;
            println!("wrote {} tensors to {}", store.len(), a.out.display());
        }
        Command::Run { common, mode } => {
            let s = session(&common, mode)?;
            let report = run(&s.spec, &s.weights, &s.events, &s.cfg)?;
            if let Some(out) = &common.out {
                report.save(out)?;
            }
            print!("{}", report.summary().to_toml()?);
        }
        Command::Sweep {
            common,
            mode,
            param,
            values,
        } => {
            let s = session(&common, mode)?;
            let rows = sweep(&s.spec, &s.weights, &s.events, &s.cfg, param, &values)?;
            match &common.out {
                Some(out) => write_sweep_csv(&rows, create(out)?)?,
                None => write_sweep_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Drift { common } => {
            let s = session(&common, Mode::Both)?;
            let report = run(&s.spec, &s.weights, &s.events, &s.cfg)?;
            match &common.out {
                Some(out) => report.write_drift_csv(create(out)?)?,
                None => report.write_drift_csv(std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
