//! Command-line front end: train encoders, evaluate the ablation grid,
//! serve the decoder, run the adaptive edge, simulate scenarios on the
//! virtual clock, and benchmark a performance profile.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 protocol
//! errors, 4 model/codec errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use slimsplit::controller::{ConfigPoint, PerfRow, PerfTable, PERF_TABLE_CSV_HEADER};
use slimsplit::model::ensemble_forward;
use slimsplit::netsim::{parse_walk_csv, ChannelModel};
use slimsplit::protocol::data_payload_len;
use slimsplit::runtime::{
    breakdown_csv, decision_jsonl, edge_connect, modeled_perf_table, run_ablation_grid,
    run_dynamic, run_static_grid, serve, static_grid_csv, AblationConfig, DynamicScenario,
    RunConfig, RunRole, RuntimeError,
};
use slimsplit::train::{Split, ToyDataset, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "slimsplit",
    version,
    about = "Adaptive split computing: slimmable ensemble encoders on the edge, \
             a shared decoder on the server, and a deadline-aware controller \
             picking the (size, bits) operating point per frame.",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a slimmable ensemble encoder against the frozen teacher.
    Train(TrainArgs),
    /// Train the ablation arms and write the validation-metric grid CSV.
    EvalGrid(EvalGridArgs),
    /// Serve decode requests over TCP.
    Serve(ServeArgs),
    /// Run the adaptive edge loop against a server.
    Edge(EdgeArgs),
    /// Simulate a scenario on the virtual clock (no sockets, no sleep).
    Simulate(SimulateArgs),
    /// Measure encode/decode times and write a performance profile CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// RNG seed for weights, data and size sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest ensemble size the model supports (N).
    #[arg(long, default_value_t = 4)]
    ensemble_size: usize,
    /// Sizes evaluated per step (S): the extremes plus S-2 random draws.
    #[arg(long, default_value_t = 4)]
    sizes_per_step: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    /// Halve the learning rate every this many epochs; 0 keeps it constant.
    #[arg(long, default_value_t = 5)]
    lr_halving_period: u32,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Disable the uniform-noise quantization surrogate.
    #[arg(long)]
    no_regularize: bool,
    /// Train through hard quantization at this bit depth instead of
    /// noise (straight-through gradients); 0 disables.
    #[arg(long, default_value_t = 0)]
    hard_quant_bits: u8,
    /// Training scenes to generate.
    #[arg(long, default_value_t = 400)]
    train_samples: usize,
    /// Square scene resolution in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSONL training log (one record per step).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalGridArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    resolution: usize,
    #[arg(long, default_value_t = 400)]
    train_samples: usize,
    #[arg(long, default_value_t = 64)]
    val_samples: usize,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Ensemble capacity of the grid's ensemble rows.
    #[arg(long, default_value_t = 4)]
    ensemble_n: usize,
    /// Where to write the grid CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:9470")]
    listen: String,
    /// Trained checkpoint; omitted builds a fresh seeded model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ensemble capacity the config grid assumes.
    #[arg(long, default_value_t = 4)]
    model_n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Exit after serving this many sessions; 0 serves forever.
    #[arg(long, default_value_t = 0)]
    max_conns: usize,
}

#[derive(Args)]
struct EdgeArgs {
    /// Server address to connect to.
    #[arg(long)]
    connect: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    model_n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 400.0)]
    deadline_ms: f64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Directory of raw images; omitted generates frames procedurally.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Performance profile CSV; omitted uses the modeled desk profile.
    #[arg(long)]
    perf_table: Option<PathBuf>,
    /// Channel-estimate EWMA weight.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 250_000.0)]
    initial_rate_bps: f64,
    /// Propagation delay assumed when attributing RTT residue.
    #[arg(long, default_value_t = 20.0)]
    assumed_delay_ms: f64,
    /// Per-frame decision JSONL.
    #[arg(long)]
    decision_log: Option<PathBuf>,
    /// Per-frame RTT breakdown CSV.
    #[arg(long)]
    breakdown_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Hold each config fixed and emit the static RTT grid instead of
    /// the adaptive walk.
    #[arg(long)]
    r#static: bool,
    #[arg(long, default_value_t = 400.0)]
    deadline_ms: f64,
    /// Walk schedule CSV (t_ms,distance_m); omitted uses the standard
    /// five-plateau 1->9 m walk.
    #[arg(long)]
    walk: Option<PathBuf>,
    #[arg(long, default_value_t = 220)]
    frames: usize,
    /// Frames averaged per config in static mode.
    #[arg(long, default_value_t = 30)]
    frames_per_config: usize,
    /// Constant link rate for static mode (B/s).
    #[arg(long, default_value_t = 80_000.0)]
    rate_bps: f64,
    #[arg(long, default_value_t = 20.0)]
    delay_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_pct: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 250_000.0)]
    initial_rate_bps: f64,
    /// Decision JSONL output (dynamic mode).
    #[arg(long)]
    decision_log: Option<PathBuf>,
    /// RTT breakdown CSV output (dynamic mode).
    #[arg(long)]
    breakdown_csv: Option<PathBuf>,
    /// Static grid CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Which configs to profile; only "all" (the 16-point grid) is
    /// recognized today.
    #[arg(long, default_value = "all")]
    configs: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    model_n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Timing repetitions per config (median is recorded).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Where to write the profile CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &RuntimeError) -> u8 {
    use slimsplit::train::TrainError;
    match e {
        RuntimeError::Protocol(_) => 3,
        RuntimeError::RemoteDecode(_) => 3,
        RuntimeError::Model(_) | RuntimeError::Codec(_) => 4,
        RuntimeError::Train(TrainError::Config(_)) => 2,
        RuntimeError::Train(_) => 4,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<(), RuntimeError> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::EvalGrid(args) => cmd_eval_grid(args),
        Cmd::Serve(args) => cmd_serve(args),
        Cmd::Edge(args) => cmd_edge(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), RuntimeError> {
    let config = TrainConfig {
        ensemble_size: args.ensemble_size,
        sizes_per_step: args.sizes_per_step,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        lr_halving_period_epochs: match args.lr_halving_period {
            0 => None,
            p => Some(p),
        },
        batch_size: args.batch_size,
        seed: args.seed,
        regularize: !args.no_regularize,
        hard_quant_bits: match args.hard_quant_bits {
            0 => None,
            b => Some(b),
        },
    };
    let data = ToyDataset::new(args.seed, Split::Train, args.train_samples, args.resolution);
    let mut trainer = Trainer::<f64>::new(config)?;
    let summary = match args.log {
        Some(path) => {
            let mut log = std::io::BufWriter::new(fs::File::create(path)?);
            trainer.run(&data, Some(&mut log))?
        }
        None => trainer.run::<Vec<u8>>(&data, None)?,
    };
    slimsplit::model::save_checkpoint(&trainer.model, &args.out)?;
    println!(
        "final loss {:.4} over {} steps; checkpoint written to {}",
        summary.final_loss,
        summary.steps,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval_grid(args: EvalGridArgs) -> Result<(), RuntimeError> {
    let cfg = AblationConfig {
        seed: args.seed,
        resolution: args.resolution,
        train_samples: args.train_samples,
        val_samples: args.val_samples,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        ensemble_n: args.ensemble_n,
    };
    let grid = run_ablation_grid(&cfg)?;
    fs::write(&args.out, grid.to_csv())?;
    println!("grid written to {}", args.out.display());
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<(), RuntimeError> {
    let run = RunConfig {
        role: RunRole::Server,
        checkpoint: args.checkpoint,
        model_n: args.model_n,
        seed: args.seed,
        ..RunConfig::default()
    };
    let model = Arc::new(run.load_model()?);
    let max = if args.max_conns == 0 { None } else { Some(args.max_conns) };
    println!("serving on {}", args.listen);
    serve(&args.listen, model, max)
}

fn cmd_edge(args: EdgeArgs) -> Result<(), RuntimeError> {
    let run = RunConfig {
        role: RunRole::Edge,
        checkpoint: args.checkpoint,
        model_n: args.model_n,
        seed: args.seed,
        deadline_ms: args.deadline_ms,
        frames: args.frames,
        input_dir: args.input_dir,
        resolution: args.resolution,
        endpoint: args.connect,
        decision_log: args.decision_log,
        breakdown_log: args.breakdown_csv,
        perf_table: args.perf_table,
        alpha: args.alpha,
        initial_rate_bps: args.initial_rate_bps,
        assumed_delay_ms: args.assumed_delay_ms,
    };
    let outcome = edge_connect(&run)?;
    let misses = outcome
        .breakdowns
        .iter()
        .filter(|b| b.total_ms > run.deadline_ms)
        .count();
    println!(
        "{} frames, {} deadline misses, final config ({}, {})",
        outcome.breakdowns.len(),
        misses,
        outcome.decisions.last().map(|d| d.s).unwrap_or(0),
        outcome.decisions.last().map(|d| d.b).unwrap_or(0),
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), RuntimeError> {
    if args.r#static {
        let table = modeled_perf_table();
        let channel = ChannelModel::constant(args.rate_bps, args.delay_ms);
        let rows = run_static_grid(&table, &channel, args.frames_per_config)?;
        let csv = static_grid_csv(&rows);
        match &args.out {
            Some(path) => {
                fs::write(path, &csv)?;
                println!("static grid written to {}", path.display());
            }
            None => print!("{csv}"),
        }
        return Ok(());
    }
    let walk = match &args.walk {
        Some(path) => parse_walk_csv(&fs::read_to_string(path)?)?,
        None => DynamicScenario::standard_walk(70_000.0),
    };
    let scenario = DynamicScenario {
        walk,
        deadline_ms: args.deadline_ms,
        frames: args.frames,
        delay_ms: args.delay_ms,
        jitter_pct: args.jitter_pct,
        seed: args.seed,
        alpha: args.alpha,
        initial_rate_bps: args.initial_rate_bps,
    };
    let outcome = run_dynamic(&scenario)?;
    if let Some(path) = &args.decision_log {
        fs::write(path, decision_jsonl(&outcome.decisions))?;
    }
    if let Some(path) = &args.breakdown_csv {
        fs::write(path, breakdown_csv(&outcome.breakdowns))?;
    }
    let misses = outcome
        .breakdowns
        .iter()
        .filter(|b| b.total_ms > scenario.deadline_ms)
        .count();
    println!(
        "{} frames simulated, {} deadline misses ({:.1}%)",
        outcome.breakdowns.len(),
        misses,
        100.0 * misses as f64 / outcome.breakdowns.len().max(1) as f64
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), RuntimeError> {
    if args.configs != "all" {
        return Err(RuntimeError::Config(format!(
            "unknown --configs value {:?}; expected \"all\"",
            args.configs
        )));
    }
    if args.reps == 0 {
        return Err(RuntimeError::Config("--reps must be positive".into()));
    }
    let run = RunConfig {
        checkpoint: args.checkpoint,
        model_n: args.model_n,
        seed: args.seed,
        ..RunConfig::default()
    };
    let model = run.load_model()?;
    let x = ToyDataset::new(args.seed, Split::Val, 1, args.resolution).sample::<f64>(0).0;

    let median_ms = |samples: &mut Vec<f64>| {
        samples.sort_by(f64::total_cmp);
        samples[samples.len() / 2]
    };

    // One shared decoder: measure its cost once.
    let z = ensemble_forward(&model.encoder, &x, 1)?;
    let mut dims = [0u16; 3];
    for (d, &v) in dims.iter_mut().zip(z.shape()) {
        *d = u16::try_from(v)
            .map_err(|_| RuntimeError::Config(format!("dim {v} exceeds u16")))?;
    }
    let mut decode_samples = Vec::with_capacity(args.reps);
    for _ in 0..args.reps {
        let t0 = std::time::Instant::now();
        model.decode_tensor(&z)?;
        decode_samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let decode_ms = median_ms(&mut decode_samples);

    // Timing columns are measured; the metric column carries the
    // reference profile until an eval-grid run replaces it.
    let reference = modeled_perf_table();
    let mut table = PerfTable::new();
    for s in 1..=args.model_n.min(4) as u8 {
        let mut samples = Vec::with_capacity(args.reps);
        for _ in 0..args.reps {
            let t0 = std::time::Instant::now();
            ensemble_forward(&model.encoder, &x, s as usize)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let encode_ms = median_ms(&mut samples);
        for b in 1..=4u8 {
            let cfg = ConfigPoint { s, b };
            table.insert(
                cfg,
                PerfRow {
                    encode_time_ms: encode_ms,
                    decode_time_ms: decode_ms,
                    payload_bytes: data_payload_len(dims, b),
                    metric: reference.get(cfg).map(|r| r.metric).unwrap_or(0.0),
                },
            );
        }
    }
    fs::write(&args.out, table.to_csv())?;
    println!("{} profile written to {}", PERF_TABLE_CSV_HEADER, args.out.display());
    Ok(())
}
