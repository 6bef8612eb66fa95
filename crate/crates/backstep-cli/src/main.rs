//! Command-line driver for the transport-equation control toolkit: runs
//! closed-loop simulations, generates kernel datasets, trains the learned
//! kernel operator, and benchmarks it against the direct solve.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical blow-up or
//! divergence, 3 file/input error. Every artifact-writing command records a
//! `manifest.toml` (resolved config + SHA-256 of its input files) in its
//! output directory and refuses to reuse a directory without `--force`.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use backstep::adaptive::{LyapunovConfig, PassiveConfig};
use backstep::bench::{format_table, run_bench, write_csv, BenchConfig};
use backstep::dataset::{self, chebyshev_beta, generate, GenerateConfig, KernelDataset};
use backstep::deeponet::{train, DeepOnetModel, MlpSpec, NeuralKernelOperator, TrainConfig};
use backstep::numerics::{sup_norm, Grid1D, GridFunction};
use backstep::plant::{run_closed_loop, Controller, PlantConfig};
use backstep::volterra::{ExactKernelOperator, KernelOperator};
use backstep::Error;
use clap::{Args, Parser, Subcommand};

use config::{pick, ControllerKind, ResolvedBench, ResolvedDataset, ResolvedSimulate, ResolvedTrain};

#[derive(Parser)]
#[command(
    name = "backstep",
    about = "Adaptive boundary control of a transport PDE with recirculation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a closed-loop (or open-loop) simulation and write trajectory CSVs.
    Simulate(SimulateArgs),
    /// Dataset utilities: generate trajectories or export to CSV.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train the kernel operator on a generated dataset.
    Train(TrainArgs),
    /// Time the direct kernel solve against the trained operator.
    Bench(BenchArgs),
    /// Model utilities.
    Model {
        #[command(subcommand)]
        cmd: ModelCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Simulate adaptive runs and record (estimate, kernel) training pairs.
    Generate(DatasetArgs),
    /// Export a binary dataset to CSV, one row per sample.
    ExportCsv {
        /// Dataset file (.kds) to read.
        #[arg(long)]
        input: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Print a model file's architecture, scaling, and provenance.
    Inspect {
        /// Model file (.bkno) to read.
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSVs and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing manifest in the output directory.
    #[arg(long)]
    force: bool,
    /// Controller kind: open-loop, exact-lyapunov, no-lyapunov,
    /// exact-passive, no-passive.
    #[arg(long)]
    controller: Option<String>,
    /// Model file, required for the no-* controllers.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Grid spacing.
    #[arg(long)]
    dx: Option<f64>,
    /// Time step (CFL requires dt <= dx).
    #[arg(long)]
    dt: Option<f64>,
    /// Coefficient family parameter in beta(x) = 5 cos(sigma arccos x).
    #[arg(long)]
    sigma: Option<f64>,
    /// Constant initial state amplitude.
    #[arg(long)]
    u0: Option<f64>,
    /// Known coefficient bound B.
    #[arg(long)]
    bound: Option<f64>,
    /// Adaptation gain.
    #[arg(long)]
    gamma: Option<f64>,
    /// Lyapunov norm weight c.
    #[arg(long)]
    c: Option<f64>,
    /// Observer injection gain (passive designs).
    #[arg(long)]
    gamma0: Option<f64>,
    /// Constant initial coefficient estimate.
    #[arg(long)]
    beta_hat0: Option<f64>,
    /// Simulation horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Sampling interval for snapshots.
    #[arg(long)]
    sample_every: Option<f64>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for dataset.kds and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Number of simulated runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Lower end of the sigma sweep.
    #[arg(long)]
    sigma_low: Option<f64>,
    /// Upper end of the sigma sweep.
    #[arg(long)]
    sigma_high: Option<f64>,
    /// Horizon of each run in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Interval between recorded samples.
    #[arg(long)]
    subsample: Option<f64>,
    /// Adaptation gain used while generating.
    #[arg(long)]
    gamma: Option<f64>,
    /// Seed for the sigma draws.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (.kds) to fit.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for model.bkno, the report, and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer seed (shuffling).
    #[arg(long)]
    seed: Option<u64>,
    /// Weight-initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,
    /// Hold out runs with id % N == N-1 as the test split (0 disables).
    #[arg(long)]
    holdout_every: Option<usize>,
    /// Stop early once the held-out error reaches this value.
    #[arg(long)]
    target: Option<f64>,
    /// Progress print cadence in epochs (0 silent).
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained model file (.bkno).
    #[arg(long)]
    model: PathBuf,
    /// Dataset supplying in-distribution coefficient inputs.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for bench.csv and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Grid spacings to sweep (repeatable).
    #[arg(long = "dx")]
    dx: Vec<f64>,
    /// Timed calls per path per spacing.
    #[arg(long)]
    repeats: Option<usize>,
    /// Correctness gate: maximum relative L2 disagreement before timing.
    #[arg(long)]
    gate: Option<f64>,
    /// How many coefficient inputs to draw from the dataset.
    #[arg(long)]
    inputs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and help output, but always exit 1 on bad invocations.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Maps library errors onto the documented exit codes.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::CflViolation { .. } | Error::GridMismatch { .. } => 1,
        Error::NonFinite { .. }
        | Error::SeriesDiverged { .. }
        | Error::TrainingDiverged { .. }
        | Error::ProjectionBound { .. } => 2,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::ChecksumMismatch { .. }
        | Error::DuplicateSample { .. } => 3,
    }
}

fn run(cli: Cli) -> backstep::Result<ExitCode> {
    match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Dataset { cmd } => match cmd {
            DatasetCmd::Generate(args) => cmd_dataset_generate(args),
            DatasetCmd::ExportCsv { input, out, force } => cmd_dataset_export(&input, &out, force),
        },
        Cmd::Train(args) => cmd_train(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Model { cmd } => match cmd {
            ModelCmd::Inspect { model } => cmd_model_inspect(&model),
        },
    }
}

fn cmd_simulate(args: SimulateArgs) -> backstep::Result<ExitCode> {
    let file = config::load_file(args.config.as_deref())?;
    let kind_str = pick(
        args.controller,
        file.controller.kind.clone(),
        "exact-lyapunov".to_string(),
    );
    let resolved = ResolvedSimulate {
        dx: pick(args.dx, file.plant.dx, 1e-2),
        dt: pick(args.dt, file.plant.dt, 5e-3),
        sigma: pick(args.sigma, file.plant.sigma, 2.9),
        u0: pick(args.u0, file.plant.u0, 1.0),
        bound: pick(args.bound, file.plant.bound, 5.0),
        controller: ControllerKind::parse(&kind_str)?,
        gamma: pick(args.gamma, file.controller.gamma, 1e-2),
        c: pick(args.c, file.controller.c, 1.0),
        gamma0: pick(args.gamma0, file.controller.gamma0, 1.0),
        beta_hat0: pick(args.beta_hat0, file.controller.beta_hat0, 1.0),
        model: args.model.or(file.controller.model),
        horizon: pick(args.horizon, file.run.horizon, 13.0),
        sample_every: pick(args.sample_every, file.run.sample_every, 0.1),
    };
    if resolved.controller.needs_model() && resolved.model.is_none() {
        return Err(Error::InvalidConfig {
            field: "controller.model",
            message: format!("{kind_str} needs --model pointing at a trained operator"),
        });
    }

    manifest::claim_output_dir(&args.out, args.force)?;

    let grid = Grid1D::from_dx(resolved.dx)?;
    let plant = PlantConfig {
        grid,
        dt: resolved.dt,
        beta: chebyshev_beta(grid, resolved.sigma),
        u0: GridFunction::constant(grid, resolved.u0),
        bound: resolved.bound,
    };
    let beta_hat0 = GridFunction::constant(grid, resolved.beta_hat0);

    // The kernel operator outlives the controller that borrows it.
    let exact_op = ExactKernelOperator;
    let neural_op: Option<NeuralKernelOperator> = match resolved.model.as_deref() {
        Some(path) if resolved.controller.needs_model() => {
            Some(NeuralKernelOperator::new(DeepOnetModel::load(path)?, grid)?)
        }
        _ => None,
    };
    let op: &dyn KernelOperator = match &neural_op {
        Some(op) => op,
        None => &exact_op,
    };

    let controller = match resolved.controller {
        ControllerKind::OpenLoop => Controller::OpenLoop,
        ControllerKind::ExactLyapunov | ControllerKind::NoLyapunov => Controller::Lyapunov {
            op,
            cfg: LyapunovConfig {
                gamma: resolved.gamma,
                c: resolved.c,
                bound: resolved.bound,
            },
            beta_hat0,
        },
        ControllerKind::ExactPassive | ControllerKind::NoPassive => Controller::Passive {
            op,
            cfg: PassiveConfig {
                gamma: resolved.gamma,
                gamma0: resolved.gamma0,
                bound: resolved.bound,
            },
            beta_hat0,
            u_hat0: None,
        },
    };

    let trajectory = run_closed_loop(&plant, &controller, resolved.horizon, resolved.sample_every)?;
    trajectory.write_csvs(&args.out)?;

    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(cfg) = args.config.as_deref() {
        inputs.push(("config", cfg));
    }
    if let Some(model) = resolved.model.as_deref() {
        inputs.push(("model", model));
    }
    manifest::write_manifest(&args.out, "simulate", &resolved, &inputs)?;

    let last = trajectory.final_snapshot();
    println!(
        "simulated to t = {:.3}: sup|u| = {:.6e}, control = {:.6e}",
        last.t,
        sup_norm(&last.u),
        last.control
    );
    if let Some(blowup) = &trajectory.blowup {
        eprintln!(
            "numerical blow-up at t = {:.3} (sup|u| = {:.3e}); partial outputs kept",
            blowup.t, blowup.sup_u
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dataset_generate(args: DatasetArgs) -> backstep::Result<ExitCode> {
    let file = config::load_file(args.config.as_deref())?;
    let defaults = GenerateConfig::default();
    let resolved = ResolvedDataset {
        runs: pick(args.runs, file.dataset.runs, defaults.n_runs),
        sigma_low: pick(args.sigma_low, file.dataset.sigma_low, defaults.sigma_low),
        sigma_high: pick(args.sigma_high, file.dataset.sigma_high, defaults.sigma_high),
        horizon: pick(args.horizon, file.dataset.horizon, defaults.horizon),
        subsample: pick(args.subsample, file.dataset.subsample, defaults.subsample),
        dx: pick(None, file.plant.dx, defaults.grid.dx()),
        dt: pick(None, file.plant.dt, defaults.dt),
        gamma: pick(args.gamma, file.dataset.gamma, defaults.gamma),
        c: pick(None, file.dataset.c, defaults.c),
        bound: pick(None, file.plant.bound, defaults.bound),
        beta_hat0: pick(None, file.controller.beta_hat0, defaults.beta_hat0),
        u0: pick(None, file.plant.u0, defaults.u0),
        seed: pick(args.seed, file.dataset.seed, defaults.seed),
    };
    manifest::claim_output_dir(&args.out, args.force)?;

    let gen_cfg = GenerateConfig {
        n_runs: resolved.runs,
        sigma_low: resolved.sigma_low,
        sigma_high: resolved.sigma_high,
        horizon: resolved.horizon,
        subsample: resolved.subsample,
        grid: Grid1D::from_dx(resolved.dx)?,
        dt: resolved.dt,
        gamma: resolved.gamma,
        c: resolved.c,
        bound: resolved.bound,
        beta_hat0: resolved.beta_hat0,
        u0: resolved.u0,
        seed: resolved.seed,
    };
    let dataset = generate(&gen_cfg)?;
    let path = args.out.join("dataset.kds");
    dataset::save(&dataset, &path)?;

    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(cfg) = args.config.as_deref() {
        inputs.push(("config", cfg));
    }
    manifest::write_manifest(&args.out, "dataset-generate", &resolved, &inputs)?;
    println!(
        "wrote {} samples from {} runs to {}",
        dataset.len(),
        resolved.runs,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_dataset_export(input: &Path, out: &Path, force: bool) -> backstep::Result<ExitCode> {
    if out.exists() && !force {
        return Err(Error::InvalidConfig {
            field: "out",
            message: format!("{} exists; pass --force to overwrite", out.display()),
        });
    }
    let dataset = dataset::load(input)?;
    dataset.write_csv(out)?;
    println!("exported {} samples to {}", dataset.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Builds an untrained operator sized for the dataset's sensor layout: the
/// default architecture when the dataset uses 101 sensors, the same shape
/// with a matching branch width otherwise.
fn model_for_dataset(dataset: &KernelDataset, seed: u64) -> backstep::Result<DeepOnetModel> {
    let m = dataset.sensors.len();
    DeepOnetModel::new(
        MlpSpec {
            layer_widths: vec![m, 49, 49, 49],
            activation: backstep::deeponet::Activation::Tanh,
            output_bias: false,
            activate_output: false,
        },
        MlpSpec {
            layer_widths: vec![1, 49, 49, 49],
            activation: backstep::deeponet::Activation::Tanh,
            output_bias: true,
            activate_output: true,
        },
        dataset.sensors.clone(),
        backstep::deeponet::Scaling::for_bound(5.0),
        seed,
        1,
    )
}

fn cmd_train(args: TrainArgs) -> backstep::Result<ExitCode> {
    let file = config::load_file(args.config.as_deref())?;
    let defaults = TrainConfig::default();
    let resolved = ResolvedTrain {
        dataset: args.dataset.clone(),
        epochs: pick(args.epochs, file.train.epochs, defaults.epochs),
        learning_rate: pick(args.learning_rate, file.train.learning_rate, defaults.learning_rate),
        batch_size: pick(args.batch_size, file.train.batch_size, defaults.batch_size),
        seed: pick(args.seed, file.train.seed, defaults.seed),
        model_seed: pick(args.model_seed, file.train.model_seed, 0),
        holdout_every: pick(args.holdout_every, file.train.holdout_every, defaults.holdout_every),
        target_test_rel_l2: args.target.or(file.train.target_test_rel_l2),
        check_every: pick(None, file.train.check_every, defaults.check_every),
        log_every: pick(args.log_every, file.train.log_every, defaults.log_every),
    };
    manifest::claim_output_dir(&args.out, args.force)?;

    let dataset = dataset::load(&resolved.dataset)?;
    let mut model = model_for_dataset(&dataset, resolved.model_seed)?;
    let train_cfg = TrainConfig {
        epochs: resolved.epochs,
        learning_rate: resolved.learning_rate,
        batch_size: resolved.batch_size,
        seed: resolved.seed,
        holdout_every: resolved.holdout_every,
        auto_scale: true,
        target_test_rel_l2: resolved.target_test_rel_l2,
        check_every: resolved.check_every,
        log_every: resolved.log_every,
    };
    let report = train(&dataset, &mut model, &train_cfg)?;

    let model_path = args.out.join("model.bkno");
    model.save(&model_path)?;
    let report_text = format!(
        "epochs_run = {}\nfinal_train_rel_l2 = {:e}\nfinal_test_rel_l2 = {:e}\n\
         wall_time_s = {:.3}\nrng_seed = {}\n",
        report.epochs_run,
        report.final_train_rel_l2,
        report.final_test_rel_l2,
        report.wall_time_s,
        report.rng_seed
    );
    std::fs::write(args.out.join("train_report.toml"), report_text)?;

    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", resolved.dataset.as_path())];
    if let Some(cfg) = args.config.as_deref() {
        inputs.push(("config", cfg));
    }
    manifest::write_manifest(&args.out, "train", &resolved, &inputs)?;
    println!(
        "trained {} epochs: train rel L2 {:.3e}, test rel L2 {:.3e} ({:.1}s); model at {}",
        report.epochs_run,
        report.final_train_rel_l2,
        report.final_test_rel_l2,
        report.wall_time_s,
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> backstep::Result<ExitCode> {
    let file = config::load_file(args.config.as_deref())?;
    let defaults = BenchConfig::default();
    let resolved = ResolvedBench {
        model: args.model.clone(),
        dataset: args.dataset.clone(),
        dx: if args.dx.is_empty() {
            file.bench.dx.unwrap_or(defaults.dx_list)
        } else {
            args.dx
        },
        repeats: pick(args.repeats, file.bench.repeats, defaults.n_repeats),
        gate: pick(args.gate, file.bench.gate, defaults.gate_rel_l2),
        inputs: pick(args.inputs, file.bench.inputs, 4),
    };
    manifest::claim_output_dir(&args.out, args.force)?;

    let model = DeepOnetModel::load(&resolved.model)?;
    let dataset = dataset::load(&resolved.dataset)?;
    if dataset.is_empty() || resolved.inputs == 0 {
        return Err(Error::InvalidConfig {
            field: "inputs",
            message: "benchmark needs at least one coefficient input".into(),
        });
    }
    // Evenly spaced dataset samples give deterministic, in-distribution
    // inputs for the correctness gate and the timing loop alike.
    let k = resolved.inputs.min(dataset.len());
    let family: Vec<GridFunction> = (0..k)
        .map(|j| {
            let idx = if k == 1 { 0 } else { j * (dataset.len() - 1) / (k - 1) };
            GridFunction::new(dataset.grid, dataset.samples[idx].beta_hat.clone())
        })
        .collect::<backstep::Result<_>>()?;

    let bench_cfg = BenchConfig {
        dx_list: resolved.dx.clone(),
        n_repeats: resolved.repeats,
        gate_rel_l2: resolved.gate,
    };
    let results = run_bench(&model, &family, &bench_cfg)?;
    write_csv(&results, &args.out.join("bench.csv"))?;

    let mut inputs: Vec<(&str, &Path)> = vec![
        ("model", resolved.model.as_path()),
        ("dataset", resolved.dataset.as_path()),
    ];
    if let Some(cfg) = args.config.as_deref() {
        inputs.push(("config", cfg));
    }
    manifest::write_manifest(&args.out, "bench", &resolved, &inputs)?;
    print!("{}", format_table(&results));
    Ok(ExitCode::SUCCESS)
}

fn cmd_model_inspect(path: &Path) -> backstep::Result<ExitCode> {
    let model = DeepOnetModel::load(path)?;
    println!("model: {}", path.display());
    println!("  input channels: {}", model.input_channels);
    println!("  sensors: {}", model.sensors.len());
    println!(
        "  branch: {:?} ({} params, activation {:?})",
        model.branch.spec.layer_widths,
        model.branch.spec.param_count(),
        model.branch.spec.activation
    );
    println!(
        "  trunk:  {:?} ({} params, activation {:?})",
        model.trunk.spec.layer_widths,
        model.trunk.spec.param_count(),
        model.trunk.spec.activation
    );
    println!("  total parameters: {}", model.param_count());
    println!(
        "  scaling: input (offset {}, scale {}), output (offset {}, scale {})",
        model.scaling.input_offset,
        model.scaling.input_scale,
        model.scaling.output_offset,
        model.scaling.output_scale
    );
    println!("  init seed: {}", model.seed);
    Ok(ExitCode::SUCCESS)
}
