//! Command dispatch for the `ndp` binary.
//!
//! Every command is a pure function of (config file, flags, seed): reruns
//! with the same arguments produce byte-identical outputs. `NDP_THREADS`
//! caps internal parallelism.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Once;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_config, Precision, RunConfig};
use crate::error::{NdpError, Result};
use crate::gp::{self, InputMode};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::sample::{
    sample_conditional_many, sample_prior_many, sample_prior_trajectory, targets_at, Context,
    PriorInputs,
};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tasks::{
    lengthscale_grid, marginalisation_histogram, regret_curve, run_bo, run_density_opt,
    DensityOptConfig, GprSurrogateConfig, Objective, Surrogate,
};
use crate::tensor::{Scalar, Tensor};
use crate::{csvio, train};

#[derive(Parser)]
#[command(
    name = "ndp",
    about = "Neural diffusion processes over function draws",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Floating-point precision for model evaluation.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one synthetic GP dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Train a model on streamed synthetic GP data.
    Train(TrainArgs),
    /// Sample functions from the prior of a trained model.
    SamplePrior(SamplePriorArgs),
    /// Sample functions conditioned on a context dataset.
    SampleConditional(SampleConditionalArgs),
    /// Thompson-sampling Bayesian optimisation with a chosen surrogate.
    Bo(BoArgs),
    /// Global optimisation by sampling input locations given target values.
    OptimiseDensity(DensityArgs),
    /// Histogram the most-likely lengthscales of conditional samples.
    EvalMarginalisation(MarginalisationArgs),
    /// Write the beta/alpha-bar/gamma tables as CSV.
    DumpSchedule(DumpScheduleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of points (defaults to train.points_per_dataset).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Loss-trace CSV path (defaults to <output_dir>/loss_trace.csv).
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct SamplePriorArgs {
    /// Number of points per sampled function.
    #[arg(long)]
    n: Option<usize>,
    /// Input dimensionality (defaults to the checkpoint's data dimension).
    #[arg(long)]
    d: Option<usize>,
    /// Number of function samples.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Also dump the per-step chain of the first sample to this CSV.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct SampleConditionalArgs {
    /// Context dataset CSV (`dim_0..dim_k,y`).
    #[arg(long)]
    context: PathBuf,
    /// Number of target points (defaults to sampler.num_targets).
    #[arg(long)]
    num_targets: Option<usize>,
    #[arg(long, default_value_t = 1)]
    samples: usize,
}

#[derive(Args)]
struct BoArgs {
    #[arg(long, value_parser = ["ndp-fixed", "ndp-marginalised", "gpr", "random"])]
    surrogate: String,
    #[arg(long)]
    objective: String,
    #[arg(long)]
    budget: Option<usize>,
    /// Seeds run are seed, seed+1, ..., seed+num_seeds-1.
    #[arg(long)]
    num_seeds: Option<usize>,
    /// Aggregated regret CSV (median/min/max across seeds).
    #[arg(long)]
    aggregate_out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long, default_value = "multimodal1d")]
    objective: String,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    num_seeds: Option<usize>,
}

#[derive(Args)]
struct MarginalisationArgs {
    /// Context dataset CSV.
    #[arg(long)]
    context: PathBuf,
    #[arg(long)]
    num_samples: Option<usize>,
    /// Number of evaluation points for the conditional samples.
    #[arg(long)]
    eval_points: Option<usize>,
}

#[derive(Args)]
struct DumpScheduleArgs {
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long, value_parser = ["cosine", "linear"])]
    kind: Option<String>,
}

static INIT_THREADS: Once = Once::new();

fn init_threads() {
    INIT_THREADS.call_once(|| {
        if let Ok(v) = std::env::var("NDP_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Parse and run; returns the process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { 0 } else { 2 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = if p == "f64" { Precision::F64 } else { Precision::F32 };
    }

    match &cli.command {
        Command::GenData(args) => gen_data(&cli, &cfg, args),
        Command::Train(args) => match cfg.precision {
            Precision::F32 => train_cmd::<f32>(&cli, &cfg, args),
            Precision::F64 => train_cmd::<f64>(&cli, &cfg, args),
        },
        Command::SamplePrior(args) => with_checkpoint(&cli, |p| match p {
            Loaded::F32(params, ckpt_cfg) => {
                sample_prior_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
            Loaded::F64(params, ckpt_cfg) => {
                sample_prior_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
        }),
        Command::SampleConditional(args) => with_checkpoint(&cli, |p| match p {
            Loaded::F32(params, ckpt_cfg) => {
                sample_conditional_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
            Loaded::F64(params, ckpt_cfg) => {
                sample_conditional_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
        }),
        Command::Bo(args) => bo_cmd(&cli, &cfg, args),
        Command::OptimiseDensity(args) => with_checkpoint(&cli, |p| match p {
            Loaded::F32(params, ckpt_cfg) => density_cmd(&cli, &cfg, &ckpt_cfg, &params, args),
            Loaded::F64(params, ckpt_cfg) => density_cmd(&cli, &cfg, &ckpt_cfg, &params, args),
        }),
        Command::EvalMarginalisation(args) => with_checkpoint(&cli, |p| match p {
            Loaded::F32(params, ckpt_cfg) => {
                marginalisation_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
            Loaded::F64(params, ckpt_cfg) => {
                marginalisation_cmd(&cli, &cfg, &ckpt_cfg, &params, args)
            }
        }),
        Command::DumpSchedule(args) => dump_schedule(&cli, &cfg, args),
    }
}

enum Loaded {
    F32(ModelParams<f32>, RunConfig),
    F64(ModelParams<f64>, RunConfig),
}

fn with_checkpoint(cli: &Cli, f: impl FnOnce(Loaded) -> Result<()>) -> Result<()> {
    let path = cli
        .ckpt
        .as_ref()
        .ok_or_else(|| NdpError::InvalidArgument("--ckpt is required for this command".into()))?;
    let precision = match cli.precision.as_deref() {
        Some("f64") => Precision::F64,
        Some(_) => Precision::F32,
        None => load_checkpoint::<f32>(path)?.1.precision,
    };
    match precision {
        Precision::F32 => {
            let (params, ckpt_cfg) = load_checkpoint::<f32>(path)?;
            f(Loaded::F32(params, ckpt_cfg))
        }
        Precision::F64 => {
            let (params, ckpt_cfg) = load_checkpoint::<f64>(path)?;
            f(Loaded::F64(params, ckpt_cfg))
        }
    }
}

fn out_path(cli: &Cli, cfg: &RunConfig, default_name: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| Path::new(&cfg.output_dir).join(default_name))
}

fn gen_data(cli: &Cli, cfg: &RunConfig, args: &GenDataArgs) -> Result<()> {
    let n = args.n.unwrap_or(cfg.train.points_per_dataset);
    let d = cfg.data.dimension;
    let mut rng = Rng::new(cfg.seed).derive(0x47454e44); // "GEND"
    let kernel = cfg.lengthscale_prior().sample(&cfg.kernel_spec()?, &mut rng);
    let x = gp::sample_inputs(n, d, cfg.input_mode(), &mut rng)?;
    let draw = gp::sample_prior_function(&x, &kernel, &mut rng)?;
    let path = out_path(cli, cfg, "dataset.csv");
    csvio::write_dataset_csv(&path, &draw)?;
    println!("wrote {} points to {}", n, path.display());
    Ok(())
}

fn train_cmd<T: Scalar>(cli: &Cli, cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mcfg = cfg.model_config();
    let sched = cfg.noise_schedule()?;
    let settings = cfg.train_settings();
    let total = settings.total_steps();
    let out = train::train_with_callback::<T>(&mcfg, &sched, &settings, |rec| {
        if args.log_every > 0 && (rec.step % args.log_every == 0 || rec.step + 1 == total) {
            eprintln!(
                "step {}/{} epoch {} lr {:.3e} loss {:.5}",
                rec.step, total, rec.epoch, rec.lr, rec.loss
            );
        }
    })?;
    let ckpt_path = cli
        .ckpt
        .clone()
        .or_else(|| cli.out.clone())
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("model.ndpc"));
    save_checkpoint(&out.params, cfg, &ckpt_path)?;
    let trace_path = args
        .trace_out
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("loss_trace.csv"));
    csvio::write_loss_trace_csv(&trace_path, &out.trace)?;
    println!(
        "trained {} steps; checkpoint {} trace {}",
        out.trace.len(),
        ckpt_path.display(),
        trace_path.display()
    );
    Ok(())
}

/// Default input locations: linear spacing in 1D, a lattice in 2D when N is
/// square, Halton otherwise.
fn default_locations(n: usize, d: usize) -> Result<Tensor<f64>> {
    let mut rng = Rng::new(0);
    let side = (n as f64).sqrt().round() as usize;
    let mode = match d {
        1 => InputMode::Grid,
        2 if side * side == n => InputMode::Grid,
        _ => InputMode::Halton,
    };
    gp::sample_inputs(n, d, mode, &mut rng)
}

fn sample_prior_cmd<T: Scalar>(
    cli: &Cli,
    cfg: &RunConfig,
    ckpt_cfg: &RunConfig,
    params: &ModelParams<T>,
    args: &SamplePriorArgs,
) -> Result<()> {
    let mcfg = ckpt_cfg.model_config();
    let sched = ckpt_cfg.noise_schedule()?;
    let scfg = ckpt_cfg.sampler_config();
    let n = args.n.unwrap_or(scfg.num_targets);
    let d = args.d.unwrap_or(ckpt_cfg.data.dimension);
    let fixed =
        if mcfg.deterministic_inputs { Some(default_locations(n, d)?) } else { None };
    fn inputs<'a>(fixed: &'a Option<Tensor<f64>>, n: usize, d: usize) -> PriorInputs<'a> {
        match fixed {
            Some(x) => PriorInputs::Fixed(x),
            None => PriorInputs::Diffused { n, d },
        }
    }
    let draws = sample_prior_many(
        inputs(&fixed, n, d),
        params,
        &mcfg,
        &sched,
        &scfg,
        cfg.seed,
        args.samples,
    )?;
    let path = out_path(cli, cfg, "prior_samples.csv");
    csvio::write_samples_csv(&path, &draws)?;
    if let Some(traj_path) = &args.trajectory {
        let (_, states) =
            sample_prior_trajectory(inputs(&fixed, n, d), params, &mcfg, &sched, &scfg, cfg.seed)?;
        csvio::write_trajectory_csv(traj_path, &states)?;
    }
    println!("wrote {} samples to {}", args.samples, path.display());
    Ok(())
}

fn sample_conditional_cmd<T: Scalar>(
    cli: &Cli,
    cfg: &RunConfig,
    ckpt_cfg: &RunConfig,
    params: &ModelParams<T>,
    args: &SampleConditionalArgs,
) -> Result<()> {
    let mcfg = ckpt_cfg.model_config();
    let sched = ckpt_cfg.noise_schedule()?;
    let scfg = ckpt_cfg.sampler_config();
    let ctx_draw = csvio::read_dataset_csv(&args.context)?;
    let ctx = Context::new(ctx_draw.x, ctx_draw.y)?;
    let m = args.num_targets.unwrap_or(scfg.num_targets);
    let eval_x = default_locations(m, ctx.dim())?;
    let draws = sample_conditional_many(
        &ctx,
        &targets_at(&eval_x),
        params,
        &mcfg,
        &sched,
        &scfg,
        cfg.seed,
        args.samples,
    )?;
    let path = out_path(cli, cfg, "conditional_samples.csv");
    csvio::write_samples_csv(&path, &draws)?;
    println!(
        "wrote {} conditional samples ({} context points) to {}",
        args.samples,
        ctx.len(),
        path.display()
    );
    Ok(())
}

fn bo_cmd(cli: &Cli, cfg: &RunConfig, args: &BoArgs) -> Result<()> {
    let objective = Objective::by_name(&args.objective)?;
    let budget = args.budget.unwrap_or(cfg.tasks.bo.budget);
    let num_seeds = args.num_seeds.unwrap_or(1).max(1);
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| cfg.seed + i).collect();
    let bo = &cfg.tasks.bo;

    let traces = match args.surrogate.as_str() {
        "random" => run_bo::<f32>(
            &Surrogate::Random,
            &objective,
            budget,
            &seeds,
            bo.initial_design,
            bo.num_candidates,
        )?,
        "gpr" => run_bo::<f32>(
            &Surrogate::Gpr(GprSurrogateConfig {
                family: cfg.kernel_family(),
                grid_min: bo.gpr_grid_min,
                grid_max: bo.gpr_grid_max,
                grid_points: bo.gpr_grid_points,
                relative_noise: cfg.data.noise_variance,
            }),
            &objective,
            budget,
            &seeds,
            bo.initial_design,
            bo.num_candidates,
        )?,
        tag @ ("ndp-fixed" | "ndp-marginalised") => {
            let path = cli.ckpt.as_ref().ok_or_else(|| {
                NdpError::InvalidArgument("--ckpt is required for NDP surrogates".into())
            })?;
            let (params, ckpt_cfg) = load_checkpoint::<f32>(path)?;
            let mcfg = ckpt_cfg.model_config();
            let sched = ckpt_cfg.noise_schedule()?;
            let surrogate = Surrogate::Ndp {
                params: &params,
                cfg: &mcfg,
                sched: &sched,
                sampler: ckpt_cfg.sampler_config(),
                tag: if tag == "ndp-fixed" { "ndp_fixed" } else { "ndp_marginalised" },
            };
            run_bo(&surrogate, &objective, budget, &seeds, bo.initial_design, bo.num_candidates)?
        }
        other => {
            return Err(NdpError::InvalidArgument(format!("unknown surrogate {other}")));
        }
    };

    let path = out_path(cli, cfg, "bo_trace.csv");
    csvio::write_bo_traces_csv(&path, &traces)?;
    if objective.known_minimum.is_some() {
        let agg_path = args
            .aggregate_out
            .clone()
            .unwrap_or_else(|| Path::new(&cfg.output_dir).join("bo_regret.csv"));
        csvio::write_regret_csv(&agg_path, &regret_curve(&traces)?)?;
    }
    let final_best: Vec<String> = traces.iter().map(|t| format!("{:.4}", t.final_best())).collect();
    println!(
        "{} on {}: best per seed [{}]; trace {}",
        args.surrogate,
        objective.name,
        final_best.join(", "),
        path.display()
    );
    Ok(())
}

fn density_cmd<T: Scalar>(
    cli: &Cli,
    cfg: &RunConfig,
    ckpt_cfg: &RunConfig,
    params: &ModelParams<T>,
    args: &DensityArgs,
) -> Result<()> {
    let objective = Objective::by_name(&args.objective)?;
    let mcfg = ckpt_cfg.model_config();
    let sched = ckpt_cfg.noise_schedule()?;
    let scfg = ckpt_cfg.sampler_config();
    let docfg = DensityOptConfig {
        budget: args.budget.unwrap_or(cfg.tasks.density.budget),
        samples_per_step: cfg.tasks.density.samples_per_step,
        std_floor: cfg.tasks.density.std_floor,
    };
    let num_seeds = args.num_seeds.unwrap_or(1).max(1);
    let mut traces = Vec::with_capacity(num_seeds);
    for i in 0..num_seeds as u64 {
        traces.push(run_density_opt(
            &objective,
            params,
            &mcfg,
            &sched,
            &scfg,
            &docfg,
            cfg.seed + i,
        )?);
    }
    let path = out_path(cli, cfg, "density_trace.csv");
    csvio::write_bo_traces_csv(&path, &traces)?;
    let final_best: Vec<String> = traces.iter().map(|t| format!("{:.4}", t.final_best())).collect();
    println!(
        "density optimisation on {}: best per seed [{}]; trace {}",
        objective.name,
        final_best.join(", "),
        path.display()
    );
    Ok(())
}

fn marginalisation_cmd<T: Scalar>(
    cli: &Cli,
    cfg: &RunConfig,
    ckpt_cfg: &RunConfig,
    params: &ModelParams<T>,
    args: &MarginalisationArgs,
) -> Result<()> {
    let mcfg = ckpt_cfg.model_config();
    let sched = ckpt_cfg.noise_schedule()?;
    let scfg = ckpt_cfg.sampler_config();
    let m = &cfg.tasks.marginalisation;
    let ctx_draw = csvio::read_dataset_csv(&args.context)?;
    let ctx = Context::new(ctx_draw.x, ctx_draw.y)?;
    let grid = lengthscale_grid(m.grid_min, m.grid_max, m.grid_points);
    let eval_x = default_locations(args.eval_points.unwrap_or(m.eval_points), ctx.dim())?;
    let classify = ckpt_cfg.kernel_spec()?;
    let report = marginalisation_histogram(
        params,
        &mcfg,
        &sched,
        &scfg,
        &ctx,
        args.num_samples.unwrap_or(m.num_samples),
        &grid,
        &eval_x,
        &classify,
        cfg.seed,
    )?;
    let path = out_path(cli, cfg, "marginalisation_hist.csv");
    csvio::write_histogram_csv(&path, &report)?;
    match report.mode() {
        Some(mode) => println!(
            "histogram mode {:.3} over {} samples ({} grid cells occupied); {}",
            mode,
            report.per_sample.len(),
            report.support_cells(),
            path.display()
        ),
        None => println!("empty histogram; {}", path.display()),
    }
    Ok(())
}

fn dump_schedule(cli: &Cli, cfg: &RunConfig, args: &DumpScheduleArgs) -> Result<()> {
    let t = args.timesteps.unwrap_or(cfg.model.timesteps);
    let kind = match args.kind.as_deref() {
        Some("linear") => ScheduleKind::Linear,
        Some(_) => ScheduleKind::Cosine,
        None => cfg.schedule_kind(),
    };
    let sched = NoiseSchedule::build(kind, t)?;
    let path = out_path(cli, cfg, "schedule.csv");
    csvio::write_schedule_csv(&path, &sched)?;
    println!("wrote schedule (T = {t}) to {}", path.display());
    Ok(())
}
