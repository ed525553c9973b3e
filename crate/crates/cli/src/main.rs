mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odesurv::inference::InfoEstimator;
use odesurv::model::{GradientMode, ModelClass};
use odesurv::optimize::KnotRule;

use commands::{CliError, ConfigArgs};

#[derive(Parser)]
#[command(name = "odesurv", version = env!("CARGO_PKG_VERSION"), about = "Fit and simulate ODE survival models")]
struct Cli {
    /// Parallel width; defaults to the available cores.
    #[arg(long, global = true, env = "ODESURV_WORKERS")]
    workers: Option<usize>,
    /// Repeat for more logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data CSV.
    Fit(FitCmd),
    /// Draw one dataset from a built-in design.
    Simulate(SimulateCmd),
    /// Run a replicate study and write bias/SE/coverage metrics.
    Replicate(ReplicateCmd),
    /// Survival curves for covariate profiles under a saved fit.
    Predict(PredictCmd),
}

fn knot_rule(s: &str) -> Result<KnotRule, String> {
    match s {
        "quantile" | "event_quantiles" => Ok(KnotRule::EventQuantiles),
        "equal" | "equal_time" => Ok(KnotRule::EqualTime),
        _ => Err(format!("unknown knot rule '{s}' (quantile or equal)")),
    }
}

#[derive(Args)]
struct FitCmd {
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cox, cox_tv, aft, ltm or flex.
    #[arg(long)]
    model: Option<ModelClass>,
    /// Interior knots for gamma and eta.
    #[arg(long)]
    knots: Option<usize>,
    /// Spline order (4 = cubic).
    #[arg(long)]
    order: Option<usize>,
    /// Interior knots for g.
    #[arg(long)]
    g_knots: Option<usize>,
    /// quantile (event-time quantiles) or equal (equally spaced).
    #[arg(long, value_parser = knot_rule)]
    knot_rule: Option<KnotRule>,
    /// e.g. beta1=1,g0=0; replaces the class defaults.
    #[arg(long)]
    constraints: Option<String>,
    /// forward, adjoint or auto.
    #[arg(long)]
    gradient_mode: Option<GradientMode>,
    /// opg or numeric_hessian.
    #[arg(long)]
    info_estimator: Option<InfoEstimator>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Second-difference penalty weight on g (0 disables it).
    #[arg(long)]
    g_roughness: Option<f64>,
    /// Directory for curve CSVs with pointwise bands.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Time grid for curves: lo:step:hi or a comma list.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateCmd {
    /// s1, s2_1, s2_2, s2_3 or s2_4.
    #[arg(long)]
    setting: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateCmd {
    #[arg(long)]
    setting: String,
    #[arg(long)]
    reps: usize,
    #[arg(long)]
    n: usize,
    /// Comma-separated model classes.
    #[arg(long, value_delimiter = ',', default_value = "cox")]
    models: Vec<ModelClass>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fix beta1 = 1 in Cox and AFT fits as well.
    #[arg(long)]
    fix_beta1: bool,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON with the full metrics.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct PredictCmd {
    /// Fit JSON written by `odesurv fit`.
    #[arg(long)]
    fit: PathBuf,
    /// CSV with x:<name>/z:<name> columns and an optional id column.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(k) = cli.workers {
        if k == 0 {
            return Err(CliError::Input(anyhow::anyhow!("--workers must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Other(e.into()))?;
    }
    match cli.command {
        Command::Fit(c) => commands::fit(&commands::FitArgs {
            data: c.data,
            config: ConfigArgs {
                config: c.config,
                model: c.model,
                knots: c.knots,
                order: c.order,
                g_knots: c.g_knots,
                knot_rule: c.knot_rule,
                constraints: c.constraints,
                gradient_mode: c.gradient_mode,
                info_estimator: c.info_estimator,
                rel_tol: c.rel_tol,
                abs_tol: c.abs_tol,
            },
            max_iters: c.max_iters,
            grad_tol: c.grad_tol,
            g_roughness: c.g_roughness,
            curves: c.curves,
            grid: c.grid,
            out: c.out,
        }),
        Command::Simulate(c) => commands::simulate(&commands::SimulateArgs {
            setting: c.setting,
            n: c.n,
            seed: c.seed,
            replicate: c.replicate,
            out: c.out,
        }),
        Command::Replicate(c) => commands::replicate(&commands::ReplicateArgs {
            setting: c.setting,
            reps: c.reps,
            n: c.n,
            seed: c.seed,
            models: c.models,
            fix_beta1: c.fix_beta1,
            workers: cli.workers,
            out: c.out,
            summary: c.summary,
        }),
        Command::Predict(c) => commands::predict(&commands::PredictArgs {
            fit: c.fit,
            covariates: c.covariates,
            grid: c.grid,
            out: c.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
