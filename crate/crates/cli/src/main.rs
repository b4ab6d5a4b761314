//! `censlasso` command-line front end.
//!
//! Every command reads an optional TOML file and then applies flag
//! overrides; flags mirror the file keys one-to-one. Failures map to exit
//! status 2 (input), 3 (numerical) or 4 (configuration).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use censlasso::aggregate::{fit_aggregated_with, KmScope, ThresholdRule, VoteThreshold};
use censlasso::config::{load_toml, RunConfig};
use censlasso::data::{default_censoring_bound, generate_dataset, load_csv, GenerationSpec};
use censlasso::km::{fit_censoring_km, weights_with_floor};
use censlasso::simulation::{
    run_study, timing_benchmark, write_timing_csv, BenchSpec, SimulationSpec,
};
use censlasso::tuning::{fit_with_rule, BicVariant, PenaltyMode};
use censlasso::{Error, ErrorKind, Result};

const SEED_VAR: &str = "CENSLASSO_SEED";

#[derive(Parser, Debug)]
#[command(name = "censlasso", version, about = "Aggregated censored adaptive LASSO")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adaptive-LASSO fit on the full dataset; writes the estimate as JSON.
    Fit(FitArgs),
    /// Divide-and-conquer fit with a support vote; writes the aggregate as JSON.
    Aggregate(AggregateArgs),
    /// BIC path over the default penalty grid; writes it as CSV.
    Tune(FitArgs),
    /// Kaplan-Meier curve of the censoring variable; writes it as CSV.
    Km(KmArgs),
    /// Monte Carlo study described by a TOML file.
    Simulate(SimulateArgs),
    /// Wall-clock comparison of the pipeline across group counts.
    Bench(BenchArgs),
    /// Synthetic censored dataset from the accelerated failure time design.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset CSV with columns y, delta, x1..xp.
    #[arg(long)]
    data: PathBuf,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// TOML file with `[fit]` and `[aggregation]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug, Default)]
struct FitFlags {
    /// median, quantile, composite_quantile, expectile or least_squares.
    #[arg(long)]
    method: Option<String>,
    /// Index of the quantile or expectile loss.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of composite quantile levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Fixed penalty level.
    #[arg(long)]
    lambda: Option<f64>,
    /// Position j of the default grid n^(1/2 - 1/(10 j)).
    #[arg(long)]
    grid_index: Option<usize>,
    /// Select the penalty by BIC over the default grid.
    #[arg(long)]
    bic: bool,
    /// log_n_over_n or log_nu_over_nu.
    #[arg(long)]
    penalty_mode: Option<String>,
    /// loss_ratio or log_mean_absolute.
    #[arg(long)]
    bic_variant: Option<String>,
    /// Exponent of the adaptive weights.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Lower bound on the censoring survival in the weights; 1/n when absent.
    #[arg(long)]
    weight_floor: Option<f64>,
    /// Lower bound on |pilot| in the adaptive weights.
    #[arg(long)]
    beta_floor: Option<f64>,
    /// Add an intercept column (composite quantile always has its own).
    #[arg(long)]
    fit_intercept: bool,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[command(flatten)]
    base: FitArgs,
    /// Number of groups K.
    #[arg(long)]
    k: Option<usize>,
    /// Vote threshold w, or `sqrt_k` for floor(sqrt(K)).
    #[arg(long)]
    threshold: Option<String>,
    /// per_group or global.
    #[arg(long)]
    km_scope: Option<String>,
    /// Use one BIC grid point for every group instead of tuning each.
    #[arg(long)]
    shared_tuning: bool,
}

#[derive(Args, Debug)]
struct KmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML study description.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving report.json and the CSV tables.
    #[arg(short, long)]
    output_dir: PathBuf,
    /// Override the number of replications.
    #[arg(long)]
    replications: Option<usize>,
    /// Override the master seed (the environment variable wins).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// TOML benchmark description; defaults to the standard design.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Comma-separated group counts.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target censoring rate of the calibrated uniform censoring law.
    #[arg(long)]
    censoring_rate: Option<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
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
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Input => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Config => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Aggregate(args) => cmd_aggregate(&args),
        Command::Tune(args) => cmd_tune(&args),
        Command::Km(args) => cmd_km(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Generate(args) => cmd_generate(&args),
    }
}

fn parse_name<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::InvalidConfig(format!("--{flag}: unrecognised value `{value}`")))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_toml(p),
        None => Ok(RunConfig::default()),
    }
}

/// Applies flag overrides to the `[fit]` section. A penalty flag replaces
/// every penalty key from the file, so a file `bic = true` yields to a
/// command-line `--lambda`.
fn apply_fit_flags(cfg: &mut RunConfig, f: &FitFlags) -> Result<()> {
    let s = &mut cfg.fit;
    if let Some(m) = &f.method {
        s.method = m.parse()?;
    }
    if let Some(t) = f.tau {
        s.tau = t;
    }
    if let Some(l) = f.levels {
        s.levels = l;
    }
    if f.lambda.is_some() || f.grid_index.is_some() || f.bic {
        s.lambda = f.lambda;
        s.grid_index = f.grid_index;
        s.bic = f.bic;
    }
    if let Some(m) = &f.penalty_mode {
        s.penalty_mode = parse_name::<PenaltyMode>("penalty-mode", m)?;
    }
    if let Some(v) = &f.bic_variant {
        s.bic_variant = parse_name::<BicVariant>("bic-variant", v)?;
    }
    if let Some(g) = f.gamma {
        s.gamma = g;
    }
    if let Some(m) = f.max_iter {
        s.max_iter = m;
    }
    if let Some(t) = f.tol {
        s.tol = t;
    }
    if f.weight_floor.is_some() {
        s.weight_floor = f.weight_floor;
    }
    if let Some(b) = f.beta_floor {
        s.beta_floor = b;
    }
    if f.fit_intercept {
        s.fit_intercept = true;
    }
    Ok(())
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidData(format!("cannot serialise output: {e}")))?;
    text.push('\n');
    write_output(path, text.as_bytes())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    apply_fit_flags(&mut cfg, &args.fit)?;
    let rule = cfg.fit.lambda_rule()?;
    let config = cfg.fit.fit_config()?;
    let dataset = load_csv(&args.data)?;
    let weights = weights_with_floor(&dataset, config.weight_floor)?;
    let tuned = fit_with_rule(&dataset, &weights, &config, &rule)?;
    info!(
        "{}: lambda {} support {:?}",
        config.loss, tuned.lambda, tuned.result.support
    );
    write_json(args.output.as_deref(), &tuned.result)
}

fn cmd_aggregate(args: &AggregateArgs) -> Result<()> {
    let mut cfg = load_run_config(args.base.config.as_deref())?;
    apply_fit_flags(&mut cfg, &args.base.fit)?;
    let plan = &mut cfg.aggregation;
    if let Some(k) = args.k {
        plan.k = k;
    }
    if let Some(t) = &args.threshold {
        plan.threshold = match t.parse::<usize>() {
            Ok(w) => VoteThreshold::Fixed(w),
            Err(_) => VoteThreshold::Rule(parse_name::<ThresholdRule>("threshold", t)?),
        };
    }
    if let Some(s) = &args.km_scope {
        plan.km_scope = parse_name::<KmScope>("km-scope", s)?;
    }
    if args.shared_tuning {
        plan.per_group_tuning = false;
    }
    let rule = cfg.fit.lambda_rule()?;
    let config = cfg.fit.fit_config()?;
    plan.validate()?;
    let dataset = load_csv(&args.base.data)?;
    let result = fit_aggregated_with(&dataset, &cfg.aggregation, &config, &rule)?;
    if result.dropped > 0 {
        warn!(
            "{} trailing observations not assigned to any group",
            result.dropped
        );
    }
    info!(
        "{} {}: support {:?}",
        config.loss,
        cfg.aggregation.label(),
        result.support
    );
    write_json(args.base.output.as_deref(), &result)
}

fn cmd_tune(args: &FitArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    apply_fit_flags(&mut cfg, &args.fit)?;
    if cfg.fit.lambda.is_some() || cfg.fit.grid_index.is_some() {
        return Err(Error::InvalidConfig(
            "tune selects the penalty itself; drop lambda and grid_index".into(),
        ));
    }
    cfg.fit.bic = true;
    let rule = cfg.fit.lambda_rule()?;
    let config = cfg.fit.fit_config()?;
    let dataset = load_csv(&args.data)?;
    let weights = weights_with_floor(&dataset, config.weight_floor)?;
    let tuned = fit_with_rule(&dataset, &weights, &config, &rule)?;
    let path = tuned.path.expect("bic rule yields a path");
    info!(
        "{}: best grid point {} (lambda {})",
        config.loss,
        path.best_index + 1,
        path.best().lambda
    );
    let mut buf = Vec::new();
    path.write_csv_to(&mut buf)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    write_output(args.output.as_deref(), &buf)
}

fn cmd_km(args: &KmArgs) -> Result<()> {
    let dataset = load_csv(&args.data)?;
    let curve = fit_censoring_km(&dataset);
    let mut buf = Vec::new();
    curve
        .write_csv_to(&mut buf)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    write_output(args.output.as_deref(), &buf)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_VAR} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut spec: SimulationSpec = load_toml(&args.config)?;
    if let Some(m) = args.replications {
        spec.replications = m;
    }
    if let Some(s) = env_seed()?.or(args.seed) {
        spec.master_seed = s;
    }
    spec.validate()?;
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::Io {
        path: args.output_dir.clone(),
        source: e,
    })?;
    let report = run_study(&spec)?;
    report.write_outputs(&args.output_dir)?;
    for c in &report.cells {
        println!(
            "{} {}: false zeros {:.2}%, false non-zeros {:.2}%, l1 bias {:.4}, mean |A| {:.2}",
            c.method,
            c.plan,
            c.false_zero_pct,
            c.false_nonzero_pct,
            c.l1_bias_active,
            c.mean_support_size
        );
    }
    if !report.failures.is_empty() {
        warn!(
            "{} of {} replications failed; see report.json",
            report.failures.len(),
            report.replications_requested
        );
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut spec: BenchSpec = match &args.config {
        Some(p) => load_toml(p)?,
        None => BenchSpec::reference_design(10_000, 50, 0),
    };
    if args.n.is_some() || args.p.is_some() {
        let n = args.n.unwrap_or(spec.generation.n);
        let p = args.p.unwrap_or(spec.generation.p);
        spec.generation = GenerationSpec::reference_design(n, p, spec.generation.seed);
    }
    if let Some(ks) = &args.ks {
        spec.ks = ks.clone();
    }
    if let Some(s) = env_seed()?.or(args.seed) {
        spec.generation.seed = s;
    }
    spec.generation.validate()?;
    if spec.ks.iter().any(|&k| k == 0 || k > spec.generation.n) {
        return Err(Error::InvalidConfig("every K must lie in 1..=n".into()));
    }
    let rows = timing_benchmark(&spec)?;
    let mut buf = Vec::new();
    write_timing_csv(&rows, &mut buf).map_err(|e| Error::InvalidData(e.to_string()))?;
    write_output(args.output.as_deref(), &buf)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = GenerationSpec::reference_design(args.n, args.p, args.seed);
    if let Some(s) = env_seed()? {
        spec.seed = s;
    }
    if let Some(r) = args.censoring_rate {
        spec.target_censoring_rate = r;
    }
    spec.validate()?;
    let dataset = generate_dataset(&spec, default_censoring_bound(&spec)?)?;
    let mut buf = Vec::new();
    censlasso::data::write_csv_to(&dataset, &mut buf)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    write_output(args.output.as_deref(), &buf)
}
