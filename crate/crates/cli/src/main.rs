//! `cil`: treatment-control features, model fitting and simulation
//! experiments from the command line.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cil_core::inference::bma_estimate_with_levels;
use cil_core::io::{feature_matrix_csv, read_dataset_csv};
use cil_core::learn::fit_theta_with_sampler;
use cil_core::rng::derive_seed;
use cil_core::sim::{run_experiment, Method, Scenario, SimConfig};
use cil_core::{
    extract_features, validate_dataset, CilError, Dataset, FeatureMatrix, FeatureMethod, GibbsSampler, ModelPrior,
    ThetaVector,
};
use clap::{Args, Parser, Subcommand};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "cil", version, about = "Bayesian model averaging with learned confounder importance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Treatment-control association features.
    Features(FeaturesArgs),
    /// Learn the prior, sample models and report treatment effects.
    Fit(FitArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    input: PathBuf,
    /// TOML file with the `[columns]` role manifest.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[features] method`.
    #[arg(long, value_parser = ["lasso", "ridge"])]
    method: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Directory for inference.csv, samples.txt and theta_report.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides `[prior] model_prior`; anything but `cil` skips learning theta.
    #[arg(long, value_parser = ["cil", "betabinomial", "uniform"])]
    prior: Option<String>,
    /// Overrides `[theta] mode`.
    #[arg(long, value_parser = ["ep", "eb"])]
    theta_mode: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// fig1, growing-dim, sparsity, multitreat or augmented.
    scenario: String,
    /// True treatment effect in the single-treatment scenarios.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Replicates per cell.
    #[arg(long = "R", default_value_t = 50)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated subset of oracle, cil-ep, cil-eb, bma, dml, lasso.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Optional TOML file; its `[prior]`, `[mcmc]` and `[inference]` draws apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Add per-method wall-clock seconds to the long-format CSV.
    #[arg(long)]
    timing: bool,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn at(stage: &str, e: CilError) -> Self {
        let msg = format!("[{stage}] {e}");
        match e {
            CilError::InvalidParameter(_) => Failure::Usage(msg),
            CilError::DimensionMismatch(_)
            | CilError::NonFinite { .. }
            | CilError::ConstantColumns(_)
            | CilError::NonBinaryResponse { .. }
            | CilError::RidgeOnBinary(_)
            | CilError::Malformed { .. }
            | CilError::UnknownColumn(_)
            | CilError::Io(_) => Failure::Data(msg),
            CilError::RankDeficient(_) | CilError::TooManyModels { .. } | CilError::EmptyModelSet | CilError::Numerical(_) => {
                Failure::Numerical(msg)
            }
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Comment header shared by every output file.
fn header(command: &str, seed: u64, resolved: &str) -> String {
    let mut out = format!("# cil {}\n# command {command}\n# seed {seed}\n", env!("CARGO_PKG_VERSION"));
    for line in resolved.lines().filter(|l| !l.trim().is_empty()) {
        let _ = writeln!(out, "# config | {line}");
    }
    out
}

fn write_file(path: &Path, header: &str, body: &str) -> Outcome<()> {
    fs::write(path, format!("{header}{body}")).map_err(|e| Failure::Data(format!("[write] {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Outcome<Config> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("[config] {}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| Failure::Usage(format!("[config] {}: {e}", path.display())))
}

fn load_data(path: &Path, config: &Config) -> Outcome<Dataset> {
    if config.columns.treatments.is_empty() {
        return Err(Failure::Usage("[config] [columns] treatments must name at least one column".into()));
    }
    let file = fs::File::open(path).map_err(|e| Failure::Data(format!("[read] {}: {e}", path.display())))?;
    let raw = read_dataset_csv(file, &config.roles()).map_err(|e| Failure::at("read", e))?;
    validate_dataset(raw, config.features.standardize).map_err(|e| Failure::at("validate", e))
}

fn method_name(method: FeatureMethod) -> &'static str {
    match method {
        FeatureMethod::LassoBic => "lasso",
        FeatureMethod::MinNormRidge => "ridge",
    }
}

fn cmd_features(args: &FeaturesArgs) -> Outcome<()> {
    let mut config = load_config(&args.config)?;
    if let Some(m) = &args.method {
        config.features.method = m.clone();
    }
    let method = config.feature_method().map_err(Failure::Usage)?;
    let data = load_data(&args.input, &config)?;
    let features = extract_features(&data, method, None).map_err(|e| Failure::at("features", e))?;
    let mut head = header("features", args.seed, &config.to_toml());
    let _ = writeln!(head, "# method {}", method_name(method));
    for (t, name) in data.treatment_names().iter().enumerate() {
        let lambda = features.lambdas()[t].map_or("none".to_string(), |l| l.to_string());
        let _ = writeln!(head, "# treatment {name} family {} lambda {lambda}", features.families()[t].name());
    }
    let body = feature_matrix_csv(&features, data.control_names(), data.treatment_names()).map_err(|e| Failure::at("write", e))?;
    write_file(&args.output, &head, &body)
}

fn cmd_fit(args: &FitArgs) -> Outcome<()> {
    let mut config = load_config(&args.config)?;
    if let Some(p) = &args.prior {
        config.prior.model_prior = p.clone();
    }
    if let Some(m) = &args.theta_mode {
        config.theta.mode = m.clone();
    }
    let spec = config.prior_spec().map_err(Failure::Usage)?;
    let learn = config.learn_config(derive_seed(args.seed, "cli-learn", 0)).map_err(Failure::Usage)?;
    let method = config.feature_method().map_err(Failure::Usage)?;
    let data = load_data(&args.input, &config)?;
    spec.validate(data.j()).map_err(|e| Failure::at("config", e))?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Failure::Data(format!("[write] {}: {e}", args.out_dir.display())))?;
    let head = header("fit", args.seed, &config.to_toml());

    let mut sampler = GibbsSampler::new(&data, &spec).map_err(|e| Failure::at("sampling", e))?;
    let (features, theta) = if spec.model_prior == ModelPrior::Cil {
        let features = extract_features(&data, method, None).map_err(|e| Failure::at("features", e))?;
        let fit = fit_theta_with_sampler(&mut sampler, &data, &spec, &features, &learn).map_err(|e| Failure::at("theta", e))?;
        write_file(&args.out_dir.join("theta_report.txt"), &head, &fit.to_report())?;
        let theta = fit.theta().clone();
        (features, theta)
    } else {
        let theta = match &learn.group_map {
            Some(g) => ThetaVector::zeros_grouped(g.clone()).map_err(|e| Failure::at("config", e))?,
            None => ThetaVector::zeros(data.t()),
        };
        (FeatureMatrix::zeros(data.j(), data.t()), theta)
    };
    let samples = sampler
        .run(&theta, &features, &config.sampler(derive_seed(args.seed, "cli-final", 0)))
        .map_err(|e| Failure::at("sampling", e))?;
    write_file(&args.out_dir.join("samples.txt"), &head, &samples.to_text())?;
    let inference = bma_estimate_with_levels(
        &samples,
        &data,
        &spec,
        config.inference.draws,
        derive_seed(args.seed, "cli-bma", 0),
        &config.inference.levels,
    )
    .map_err(|e| Failure::at("inference", e))?;
    write_file(&args.out_dir.join("inference.csv"), &head, &inference.to_csv())?;
    if config.inference.write_draws {
        write_file(&args.out_dir.join("draws.csv"), &head, &inference.draws_csv())?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, workers: Option<usize>) -> Outcome<()> {
    let scenario = Scenario::parse(&args.scenario).ok_or_else(|| {
        Failure::Usage(format!(
            "[simulate] unknown scenario '{}' (expected fig1, growing-dim, sparsity, multitreat or augmented)",
            args.scenario
        ))
    })?;
    let methods: Vec<Method> = match &args.methods {
        Some(list) => list
            .iter()
            .map(|m| Method::parse(m.trim()).ok_or_else(|| Failure::Usage(format!("[simulate] unknown method '{m}'"))))
            .collect::<Outcome<_>>()?,
        None => Method::ALL.to_vec(),
    };
    let mut sim = SimConfig::default();
    if let Some(path) = &args.config {
        let config = load_config(path)?;
        sim.spec = config.prior_spec().map_err(Failure::Usage)?;
        sim.sampler = config.sampler(0);
        sim.n_draws = config.inference.draws;
    }
    let mut resolved = format!(
        "scenario = \"{}\"\nalpha = {}\nreplicates = {}\nmethods = [{}]\n",
        args.scenario,
        args.alpha,
        args.replicates,
        methods.iter().map(|m| format!("\"{}\"", m.name())).collect::<Vec<_>>().join(", ")
    );
    let _ = write!(
        resolved,
        "sweeps = {}\nburn_in = {}\nchains = {}\ndraws = {}\ncv_folds = {}\nprior = \"{:?}\"\n",
        sim.sampler.iterations, sim.sampler.burn_in, sim.sampler.chains, sim.n_draws, sim.folds, sim.spec
    );
    let cells = scenario.cells(args.alpha, args.replicates);
    let report = run_experiment(&cells, &methods, &sim, args.seed, workers).map_err(|e| Failure::at("simulate", e))?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Failure::Data(format!("[write] {}: {e}", args.out_dir.display())))?;
    let head = header("simulate", args.seed, &resolved);
    write_file(&args.out_dir.join("long.csv"), &head, &report.long_csv(args.timing))?;
    write_file(&args.out_dir.join("summary.csv"), &head, &report.summary_csv())?;
    write_file(&args.out_dir.join("plot_data.csv"), &head, &report.plot_data())?;
    for s in report.summaries.iter().filter(|s| s.flagged) {
        log::warn!("cell {} method {}: {} replicate failures", s.cell, s.method.name(), s.failures);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Features(a) => cmd_features(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a, cli.workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
