//! Command-line front end.
//!
//! Every subcommand accepts the global `--seed`, `--config <json>` and
//! `--out-dir`. A config file is either a flat object of flag names to
//! values or a `run-manifest.json` written by an earlier run; flags given on
//! the command line win over config values. Relative output paths resolve
//! against `--out-dir`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{
    ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::ctmc::{RateParams, Rates};
use crate::error::{Error, Result};
use crate::evaluation::{
    run_splits, state_occupancy, write_occupancy, Fitter, SplitMode, SplitSpec,
};
use crate::fleet::{
    self, classify, fit_thresholds, simulate_counts, simulate_panel, standardize, FleetPanel,
    PanelShape, SdConvention, StandardizeOptions, StatePanel, StateThresholds,
};
use crate::gp::{self, GpFitMethod, GpPrior, ImputeMode};
use crate::hmm::{evolve, predict_from, write_predictions, PredictRule};
use crate::inference::{
    derived_matrices, mle_with_prior, posterior_mean_params, sample_posterior_on, summarize,
    PriorSpec, SamplingScale,
};
use crate::mcmc::{PosteriorDraws, SamplerConfig, RHAT_WARNING};
use crate::sbc::{rank_histogram, run_sbc, SbcConfig};

pub const MANIFEST_NAME: &str = "run-manifest.json";
pub const THREADS_ENV: &str = "LATENTWEAR_THREADS";

const GLOBAL_IDS: [&str; 3] = ["seed", "config", "out_dir"];
const MANIFEST_META: [&str; 6] = [
    "tool",
    "version",
    "command",
    "timestamp_unix",
    "args",
    "out_dir",
];

#[derive(Debug, Parser)]
#[command(
    name = "latentwear",
    version,
    about = "Latent deterioration inference from failure-count panels"
)]
pub struct Cli {
    /// Seed for every random choice; required by stochastic subcommands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config or run manifest supplying defaults for unset flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a state panel (or raw counts) from known parameters.
    Simulate(SimulateArgs),
    /// Fill missing counts with the hierarchical Gaussian-process model.
    Impute(ImputeArgs),
    /// Standardize counts and classify them into three states by tertiles.
    Classify(ClassifyArgs),
    /// Fit rates and maintenance probabilities to a state panel.
    Fit(FitArgs),
    /// Predict the shared state trajectory from fitted parameters.
    Predict(PredictArgs),
    /// Repeated train/test split experiment.
    Evaluate(EvaluateArgs),
    /// Simulation-based calibration of the sampler.
    Sbc(SbcArgs),
    /// Impute, classify, fit, predict and evaluate in one run.
    Pipeline(PipelineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Impute(_) => "impute",
            Command::Classify(_) => "classify",
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Sbc(_) => "sbc",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

const SUBCOMMANDS: [&str; 8] = [
    "simulate", "impute", "classify", "fit", "predict", "evaluate", "sbc", "pipeline",
];

#[derive(Debug, Clone, Copy, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    /// Kept draws per chain.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Mcmc,
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputeMethod {
    Optimize,
    Mcmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputeModeArg {
    Mean,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Natural,
    LogLogit,
}

impl From<ScaleArg> for SamplingScale {
    fn from(a: ScaleArg) -> Self {
        match a {
            ScaleArg::Natural => SamplingScale::Natural,
            ScaleArg::LogLogit => SamplingScale::LogLogit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SdArg {
    Sample,
    Population,
}

impl From<SdArg> for SdConvention {
    fn from(a: SdArg) -> Self {
        match a {
            SdArg::Sample => SdConvention::Sample,
            SdArg::Population => SdConvention::Population,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 99)]
    pub ships: usize,
    #[arg(long, default_value_t = 31)]
    pub ages: usize,
    /// Rates `l1,l2,l3`, repeated once per equal-length period.
    #[arg(long, default_value = "0.679,0.274,0.649")]
    pub lambda: String,
    #[arg(long, default_value_t = 0.787)]
    pub p21: f64,
    #[arg(long, default_value_t = 0.794)]
    pub p31: f64,
    #[arg(long, default_value_t = 1)]
    pub engine_types: usize,
    /// Probability that a cell is unobserved.
    #[arg(long, default_value_t = 0.0)]
    pub missingness: f64,
    /// Emit Poisson failure counts instead of states.
    #[arg(long)]
    pub counts: bool,
    /// Poisson means for states 1, 2, 3.
    #[arg(long, default_value = "1.5,4,8")]
    pub count_levels: String,
    #[arg(long, default_value = "fleet.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Number of ages; inferred from the data when omitted.
    #[arg(long)]
    pub ages: Option<usize>,
    #[arg(long, value_enum, default_value_t = ImputeMethod::Optimize)]
    pub method: ImputeMethod,
    /// Optimizer restarts.
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    /// Kept hyperparameter draws per chain.
    #[arg(long, default_value_t = 500)]
    pub draws: usize,
    /// Hyperparameter draws used for conditioning, thinned at equal stride.
    #[arg(long, default_value_t = 100)]
    pub imputation_draws: usize,
    #[arg(long, value_enum, default_value_t = ImputeModeArg::Mean)]
    pub mode: ImputeModeArg,
    #[arg(long, default_value = "imputed.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub sd_out: Option<PathBuf>,
    #[arg(long)]
    pub hyper_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ages: Option<usize>,
    /// Standardize within each engine type.
    #[arg(long)]
    pub by_engine: bool,
    #[arg(long, value_enum, default_value_t = SdArg::Sample)]
    pub sd_convention: SdArg,
    #[arg(long, default_value = "states.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "thresholds.json")]
    pub thresholds: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ages: Option<usize>,
    #[arg(long, value_enum, default_value_t = FitMethod::Mcmc)]
    pub method: FitMethod,
    #[arg(long, default_value_t = 1)]
    pub periods: usize,
    #[arg(long, default_value_t = crate::ctmc::DEFAULT_RATE_BOUND)]
    pub rate_bound: f64,
    /// Maximum-likelihood restarts.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Coordinates the sampler walks in.
    #[arg(long, value_enum, default_value_t = ScaleArg::Natural)]
    pub scale: ScaleArg,
    #[arg(long, default_value = "posterior.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "summary.json")]
    pub summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Posterior or point-estimate CSV written by `fit`.
    #[arg(long)]
    pub posterior: PathBuf,
    #[arg(long)]
    pub ages: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Argmax)]
    pub rule: RuleArg,
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ages: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub test_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = FitMethod::Mle)]
    pub fitter: FitMethod,
    #[arg(long, default_value_t = 1)]
    pub periods: usize,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Sum squared errors over ages instead of averaging them.
    #[arg(long)]
    pub sum_over_age: bool,
    /// Score the full panel as both training and test set.
    #[arg(long)]
    pub resubstitution: bool,
    #[arg(long, default_value = "mse.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub occupancy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SbcArgs {
    #[arg(long, default_value_t = 30)]
    pub ships: usize,
    #[arg(long, default_value_t = 15)]
    pub ages: usize,
    #[arg(long, default_value_t = 200)]
    pub replications: usize,
    #[arg(long, default_value_t = 63)]
    pub draws_per_rank: usize,
    #[arg(long, default_value_t = 1)]
    pub periods: usize,
    #[arg(long, default_value_t = crate::ctmc::DEFAULT_RATE_BOUND)]
    pub rate_bound: f64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = crate::sbc::SBC_WARMUP)]
    pub warmup: usize,
    /// Kept draws per chain before thinning.
    #[arg(long, default_value_t = crate::sbc::SBC_DRAWS)]
    pub draws: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::Natural)]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Freeze the proposal at this isotropic sd (negative control).
    #[arg(long)]
    pub frozen_proposal_sd: Option<f64>,
    #[arg(long, default_value = "ranks.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "hist.json")]
    pub histogram: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Raw count CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ages: Option<usize>,
    /// Optimizer restarts for the imputation hyperparameters.
    #[arg(long, default_value_t = 4)]
    pub impute_restarts: usize,
    #[arg(long)]
    pub by_engine: bool,
    #[arg(long, value_enum, default_value_t = SdArg::Sample)]
    pub sd_convention: SdArg,
    #[arg(long, value_enum, default_value_t = FitMethod::Mle)]
    pub fitter: FitMethod,
    #[arg(long, default_value_t = 1)]
    pub periods: usize,
    #[arg(long, default_value_t = crate::ctmc::DEFAULT_RATE_BOUND)]
    pub rate_bound: f64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 5)]
    pub test_size: usize,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for
/// usage and input errors, 1 for numerical or diagnostic failures.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cmd = Cli::command();
    let matches = match cmd.clone().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match execute(&cli, &cmd, &matches) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    let kind = if e.is_usage() { "usage" } else { "runtime" };
    eprintln!("latentwear: {kind} error: {e}");
    if e.is_usage() {
        2
    } else {
        1
    }
}

fn flag_present(argv: &[String], key: &str) -> bool {
    let long = format!("--{key}");
    let eq = format!("--{key}=");
    argv.iter().any(|a| *a == long || a.starts_with(&eq))
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

/// Inserts `--key value` for every config entry whose flag is absent from
/// `argv`, and the manifest's subcommand when none was given.
pub fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Error::schema(&path, "config must be a JSON object"));
    };
    if !argv
        .iter()
        .skip(1)
        .any(|a| SUBCOMMANDS.contains(&a.as_str()))
    {
        match obj.get("command").and_then(Value::as_str) {
            Some(c) if SUBCOMMANDS.contains(&c) => argv.insert(1.min(argv.len()), c.to_string()),
            _ => {
                return Err(Error::schema(
                    &path,
                    "no subcommand given and the config names none",
                ))
            }
        }
    }
    let mut entries: Vec<(String, Value)> = Vec::new();
    if let Some(Value::Object(args)) = obj.get("args") {
        entries.extend(args.iter().map(|(k, v)| (k.clone(), v.clone())));
        for key in ["seed", "out_dir"] {
            if let Some(v) = obj.get(key) {
                entries.push((key.to_string(), v.clone()));
            }
        }
    } else {
        entries.extend(
            obj.iter()
                .filter(|(k, _)| !MANIFEST_META.contains(&k.as_str()) || k.as_str() == "out_dir")
                .map(|(k, v)| (k.clone(), v.clone())),
        );
    }
    for (key, v) in entries {
        let key = key.replace('_', "-");
        if key == "config" || flag_present(&argv, &key) {
            continue;
        }
        let flag = format!("--{key}");
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => argv.push(flag),
            Value::String(s) => argv.extend([flag, s]),
            Value::Number(n) => argv.extend([flag, n.to_string()]),
            Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                argv.extend([flag, joined.join(",")]);
            }
            Value::Object(_) => {
                return Err(Error::schema(
                    &path,
                    format!("config key `{key}` holds an object"),
                ));
            }
        }
    }
    Ok(argv)
}

/// Resolved subcommand flags, defaults included, keyed by long flag name.
fn resolved_args(cmd: &clap::Command, matches: &ArgMatches) -> Map<String, Value> {
    let mut out = Map::new();
    let Some((name, sub)) = matches.subcommand() else {
        return out;
    };
    let Some(sub_cmd) = cmd.find_subcommand(name) else {
        return out;
    };
    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if GLOBAL_IDS.contains(&id) || matches!(id, "help" | "version") {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            out.insert(long.to_string(), Value::Bool(sub.get_flag(id)));
        } else if let Some(raw) = sub.get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(long.to_string(), Value::String(vals.join(",")));
        }
    }
    out
}

fn require_seed(cli: &Cli) -> Result<u64> {
    cli.seed.ok_or_else(|| {
        Error::InvalidInput(format!(
            "`{}` is stochastic and needs an explicit --seed",
            cli.command.name()
        ))
    })
}

struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn create(&self, p: &Path) -> Result<BufWriter<File>> {
        let path = self.path(p);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(&path, e))
    }

    fn json<T: Serialize>(&self, p: &Path, value: &T) -> Result<()> {
        let mut w = self.create(p)?;
        serde_json::to_writer_pretty(&mut w, value)
            .map_err(|e| Error::Numerical(format!("serializing {}: {e}", p.display())))?;
        writeln!(w).map_err(|e| Error::io(self.path(p), e))?;
        w.flush().map_err(|e| Error::io(self.path(p), e))
    }
}

fn execute(cli: &Cli, cmd: &clap::Command, matches: &ArgMatches) -> Result<()> {
    let out = Outputs {
        dir: cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, require_seed(cli)?, &out)?,
        Command::Impute(a) => impute_cmd(a, require_seed(cli)?, &out)?,
        Command::Classify(a) => classify_cmd(a, &out)?,
        Command::Fit(a) => fit_cmd(a, require_seed(cli)?, &out)?,
        Command::Predict(a) => {
            let seed = match a.rule {
                RuleArg::Sample => Some(require_seed(cli)?),
                RuleArg::Argmax => cli.seed,
            };
            predict_cmd(a, seed, &out)?
        }
        Command::Evaluate(a) => evaluate_cmd(a, require_seed(cli)?, &out)?,
        Command::Sbc(a) => sbc_cmd(a, require_seed(cli)?, &out)?,
        Command::Pipeline(a) => pipeline_cmd(a, require_seed(cli)?, &out)?,
    }
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "tool": "latentwear",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "seed": cli.seed,
        "out_dir": out.dir.display().to_string(),
        "args": resolved_args(cmd, matches),
        "timestamp_unix": timestamp,
    });
    out.json(Path::new(MANIFEST_NAME), &manifest)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

fn simulate_cmd(a: &SimulateArgs, seed: u64, out: &Outputs) -> Result<()> {
    let lambda = parse_list(&a.lambda, "--lambda")?;
    if lambda.is_empty() || lambda.len() % 3 != 0 {
        return Err(Error::InvalidInput(format!(
            "--lambda needs a multiple of 3 rates, got {}",
            lambda.len()
        )));
    }
    let rates: Vec<Rates> = lambda
        .chunks(3)
        .map(|c| Rates::new(c[0], c[1], c[2]))
        .collect();
    let params = RateParams::equal_periods(a.ages, rates, a.p21, a.p31)?;
    let shape = PanelShape {
        n_ships: a.ships,
        max_age: a.ages,
        n_engine_types: a.engine_types,
    };
    let states = simulate_panel(&params, shape, a.missingness, seed)?;
    let w = out.create(&a.out)?;
    if a.counts {
        let levels = parse_list(&a.count_levels, "--count-levels")?;
        let levels: [f64; 3] = levels
            .try_into()
            .map_err(|_| Error::InvalidInput("--count-levels needs 3 values".into()))?;
        let counts = simulate_counts(&states, levels, seed)?;
        fleet::write_panel(&counts, w)
    } else {
        fleet::write_states(&states, w)
    }
}

fn thin_draws(draws: &PosteriorDraws, keep: usize) -> Result<PosteriorDraws> {
    let total = draws.total_draws();
    if keep == 0 || total <= keep {
        return Ok(draws.clone());
    }
    let stride = total / keep;
    let kept: Vec<Vec<f64>> = (0..keep).map(|i| draws.draw(i * stride).to_vec()).collect();
    PosteriorDraws::new(draws.names().to_vec(), vec![kept], vec![f64::NAN])
}

fn impute_panel(
    panel: &FleetPanel,
    method: GpFitMethod,
    keep: usize,
    mode: ImputeMode,
    seed: u64,
) -> Result<gp::ImputationResult> {
    let prior = GpPrior::for_panel(panel);
    let hyper = gp::fit_hyperparams(panel, prior, method, seed)?;
    let used = thin_draws(&hyper, keep)?;
    let mut result = gp::impute(panel, &used, mode)?;
    result.hyper_draws = Some(hyper);
    Ok(result)
}

fn impute_cmd(a: &ImputeArgs, seed: u64, out: &Outputs) -> Result<()> {
    let panel = fleet::load_panel(&a.input, a.ages)?;
    let method = match a.method {
        ImputeMethod::Optimize => GpFitMethod::Optimize {
            restarts: a.restarts,
        },
        ImputeMethod::Mcmc => GpFitMethod::Mcmc(SamplerConfig {
            chains: a.chains,
            warmup: a.warmup,
            draws: a.draws,
            ..SamplerConfig::default()
        }),
    };
    let mode = match a.mode {
        ImputeModeArg::Mean => ImputeMode::Mean,
        ImputeModeArg::Sample => ImputeMode::Sample {
            seed: crate::derive_seed(seed, 1),
        },
    };
    let result = impute_panel(&panel, method, a.imputation_draws, mode, seed)?;
    fleet::write_panel(&result.filled, out.create(&a.out)?)?;
    if let Some(p) = &a.sd_out {
        fleet::write_panel(&result.sd, out.create(p)?)?;
    }
    if let (Some(p), Some(h)) = (&a.hyper_out, &result.hyper_draws) {
        h.write_csv(out.create(p)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ThresholdsFile<'a> {
    b1: f64,
    b2: f64,
    lo: f64,
    hi: f64,
    mean: f64,
    sd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    by_engine: Option<&'a Vec<fleet::Affine>>,
}

fn classify_panel(
    panel: &FleetPanel,
    by_engine: bool,
    convention: SdConvention,
) -> Result<(StatePanel, ThresholdsOut)> {
    let (z, transform) = standardize(
        panel,
        StandardizeOptions {
            by_engine,
            convention,
        },
    )?;
    let thresholds = fit_thresholds(&z)?;
    Ok((
        classify(&z, &thresholds),
        ThresholdsOut {
            thresholds,
            transform,
        },
    ))
}

struct ThresholdsOut {
    thresholds: StateThresholds,
    transform: fleet::Standardization,
}

impl ThresholdsOut {
    fn file(&self) -> ThresholdsFile<'_> {
        ThresholdsFile {
            b1: self.thresholds.b1,
            b2: self.thresholds.b2,
            lo: self.thresholds.lo,
            hi: self.thresholds.hi,
            mean: self.transform.mean,
            sd: self.transform.sd,
            by_engine: self.transform.by_engine.as_ref(),
        }
    }
}

fn classify_cmd(a: &ClassifyArgs, out: &Outputs) -> Result<()> {
    let panel = fleet::load_panel(&a.input, a.ages)?;
    let (states, th) = classify_panel(&panel, a.by_engine, a.sd_convention.into())?;
    fleet::write_states(&states, out.create(&a.out)?)?;
    out.json(&a.thresholds, &th.file())
}

#[derive(Serialize)]
struct FitSummary {
    method: &'static str,
    n_periods: usize,
    params: Vec<crate::inference::ParamSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_rhat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rhat_warning: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    acceptance: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrices: Option<crate::inference::DerivedMatrices>,
}

fn fit_panel(
    panel: &StatePanel,
    method: FitMethod,
    prior: PriorSpec,
    periods: usize,
    restarts: usize,
    (sampler, scale): (SamplerConfig, SamplingScale),
    seed: u64,
) -> Result<(PosteriorDraws, FitSummary)> {
    match method {
        FitMethod::Mle => {
            let fit = mle_with_prior(panel, prior, periods, restarts, seed)?;
            let draws =
                PosteriorDraws::point(RateParams::param_names(periods), fit.params.to_vec())?;
            let summary = FitSummary {
                method: "mle",
                n_periods: periods,
                params: summarize(&draws),
                log_likelihood: Some(fit.log_likelihood),
                max_rhat: None,
                rhat_warning: None,
                acceptance: None,
                matrices: None,
            };
            Ok((draws, summary))
        }
        FitMethod::Mcmc => {
            let draws = sample_posterior_on(panel, prior, periods, scale, &sampler, seed)?;
            if draws.rhat_warning() {
                eprintln!(
                    "latentwear: warning: max split-R-hat {:.3} exceeds {RHAT_WARNING}",
                    draws.max_rhat()
                );
            }
            let summary = FitSummary {
                method: "mcmc",
                n_periods: periods,
                params: summarize(&draws),
                log_likelihood: None,
                max_rhat: Some(draws.max_rhat()),
                rhat_warning: Some(draws.rhat_warning()),
                acceptance: Some(draws.acceptance_rates().to_vec()),
                matrices: Some(derived_matrices(&draws)?),
            };
            Ok((draws, summary))
        }
    }
}

fn fit_cmd(a: &FitArgs, seed: u64, out: &Outputs) -> Result<()> {
    let panel = fleet::load_states(&a.input, a.ages)?;
    let prior = PriorSpec::new(a.rate_bound)?;
    let (draws, summary) = fit_panel(
        &panel,
        a.method,
        prior,
        a.periods,
        a.restarts,
        (a.sampler.config(), a.scale.into()),
        seed,
    )?;
    draws.write_csv(out.create(&a.out)?)?;
    out.json(&a.summary, &summary)
}

fn predict_cmd(a: &PredictArgs, seed: Option<u64>, out: &Outputs) -> Result<()> {
    let draws = PosteriorDraws::load_csv(&a.posterior)?;
    let params = posterior_mean_params(&draws, a.ages)?;
    let traj = evolve(&params, a.ages)?;
    let rule = match (a.rule, seed) {
        (RuleArg::Sample, Some(s)) => PredictRule::Sample { seed: s },
        _ => PredictRule::Argmax,
    };
    let predicted = predict_from(&traj, rule);
    write_predictions(&traj, &predicted, out.create(&a.out)?)
}

fn make_fitter(
    method: FitMethod,
    restarts: usize,
    periods: usize,
    sampler: SamplerConfig,
    prior: PriorSpec,
) -> Fitter {
    match method {
        FitMethod::Mle => Fitter::Mle {
            restarts,
            n_periods: periods,
        },
        FitMethod::Mcmc => Fitter::Mcmc {
            config: sampler,
            prior,
            n_periods: periods,
        },
    }
}

fn evaluate_panel(
    panel: &StatePanel,
    fitter: &Fitter,
    spec: &SplitSpec,
    sum_over_age: bool,
    out: &Outputs,
    mse_path: &Path,
    summary_path: Option<&Path>,
    occupancy_path: Option<&Path>,
) -> Result<()> {
    let report = run_splits(panel, spec, fitter, sum_over_age)?;
    report.write_csv(out.create(mse_path)?)?;
    if let Some(p) = summary_path {
        out.json(
            p,
            &json!({
                "mean_train_mse": report.mean_train_mse,
                "mean_test_mse": report.mean_test_mse,
                "relative_gap": report.relative_gap(),
                "failed": report.failed,
                "histogram": report.histogram,
            }),
        )?;
    }
    if let Some(p) = occupancy_path {
        let params = fitter.fit(panel, spec.seed)?;
        let traj = evolve(&params, panel.max_age())?;
        let predicted = predict_from(&traj, PredictRule::Argmax);
        write_occupancy(&state_occupancy(panel), Some(&predicted), out.create(p)?)?;
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, seed: u64, out: &Outputs) -> Result<()> {
    let panel = fleet::load_states(&a.input, a.ages)?;
    let fitter = make_fitter(
        a.fitter,
        a.restarts,
        a.periods,
        a.sampler.config(),
        PriorSpec::default(),
    );
    let spec = SplitSpec {
        n_test: a.test_size,
        n_repeats: a.repeats,
        seed,
        mode: if a.resubstitution {
            SplitMode::Resubstitution
        } else {
            SplitMode::Random
        },
    };
    evaluate_panel(
        &panel,
        &fitter,
        &spec,
        a.sum_over_age,
        out,
        &a.out,
        a.summary.as_deref(),
        a.occupancy.as_deref(),
    )
}

fn sbc_cmd(a: &SbcArgs, seed: u64, out: &Outputs) -> Result<()> {
    let cfg = SbcConfig {
        prior: PriorSpec::new(a.rate_bound)?,
        n_ships: a.ships,
        max_age: a.ages,
        n_periods: a.periods,
        replications: a.replications,
        draws_per_rank: a.draws_per_rank,
        sampler: SamplerConfig {
            chains: a.chains,
            warmup: a.warmup,
            draws: a.draws,
            frozen_proposal_sd: a.frozen_proposal_sd,
            ..SamplerConfig::default()
        },
        scale: a.scale.into(),
    };
    let table = run_sbc(&cfg, seed)?;
    table.write_csv(out.create(&a.out)?)?;
    let hist = rank_histogram(&table, a.bins)?;
    out.json(
        &a.histogram,
        &json!({ "histogram": hist, "failed": table.failed }),
    )
}

fn pipeline_cmd(a: &PipelineArgs, seed: u64, out: &Outputs) -> Result<()> {
    let raw = fleet::load_panel(&a.input, a.ages)?;
    let counts = if raw.n_missing() > 0 {
        let result = impute_panel(
            &raw,
            GpFitMethod::Optimize {
                restarts: a.impute_restarts,
            },
            1,
            ImputeMode::Mean,
            crate::derive_seed(seed, 0),
        )?;
        fleet::write_panel(&result.filled, out.create(Path::new("imputed.csv"))?)?;
        fleet::write_panel(&result.sd, out.create(Path::new("imputed_sd.csv"))?)?;
        if let Some(h) = &result.hyper_draws {
            h.write_csv(out.create(Path::new("gp_hyper.csv"))?)?;
        }
        result.filled
    } else {
        raw
    };

    let (states, th) = classify_panel(&counts, a.by_engine, a.sd_convention.into())?;
    fleet::write_states(&states, out.create(Path::new("states.csv"))?)?;
    out.json(Path::new("thresholds.json"), &th.file())?;

    let prior = PriorSpec::new(a.rate_bound)?;
    let sampler = a.sampler.config();
    let fit_seed = crate::derive_seed(seed, 1);
    let (draws, summary) = fit_panel(
        &states,
        a.fitter,
        prior,
        a.periods,
        a.restarts,
        (sampler, SamplingScale::default()),
        fit_seed,
    )?;
    draws.write_csv(out.create(Path::new("posterior.csv"))?)?;
    out.json(Path::new("summary.json"), &summary)?;

    let params = posterior_mean_params(&draws, states.max_age())?;
    let traj = evolve(&params, states.max_age())?;
    let predicted = predict_from(&traj, PredictRule::Argmax);
    write_predictions(&traj, &predicted, out.create(Path::new("predictions.csv"))?)?;

    let fitter = make_fitter(a.fitter, a.restarts, a.periods, sampler, prior);
    let spec = SplitSpec {
        n_test: a.test_size,
        n_repeats: a.repeats,
        seed: crate::derive_seed(seed, 2),
        mode: SplitMode::Random,
    };
    let report = run_splits(&states, &spec, &fitter, false)?;
    report.write_csv(out.create(Path::new("mse.csv"))?)?;
    out.json(
        Path::new("mse_summary.json"),
        &json!({
            "mean_train_mse": report.mean_train_mse,
            "mean_test_mse": report.mean_test_mse,
            "relative_gap": report.relative_gap(),
            "failed": report.failed,
            "histogram": report.histogram,
        }),
    )?;
    write_occupancy(
        &state_occupancy(&states),
        Some(&predicted),
        out.create(Path::new("occupancy.csv"))?,
    )
}

/// Caps the global thread pool at `LATENTWEAR_THREADS` when set.
pub fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}
