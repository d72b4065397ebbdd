//! Command-line driver: argument parsing, configuration merging and the
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tsjm::predict::PredictionMethod;

use crate::config::{FitMethod, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tsjm", version, about = "Two-stage joint models for multiple longitudinal markers and survival")]
pub struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate replicate datasets with their latent truth.
    Simulate(SimulateArgs),
    /// Fit TSJM, MTS or the true-trajectory Cox model.
    Fit(FitArgs),
    /// Dynamic risk predictions from a fitted bundle.
    Predict(PredictArgs),
    /// IPCW AUC and Brier score of a predictions file.
    Evaluate(EvaluateArgs),
    /// Replicate simulation study.
    Study(StudyArgs),
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub longitudinal: Option<PathBuf>,
    #[arg(long)]
    pub survival: Option<PathBuf>,
    /// Baseline covariate columns of the survival file.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Covariates entering every marker's fixed effects.
    #[arg(long, value_delimiter = ',')]
    pub marker_covariates: Option<Vec<String>>,
}

#[derive(Debug, Default, Args)]
pub struct ChainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of posterior imputations M.
    #[arg(long)]
    pub imputations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subjects per replicate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Residual variance of every marker.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub rho_between: Option<f64>,
    #[arg(long)]
    pub rho_within: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: Option<FitMethod>,
    /// Simulation truth for `--method true`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub chain: ChainArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Bundles for competing causes.
    #[arg(long)]
    pub competing: Vec<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub landmarks: Option<Vec<f64>>,
    #[arg(long)]
    pub window: Option<f64>,
    /// first-order or monte-carlo.
    #[arg(long)]
    pub algorithm: Option<PredictionMethod>,
    /// Posterior draws L for Monte-Carlo prediction.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Second predictions file for paired comparisons.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub event_of_interest: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub comparison_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub chain: ChainArgs,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_data(cfg: &mut RunConfig, a: DataArgs) {
    if a.longitudinal.is_some() {
        cfg.data.longitudinal = a.longitudinal;
    }
    if a.survival.is_some() {
        cfg.data.survival = a.survival;
    }
    set(&mut cfg.data.schema.covariate_columns, a.covariates);
    set(&mut cfg.data.marker_covariates, a.marker_covariates);
}

fn apply_chain(opts: &mut tsjm::two_stage::TwoStageOptions, a: ChainArgs) {
    let chain = &mut opts.stage1.chain;
    set(&mut chain.iterations, a.iterations);
    set(&mut chain.burn_in, a.burn_in);
    set(&mut chain.thin, a.thin);
    set(&mut chain.seed, a.seed);
    set(&mut opts.imputations, a.imputations);
}

/// Loads the configuration file (if any) and applies the flags on top.
pub fn merged_config(cli: Cli) -> Result<(RunConfig, Command), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let command = match cli.command {
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            set(&mut s.out, a.out.clone());
            set(&mut s.replicates, a.replicates);
            set(&mut s.scenario.seed, a.seed);
            set(&mut s.scenario.n, a.n);
            if let Some(alpha) = a.alpha.clone() {
                let k = alpha.len();
                s.scenario.n_markers = k;
                s.scenario.alpha = alpha;
                s.scenario.beta.resize(k, s.scenario.beta.first().cloned().unwrap_or(vec![-0.5, 0.5, 0.5, 0.5]));
                let s2 = s.scenario.sigma2.first().copied().unwrap_or(1.0);
                s.scenario.sigma2.resize(k, s2);
            }
            if let Some(v) = a.sigma2 {
                s.scenario.sigma2 = vec![v; s.scenario.n_markers];
            }
            set(&mut s.scenario.rho_between, a.rho_between);
            set(&mut s.scenario.rho_within, a.rho_within);
            Command::Simulate(a)
        }
        Command::Fit(mut a) => {
            apply_data(&mut cfg, std::mem::take(&mut a.data));
            if a.truth.is_some() {
                cfg.data.truth = a.truth.clone();
            }
            set(&mut cfg.fit.method, a.method);
            set(&mut cfg.fit.out, a.out.clone());
            apply_chain(&mut cfg.fit.options, std::mem::take(&mut a.chain));
            Command::Fit(a)
        }
        Command::Predict(mut a) => {
            apply_data(&mut cfg, std::mem::take(&mut a.data));
            let p = &mut cfg.predict;
            set(&mut p.model, a.model.clone());
            if !a.competing.is_empty() {
                p.competing = a.competing.clone();
            }
            if a.queries.is_some() {
                p.queries = a.queries.clone();
            }
            set(&mut p.landmarks, a.landmarks.clone());
            set(&mut p.window, a.window);
            set(&mut p.algorithm, a.algorithm);
            set(&mut p.settings.draws, a.draws);
            set(&mut p.settings.seed, a.seed);
            set(&mut p.out, a.out.clone());
            Command::Predict(a)
        }
        Command::Evaluate(mut a) => {
            apply_data(&mut cfg, std::mem::take(&mut a.data));
            let e = &mut cfg.evaluate;
            set(&mut e.predictions, a.predictions.clone());
            if a.compare.is_some() {
                e.compare = a.compare.clone();
            }
            set(&mut e.event_of_interest, a.event_of_interest);
            set(&mut e.out, a.out.clone());
            set(&mut e.comparison_out, a.comparison_out.clone());
            Command::Evaluate(a)
        }
        Command::Study(mut a) => {
            set(&mut cfg.study.settings.replicates, a.replicates);
            set(&mut cfg.study.out, a.out.clone());
            if let Some(seed) = a.chain.seed.take() {
                cfg.study.settings.scenario.seed = seed;
            }
            apply_chain(&mut cfg.study.settings.fit, std::mem::take(&mut a.chain));
            Command::Study(a)
        }
    };
    Ok((cfg, command))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, command) = merged_config(cli)?;
    if let Some(n) = cfg.threads {
        // Fails only when a pool already exists, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match command {
        Command::Simulate(_) => commands::cmd_simulate(&cfg),
        Command::Fit(_) => commands::cmd_fit(&cfg),
        Command::Predict(_) => commands::cmd_predict(&cfg),
        Command::Evaluate(_) => commands::cmd_evaluate(&cfg),
        Command::Study(_) => commands::cmd_study(&cfg),
    }
}
