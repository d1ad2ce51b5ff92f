//! Command-line experiment harness for the `ossbb` engine.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or schema.
    Config(String),
    /// The engine failed or a numerical check did not pass.
    Numeric(ossbb::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(e) => write!(f, "numerical failure: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Parameter and component errors are configuration problems; the rest are numerical.
impl From<ossbb::Error> for CliError {
    fn from(e: ossbb::Error) -> Self {
        match e {
            ossbb::Error::InvalidParameter { .. } | ossbb::Error::UnknownComponent(_) | ossbb::Error::AboveBarrier { .. } => {
                CliError::Config(e.to_string())
            }
            e => CliError::Numeric(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ossbb", version, about = "Barrier option Monte Carlo with one-step survival")]
pub struct Cli {
    /// TOML run configuration; missing sections take the Table 1 defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Add wall-time columns.
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Price the barrier option with one or more estimators.
    Price(PriceArgs),
    /// Sensitivities by pathwise tangents or finite differences.
    Greeks(GreekArgs),
    /// Adaptive multilevel estimate.
    Mlmc(MlmcArgs),
    /// Empirical weak convergence order.
    Converge(ConvergeArgs),
    /// Check the closed-form price against a fine-grid simulation.
    Oracle(OracleArgs),
    /// Canned figure recipes.
    Figures(FigureArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub paths: Option<u64>,
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct PriceArgs {
    /// european, baseline, bb or oss_bb; repeatable.
    #[arg(long)]
    pub estimator: Vec<String>,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Args)]
pub struct GreekArgs {
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    /// S0, K, B or a model parameter name; repeatable.
    #[arg(long)]
    pub component: Vec<String>,
    #[arg(long)]
    pub step: Option<f64>,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Args)]
pub struct MlmcArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub n0: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    #[arg(long)]
    pub estimator: Vec<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub check_steps: Option<usize>,
    #[arg(long)]
    pub check_paths: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FigureArgs {
    pub figure: Figure,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
}

fn apply_sim(cfg: &mut RunConfig, sim: &SimArgs) {
    if let Some(n) = sim.steps {
        cfg.sim.n_steps = n;
    }
    if let Some(m) = sim.paths {
        cfg.sim.n_paths = m;
    }
    if let Some(s) = &sim.scheme {
        cfg.sim.scheme = s.clone();
    }
}

/// Loads the file, then lets flags override it.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = cli.seed {
        cfg.sim.seed = s;
    }
    if cli.threads.is_some() {
        cfg.sim.threads = cli.threads;
    }
    cfg.sim.timing |= cli.timing;
    match &cli.command {
        Command::Price(a) => {
            apply_sim(&mut cfg, &a.sim);
            if !a.estimator.is_empty() {
                cfg.price.estimators = a.estimator.clone();
            }
        }
        Command::Greeks(a) => {
            apply_sim(&mut cfg, &a.sim);
            if let Some(e) = &a.estimator {
                cfg.greeks.estimator = e.clone();
            }
            if let Some(m) = &a.method {
                cfg.greeks.method = m.clone();
            }
            if !a.component.is_empty() {
                cfg.greeks.components = a.component.clone();
            }
            if let Some(h) = a.step {
                cfg.greeks.step = h;
            }
        }
        Command::Mlmc(a) => {
            if let Some(e) = a.epsilon {
                cfg.mlmc.epsilon = e;
            }
            if let Some(n) = a.n0 {
                cfg.mlmc.n0 = n;
            }
        }
        Command::Converge(a) => {
            if !a.estimator.is_empty() {
                cfg.converge.estimators = a.estimator.clone();
            }
        }
        Command::Oracle(a) => {
            if let Some(n) = a.check_steps {
                cfg.oracle.check_steps = n;
            }
            if let Some(m) = a.check_paths {
                cfg.oracle.check_paths = m;
            }
        }
        Command::Figures(a) => apply_sim(&mut cfg, &a.sim),
    }
    Ok(cfg)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ossbb: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let (name, table) = commands::dispatch(&cli.command, &cfg)?;
    output::write_table(cli.out.as_deref(), name, &cfg, &table)
}
