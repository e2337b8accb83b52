//! Command-line front end for the experiment suites.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentConfig, ExperimentResult, OracleKind};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_BAD_CONFIG: i32 = 2;
pub const EXIT_UNWRITABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lsa-icl", version, about = "In-context regression with linear self-attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration; missing fields take the suite defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LSA_ICL_OUT")]
    pub out: Option<PathBuf>,
    /// Prompts per Monte Carlo estimate at short prompt lengths.
    #[arg(long, global = true, value_parser = parse_count)]
    pub mc_budget: Option<usize>,
    /// Integrate from an initialization outside the guaranteed regime.
    #[arg(long, global = true)]
    pub allow_noncompliant_init: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print every check, not only failures.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the gradient flow and compare with the closed-form minimum.
    Converge,
    /// Closed-form risk against Monte Carlo, with scaling slopes in M and N.
    RiskSweep,
    /// Task, query and covariate-scale shifts.
    Shift,
    /// Bias of the random-covariance minimum on fresh prompts.
    RandomCov,
    /// Monte Carlo check of a moment identity.
    Oracle(OracleArgs),
    /// Online minibatch training against the flow limit.
    Sgd,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub kind: OracleKindArg,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_parser = parse_count, default_value = "1e6")]
    pub samples: usize,
    /// Context length for the gamma-moment oracle.
    #[arg(long)]
    pub n_ctx: Option<usize>,
    /// Number of seeded instances.
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum OracleKindArg {
    FourthMoment,
    GammaMoment,
}

/// Accepts plain integers and integral scientific notation such as `1e6`.
pub fn parse_count(s: &str) -> std::result::Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    let x: f64 = s.parse().map_err(|_| format!("not a count: {s}"))?;
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(format!("not a non-negative integer: {s}"))
    }
}

impl Command {
    pub fn suite(&self) -> &'static str {
        match self {
            Command::Converge => "converge",
            Command::RiskSweep => "risk-sweep",
            Command::Shift => "shift",
            Command::RandomCov => "random-cov",
            Command::Oracle(_) => "oracle",
            Command::Sgd => "sgd",
        }
    }
}

/// Resolves the configuration: suite preset, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let suite = cli.command.suite();
    let mut cfg = match &cli.common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            ExperimentConfig::with_overrides(suite, &text)?
        }
        None => ExperimentConfig::preset(suite),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.common.mc_budget {
        cfg.mc_budget = b;
    }
    if cli.common.allow_noncompliant_init {
        cfg.allow_noncompliant_init = true;
    }
    if let Command::Oracle(args) = &cli.command {
        if let Some(d) = args.d {
            cfg.d = d;
            cfg.covariance = experiments::CovarianceConfig::Identity;
        }
        if let Some(n) = args.n_ctx {
            cfg.n_ctx = Some(n);
        }
    }
    if let Some(out) = &cli.common.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(cfg: &ExperimentConfig, suite: &str) -> PathBuf {
    cfg.output
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(suite))
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".lsa-icl-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

pub fn run_suite(cli: &Cli, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    match &cli.command {
        Command::Converge => experiments::run_convergence_suite(cfg),
        Command::RiskSweep => experiments::run_risk_sweep(cfg),
        Command::Shift => experiments::run_shift_suite(cfg),
        Command::RandomCov => experiments::run_random_cov_failure(cfg),
        Command::Sgd => experiments::run_sgd_suite(cfg),
        Command::Oracle(args) => {
            let kind = match args.kind {
                OracleKindArg::FourthMoment => OracleKind::FourthMoment,
                OracleKindArg::GammaMoment => OracleKind::GammaMoment,
            };
            experiments::run_oracle_suite(cfg, kind, args.samples, args.pairs)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Csv(_) => EXIT_UNWRITABLE,
        _ => EXIT_BAD_CONFIG,
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(t) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_BAD_CONFIG;
        }
    };
    let suite = cli.command.suite();
    let dir = output_dir(&cfg, suite);
    if let Err(e) = ensure_writable(&dir) {
        eprintln!("error: cannot write to {}: {e}", dir.display());
        return EXIT_UNWRITABLE;
    }
    let result = match run_suite(&cli, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    for r in &result.records {
        if cli.common.verbose > 0 || !r.passed {
            println!("{r}");
        }
    }
    if let Err(e) = experiments::emit_manifest(&result, &dir) {
        eprintln!("error: cannot write to {}: {e}", dir.display());
        return EXIT_UNWRITABLE;
    }
    println!(
        "{}: {} passed, {} failed (config {}, seed {}) -> {}",
        result.suite,
        result.pass_count(),
        result.fail_count(),
        &result.provenance.config_hash[..12],
        result.provenance.seed,
        dir.display()
    );
    if result.all_passed() {
        EXIT_PASS
    } else {
        EXIT_CHECK_FAILED
    }
}
