//! `mlbranch`: price digital options with branching MLMC and run the
//! diagnostic studies.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlbranch_core::config::{parse_config, RunConfig, SEED_ENV};

use crate::commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "mlbranch", version, about = "Branching multilevel Monte Carlo for digital options")]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (falls back to MLMC_BRANCH_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress the summary on standard output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Directory for CSV tables.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override config keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Digital set name.
    #[arg(long, global = true)]
    payoff: Option<String>,
    #[arg(long, global = true)]
    threshold: Option<String>,
    #[arg(long, global = true)]
    eta: Option<String>,
    #[arg(long, global = true)]
    tau0: Option<String>,
    /// `split` or `snap`.
    #[arg(long, global = true)]
    align: Option<String>,
    /// One path per sample instead of a branching tree.
    #[arg(long, global = true)]
    no_branching: bool,
    #[arg(long, global = true)]
    h0: Option<String>,
    /// Refinement factor between levels.
    #[arg(long = "refinement", global = true)]
    refinement: Option<String>,
    /// Number of GBM assets.
    #[arg(long = "gbm-d", global = true)]
    gbm_d: Option<String>,
    /// Weak order for the bias test, or `auto`.
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long = "max-level", global = true)]
    max_level: Option<String>,
    #[arg(long, global = true)]
    warmup: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", global = true)]
    params: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the adaptive MLMC estimator.
    Price {
        #[arg(long)]
        eps: Option<String>,
    },
    /// Run one of the diagnostic studies.
    Study {
        #[command(subcommand)]
        study: Study,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args, Debug)]
struct LevelArgs {
    /// Inclusive level range such as `2..9`.
    #[arg(long)]
    levels: Option<String>,
    /// Samples per level.
    #[arg(long)]
    n: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Study {
    /// Level-difference variance against h, plain and branching.
    Variance(LevelArgs),
    /// Work per sample against h.
    Work(LevelArgs),
    /// Kurtosis of the level difference against h.
    Kurtosis(LevelArgs),
    /// Coupled strong errors against h.
    Strong(LevelArgs),
    /// Conditional second moment of the level difference against the lag.
    Tau {
        #[arg(long)]
        h: Option<String>,
        /// Comma-separated lags.
        #[arg(long)]
        taus: Option<String>,
        #[arg(long = "n-outer")]
        n_outer: Option<String>,
        #[arg(long = "n-inner")]
        n_inner: Option<String>,
    },
    /// Boundary-density check in the radius and the lag.
    CondDensity {
        #[arg(long)]
        deltas: Option<String>,
        #[arg(long)]
        taus: Option<String>,
        #[arg(long = "n-outer")]
        n_outer: Option<String>,
        #[arg(long = "n-inner")]
        n_inner: Option<String>,
    },
    /// Total work times eps^2 over a tolerance grid.
    Complexity {
        #[arg(long = "eps-list")]
        eps_list: Option<String>,
        #[arg(long)]
        repeats: Option<String>,
    },
}

fn collect_overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for p in &cli.overrides.params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--param expects KEY=VALUE, got `{p}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let o = &cli.overrides;
    let mut push = |key: &str, v: &Option<String>| {
        if let Some(v) = v {
            out.push((key.to_string(), v.clone()));
        }
    };
    push("model", &o.model);
    push("scheme", &o.scheme);
    push("payoff.set", &o.payoff);
    push("payoff.threshold", &o.threshold);
    push("branch.eta", &o.eta);
    push("branch.tau0", &o.tau0);
    push("branch.align", &o.align);
    push("mlmc.h0", &o.h0);
    push("mlmc.M", &o.refinement);
    push("gbm.d", &o.gbm_d);
    push("mlmc.alpha", &o.alpha);
    push("mlmc.max_level", &o.max_level);
    push("mlmc.warmup", &o.warmup);
    push("seed", &cli.seed.map(|s| s.to_string()));
    push("output", &cli.output.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::Price { eps } => push("mlmc.eps", eps),
        Command::Selftest => {}
        Command::Study { study } => match study {
            Study::Variance(a) | Study::Work(a) | Study::Kurtosis(a) | Study::Strong(a) => {
                push("study.levels", &a.levels);
                push("study.n", &a.n);
            }
            Study::Tau { h, taus, n_outer, n_inner } => {
                push("study.h", h);
                push("study.taus", taus);
                push("study.n_outer", n_outer);
                push("study.n_inner", n_inner);
            }
            Study::CondDensity { deltas, taus, n_outer, n_inner } => {
                push("study.deltas", deltas);
                push("study.density_taus", taus);
                push("study.n_outer", n_outer);
                push("study.n_inner", n_inner);
            }
            Study::Complexity { eps_list, repeats } => {
                push("study.eps_list", eps_list);
                push("study.repeats", repeats);
            }
        },
    }
    if o.no_branching {
        out.push(("branch.enabled".into(), "false".into()));
    }
    Ok(out)
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let overrides = collect_overrides(cli)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    Ok(parse_config(&text, &overrides, env_seed.as_deref())?)
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let out = commands::Output::new(&cfg, cli.quiet)?;
    match &cli.command {
        Command::Price { .. } => commands::price(&cfg, &out),
        Command::Selftest => commands::selftest(&cfg, &out),
        Command::Study { study } => match study {
            Study::Variance(_) => commands::level_study(&cfg, &out, commands::LevelKind::Variance),
            Study::Work(_) => commands::level_study(&cfg, &out, commands::LevelKind::Work),
            Study::Kurtosis(_) => commands::level_study(&cfg, &out, commands::LevelKind::Kurtosis),
            Study::Strong(_) => commands::strong(&cfg, &out),
            Study::Tau { .. } => commands::tau(&cfg, &out),
            Study::CondDensity { .. } => commands::cond_density(&cfg, &out),
            Study::Complexity { .. } => commands::complexity(&cfg, &out),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
