use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use mlbranch_core::config::RunConfig;
use mlbranch_core::diagnostics::{
    complexity_sweep, cond_density_study, fit_rate, kurtosis_study, strong_convergence_study, tau_study,
    variance_study, work_study, RateFit, StudyTable,
};
use mlbranch_core::estimators::EstimatorConfig;
use mlbranch_core::mlmc::run_mlmc;
use mlbranch_core::selftest::{run_selftest, SelfTestSizes};
use mlbranch_core::Error;

const DEFAULT_OUTPUT: &str = "results";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                Error::InvalidParameter { .. } | Error::Incompatible { .. } | Error::Parse { .. } | Error::Override { .. },
            ) => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

/// Where tables go and whether the summary is printed.
pub struct Output {
    dir: PathBuf,
    quiet: bool,
}

impl Output {
    pub fn new(cfg: &RunConfig, quiet: bool) -> Result<Output, CliError> {
        let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        Ok(Output { dir, quiet })
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn write(&self, table: &StudyTable) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.dir).map_err(|source| CliError::Io { path: self.dir.clone(), source })?;
        let path = self.dir.join(format!("{}.csv", table.name));
        fs::write(&path, table.to_csv()).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }

    fn fit(&self, what: &str, table: &StudyTable, column: &str) {
        match fit_rate(table, column) {
            Ok(f) => self.say(format!("{what}: {}", fit_line(&f))),
            Err(e) => self.say(format!("{what}: no fit ({e})")),
        }
    }
}

fn fit_line(f: &RateFit) -> String {
    format!(
        "slope {:.3} (R^2 {:.3}, {} points, x in [{:.3e}, {:.3e}])",
        f.slope, f.r_squared, f.points, f.abscissa_min, f.abscissa_max
    )
}

/// The configured estimator and, when branching is on, its plain twin first.
fn plain_and_branching(cfg: &RunConfig) -> Result<Vec<EstimatorConfig>, CliError> {
    let est = cfg.estimator()?;
    if est.branching.is_none() {
        return Ok(vec![est]);
    }
    Ok(vec![est.clone().with_branching(None), est])
}

fn validated(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    Ok(())
}

pub fn price(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let est = cfg.estimator()?;
    let res = run_mlmc(&est, &cfg.mlmc)?;
    let mut table = StudyTable::new(
        "price",
        ["mean", "variance", "mean_work", "kurtosis", "depth"].map(String::from).to_vec(),
    )
    .meta("config", est.label())
    .meta("model", est.model.name)
    .meta("set", est.set.name())
    .meta("eps", res.eps)
    .meta("estimate", res.estimate)
    .meta("bias_estimate", res.bias_estimate)
    .meta("alpha", res.alpha)
    .meta("total_work", res.total_work)
    .meta("bias_unconverged", res.bias_unconverged)
    .meta("seed", cfg.seed);
    table.push_meta("abscissa", "level");
    table.push_meta("statistic", "sample count");
    for l in &res.levels {
        table.push(mlbranch_core::diagnostics::StudyRow {
            abscissa: f64::from(l.level),
            statistic: l.n as f64,
            stderr: 0.0,
            n: l.n,
            aux: vec![l.mean, l.variance, l.mean_work, l.kurtosis.unwrap_or(f64::NAN), f64::from(l.depth)],
        })?;
    }
    out.say(format!("config        {}", est.label()));
    out.say(format!("estimate      {:.6}", res.estimate));
    out.say(format!("std error     {:.3e}", res.estimator_variance().sqrt()));
    out.say(format!("bias          {:.3e} (alpha {:.3})", res.bias_estimate, res.alpha));
    out.say(format!("total work    {:.4e}", res.total_work));
    out.say(format!("finest level  {}", res.finest_level));
    out.say(format!("{:>5} {:>12} {:>12} {:>12} {:>12} {:>8}", "level", "N", "mean", "variance", "work", "kurt"));
    for l in &res.levels {
        out.say(format!(
            "{:>5} {:>12} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.2}",
            l.level,
            l.n,
            l.mean,
            l.variance,
            l.mean_work,
            l.kurtosis.unwrap_or(f64::NAN)
        ));
    }
    out.write(&table)?;
    if res.bias_unconverged {
        eprintln!("warning: level cap {} reached before the bias test passed", cfg.mlmc.max_level);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy, Debug)]
pub enum LevelKind {
    Variance,
    Work,
    Kurtosis,
}

pub fn level_study(cfg: &RunConfig, out: &Output, kind: LevelKind) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let configs = plain_and_branching(cfg)?;
    let levels = cfg.study.levels.clone();
    let n = cfg.study.n;
    let (table, suffix) = match kind {
        LevelKind::Variance => (variance_study(levels, n, &configs)?, "var"),
        LevelKind::Work => (work_study(levels, n, &configs)?, "work"),
        LevelKind::Kurtosis => (kurtosis_study(levels, n, &configs)?, "kurt"),
    };
    out.write(&table)?;
    for c in &configs {
        out.fit(&format!("{} {suffix} vs h", c.label()), &table, &format!("{}_{suffix}", c.label()));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn strong(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let est = cfg.estimator()?.with_branching(None);
    let table = strong_convergence_study(&est, cfg.study.levels.clone(), cfg.study.n)?;
    out.write(&table)?;
    out.fit("E|fine - coarse|^2 vs h", &table, "statistic");
    if table.rows.iter().any(|r| r.aux[0].is_finite()) {
        out.fit("E|fine - exact|^2 vs h", &table, "exact_mse");
    }
    if table.rows.iter().any(|r| r.aux[2].is_finite()) {
        out.fit("E|antithetic mean - coarse|^2 vs h", &table, "anti_mse");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn tau(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let est = cfg.estimator()?.with_branching(None);
    let level = cfg.study_level()?;
    let s = &cfg.study;
    let table = tau_study(&est, level, &s.taus, s.n_outer, s.n_inner)?;
    out.write(&table)?;
    out.fit("E[(E[dP | F_(1-tau)])^2] vs tau", &table, "statistic");
    Ok(ExitCode::SUCCESS)
}

pub fn cond_density(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let model = cfg.model_spec()?;
    let set = cfg.digital_set(&model)?;
    let report = cond_density_study(&model, &set, &cfg.study.cond_density, cfg.seed)?;
    out.write(&report.delta_sweep)?;
    out.write(&report.tau_sweep)?;
    out.fit("delta exponent", &report.delta_sweep, "statistic");
    out.fit("tau exponent", &report.tau_sweep, "statistic");
    Ok(ExitCode::SUCCESS)
}

pub fn complexity(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    validated(cfg)?;
    let configs = plain_and_branching(cfg)?;
    let table = complexity_sweep(&cfg.study.eps_list, &configs, &cfg.mlmc, cfg.study.repeats)?;
    out.write(&table)?;
    for c in &configs {
        out.fit(&format!("{} work*eps^2 vs eps", c.label()), &table, &format!("{}_work_eps2", c.label()));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn selftest(cfg: &RunConfig, out: &Output) -> Result<ExitCode, CliError> {
    let report = run_selftest(cfg.seed, &SelfTestSizes::default());
    for c in &report.checks {
        out.say(format!(
            "{} {:<22} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        ));
    }
    if report.passed() {
        out.say("selftest passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("selftest failed");
        Ok(ExitCode::from(1))
    }
}
