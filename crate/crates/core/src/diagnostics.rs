//! Empirical studies: per-level variance, work and kurtosis, conditional
//! second moments against the branching lag, the boundary-density check,
//! complexity sweeps and log-log rate fits.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use crate::branching::{
    walk_nested, BranchIndex, BranchSchedule, GridPos, LevelGrid, Stepper, TreeSetup, WorkCounter,
    MAX_CHANNELS,
};
use crate::error::{Error, Result};
use crate::estimators::{leaf_delta, map_shards, merge_in_order, DigitalSet, EstimatorConfig, LevelSampler};
use crate::mlmc::{run_mlmc, MlmcOptions, MomentAccumulator};
use crate::rng::SegmentStream;
use crate::schemes::Scheme;
use crate::sde_models::{ModelKind, ModelSpec};

/// Batches used for the kurtosis standard error.
const KURTOSIS_BATCHES: usize = 16;

/// Rows whose standard error reaches this fraction of the value are left out
/// of rate fits.
pub const FIT_NOISE_LIMIT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub abscissa: f64,
    pub statistic: f64,
    pub stderr: f64,
    pub n: u64,
    pub aux: Vec<f64>,
}

/// Rows of one study plus `key=value` metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub name: String,
    pub meta: Vec<(String, String)>,
    pub aux_names: Vec<String>,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn new(name: impl Into<String>, aux_names: Vec<String>) -> Self {
        StudyTable {
            name: name.into(),
            meta: Vec::new(),
            aux_names,
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    /// Append a row; abscissae must stay strictly monotone.
    pub fn push(&mut self, row: StudyRow) -> Result<()> {
        if row.aux.len() != self.aux_names.len() {
            return Err(Error::invalid(
                "study row",
                format!("expected {} auxiliary values, got {}", self.aux_names.len(), row.aux.len()),
            ));
        }
        if row.stderr < 0.0 {
            return Err(Error::invalid("study row", format!("negative standard error {}", row.stderr)));
        }
        if let [.., a, b] = self.rows.as_slice() {
            let up = b.abscissa > a.abscissa;
            let ok = if up { row.abscissa > b.abscissa } else { row.abscissa < b.abscissa };
            if !ok {
                return Err(Error::invalid("study row", "abscissae must be strictly monotone"));
            }
        } else if let Some(last) = self.rows.last() {
            if row.abscissa == last.abscissa {
                return Err(Error::invalid("study row", "abscissae must be strictly monotone"));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn abscissae(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.abscissa).collect()
    }

    /// Values of `column` and their standard errors if known. `statistic`
    /// pairs with `stderr`; an auxiliary column `x` pairs with `x_se`.
    pub fn column(&self, column: &str) -> Option<(Vec<f64>, Option<Vec<f64>>)> {
        if column == "statistic" {
            return Some((
                self.rows.iter().map(|r| r.statistic).collect(),
                Some(self.rows.iter().map(|r| r.stderr).collect()),
            ));
        }
        let idx = self.aux_names.iter().position(|a| a == column)?;
        let values = self.rows.iter().map(|r| r.aux[idx]).collect();
        let se_name = format!("{column}_se");
        let se = self
            .aux_names
            .iter()
            .position(|a| *a == se_name)
            .map(|j| self.rows.iter().map(|r| r.aux[j]).collect());
        Some((values, se))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# study={}", self.name);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("abscissa,statistic,stderr,n");
        for a in &self.aux_names {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:e},{:e},{:e},{}", r.abscissa, r.statistic, r.stderr, r.n);
            for v in &r.aux {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub abscissa_min: f64,
    pub abscissa_max: f64,
    pub points: usize,
}

/// Fit `log y = intercept + slope log x` over the rows of `column`.
///
/// Rows whose standard error is at least [`FIT_NOISE_LIMIT`] times the
/// value, or is not finite, are skipped. Surviving values must be positive.
pub fn fit_rate(table: &StudyTable, column: &str) -> Result<RateFit> {
    let (ys, se) = table
        .column(column)
        .ok_or_else(|| Error::invalid("column", format!("no column `{column}` in study `{}`", table.name)))?;
    fit_points(column, &table.abscissae(), &ys, se.as_deref())
}

/// [`fit_rate`] on raw vectors.
pub fn fit_points(column: &str, xs: &[f64], ys: &[f64], stderr: Option<&[f64]>) -> Result<RateFit> {
    let mut pts = Vec::new();
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let se = stderr.map_or(0.0, |s| s[i]);
        if !se.is_finite() || !y.is_finite() || se >= FIT_NOISE_LIMIT * y.abs() && se > 0.0 || y == 0.0 {
            continue;
        }
        if y < 0.0 {
            return Err(Error::NonPositive { column: column.to_string(), value: y });
        }
        if !(x > 0.0) {
            return Err(Error::NonPositive { column: "abscissa".into(), value: x });
        }
        pts.push((x.ln(), y.ln(), x));
    }
    if pts.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("abscissa", "all abscissae are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy <= f64::EPSILON * n { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        abscissa_min: pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min),
        abscissa_max: pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max),
        points: pts.len(),
    })
}

fn unique_labels(configs: &[EstimatorConfig]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let base = c.label();
        let name = if out.contains(&base) { format!("{base}#{i}") } else { base };
        out.push(name);
    }
    out
}

fn describe(cfg: &EstimatorConfig) -> String {
    match cfg.branching {
        Some(p) => format!(
            "{}/{}/tau0={}/eta={}/align={}",
            cfg.model.name,
            cfg.scheme,
            p.tau0,
            p.eta,
            p.align.name()
        ),
        None => format!("{}/{}/plain", cfg.model.name, cfg.scheme),
    }
}

/// Which per-level quantity becomes the `statistic` column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelStatistic {
    Variance,
    Work,
    Kurtosis,
}

impl LevelStatistic {
    pub fn name(self) -> &'static str {
        match self {
            LevelStatistic::Variance => "variance",
            LevelStatistic::Work => "work",
            LevelStatistic::Kurtosis => "kurtosis",
        }
    }
}

/// Moments of one level with batch statistics for the kurtosis error.
#[derive(Clone, Debug)]
pub struct LevelMoments {
    pub total: MomentAccumulator,
    pub kurtosis_stderr: f64,
}

/// Sample `n` replicates of `level` and summarise them.
pub fn level_moments(cfg: &EstimatorConfig, level: u32, n: u64) -> Result<LevelMoments> {
    let sampler = LevelSampler::new(cfg, level)?;
    let shards = sampler.accumulate_shards(0, n)?;
    let total = merge_in_order(&shards);
    let batches = KURTOSIS_BATCHES.min(shards.len());
    let mut ks = Vec::with_capacity(batches);
    for b in 0..batches {
        let lo = b * shards.len() / batches;
        let hi = (b + 1) * shards.len() / batches;
        ks.push(merge_in_order(&shards[lo..hi]).kurtosis());
    }
    let kurtosis_stderr = if batches >= 2 && ks.iter().all(Option::is_some) {
        let acc = MomentAccumulator::from_samples(&ks.iter().map(|k| k.unwrap()).collect::<Vec<_>>());
        acc.mean_stderr()
    } else {
        f64::NAN
    };
    Ok(LevelMoments { total, kurtosis_stderr })
}

/// Smallest per-level sample count accepted by [`kurtosis_study`].
pub const KURTOSIS_MIN_SAMPLES: u64 = 10_000;

/// Variance, work, kurtosis and mean per level for each configuration.
/// The configurations share their master seed, so plain and branching
/// estimators see the same Brownian path up to the first branch time.
pub fn level_study(
    stat: LevelStatistic,
    levels: RangeInclusive<u32>,
    n: u64,
    configs: &[EstimatorConfig],
) -> Result<StudyTable> {
    if configs.is_empty() {
        return Err(Error::invalid("configs", "need at least one estimator"));
    }
    if n < 4 {
        return Err(Error::invalid("n", format!("need at least 4 samples per level, got {n}")));
    }
    let labels = unique_labels(configs);
    let mut aux = vec!["level".to_string()];
    for l in &labels {
        for suffix in ["var", "var_se", "mean", "mean_se", "work", "kurt", "kurt_se", "depth"] {
            aux.push(format!("{l}_{suffix}"));
        }
    }
    let mut table = StudyTable::new(stat.name(), aux)
        .meta("statistic", format!("{} of {}", stat.name(), labels[0]))
        .meta("abscissa", "h")
        .meta("n", n)
        .meta("seed", configs[0].master_seed);
    for (l, c) in labels.iter().zip(configs) {
        table.push_meta(format!("config.{l}"), describe(c));
    }
    for level in levels {
        let mut row_aux = vec![f64::from(level)];
        let mut first = None;
        for cfg in configs {
            let m = level_moments(cfg, level, n)?;
            let t = &m.total;
            let kurt = t.kurtosis().unwrap_or(f64::NAN);
            let kurt_se = if kurt.is_nan() { f64::NAN } else { m.kurtosis_stderr };
            row_aux.extend([
                t.variance(),
                t.variance_stderr(),
                t.mean(),
                t.mean_stderr(),
                t.mean_work(),
                kurt,
                kurt_se,
                f64::from(cfg.schedule(level)?.depth),
            ]);
            if first.is_none() {
                let (s, se) = match stat {
                    LevelStatistic::Variance => (t.variance(), t.variance_stderr()),
                    LevelStatistic::Work => (t.mean_work(), 0.0),
                    LevelStatistic::Kurtosis => (kurt, kurt_se),
                };
                first = Some((s, se));
            }
        }
        let (statistic, stderr) = first.expect("at least one config");
        table.push(StudyRow {
            abscissa: configs[0].grid(level)?.h,
            statistic,
            stderr: if stderr.is_nan() { f64::INFINITY } else { stderr },
            n,
            aux: row_aux,
        })?;
    }
    Ok(table)
}

pub fn variance_study(levels: RangeInclusive<u32>, n: u64, configs: &[EstimatorConfig]) -> Result<StudyTable> {
    level_study(LevelStatistic::Variance, levels, n, configs)
}

pub fn work_study(levels: RangeInclusive<u32>, n: u64, configs: &[EstimatorConfig]) -> Result<StudyTable> {
    level_study(LevelStatistic::Work, levels, n, configs)
}

pub fn kurtosis_study(levels: RangeInclusive<u32>, n: u64, configs: &[EstimatorConfig]) -> Result<StudyTable> {
    if n < KURTOSIS_MIN_SAMPLES {
        return Err(Error::invalid(
            "n",
            format!("kurtosis needs at least {KURTOSIS_MIN_SAMPLES} samples per level, got {n}"),
        ));
    }
    level_study(LevelStatistic::Kurtosis, levels, n, configs)
}

/// Unbiased estimate of `mean^2` from `m` i.i.d. draws given their sum and
/// sum of squares: `(sum^2 - sum of squares) / (m (m - 1))`, which equals
/// `mean^2 - s^2 / m` for the sample variance `s^2`.
pub fn squared_mean_unbiased(sum: f64, sum_sq: f64, m: u32) -> f64 {
    let m = f64::from(m);
    (sum * sum - sum_sq) / (m * (m - 1.0))
}

fn split_position(grid: &LevelGrid, scheme: Scheme, tau: f64) -> GridPos {
    let s = f64::from(grid.fine_steps) * (1.0 - tau);
    if scheme.is_antithetic() && grid.has_coarse() {
        let m = grid.refinement;
        let last = grid.fine_steps / m - 1;
        let q = ((s / f64::from(m) - 0.5).ceil().max(0.0) as u32).min(last);
        GridPos::at_step(q * m)
    } else {
        GridPos::from_steps(s)
    }
}

/// `E[(E[dP_l | F_{1-tau}])^2]` by nested simulation: a shared path to
/// `1 - tau`, `n_inner` independent coupled continuations, and the unbiased
/// squared inner mean, averaged over `n_outer` outer paths.
///
/// The level difference is the single-path one whatever the branching
/// settings of `cfg`. For the antithetic scheme the split is moved to the
/// nearest coarse grid point before the end (ties towards earlier times).
/// The abscissa is the lag actually used; `tau_requested` keeps the input.
pub fn tau_study(cfg: &EstimatorConfig, level: u32, taus: &[f64], n_outer: u64, n_inner: u32) -> Result<StudyTable> {
    cfg.validate()?;
    if n_inner < 2 {
        return Err(Error::invalid("n_inner", format!("need at least 2 inner samples, got {n_inner}")));
    }
    let grid = cfg.grid(level)?;
    let tau0 = cfg.branching.map_or(0.5, |p| p.tau0);
    let schedule = BranchSchedule::plain(grid);
    let setup = TreeSetup {
        model: &cfg.model,
        scheme: cfg.scheme,
        schedule: &schedule,
        master_seed: cfg.master_seed,
    };
    setup.validate()?;
    let mut table = StudyTable::new("tau", vec!["tau_requested".into(), "work".into(), "inner_mean".into()])
        .meta("config", describe(cfg))
        .meta("level", level)
        .meta("h", grid.h)
        .meta("n_outer", n_outer)
        .meta("n_inner", n_inner)
        .meta("seed", cfg.master_seed);
    let set = cfg.set;
    let mut splits = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(tau >= grid.h * (1.0 - 1e-12) && tau <= tau0 * (1.0 + 1e-12)) {
            return Err(Error::invalid("tau", format!("{tau} lies outside [h, tau0] = [{}, {tau0}]", grid.h)));
        }
        let split = split_position(&grid, cfg.scheme, tau);
        if let Some((prev, _)) = splits.iter().find(|(_, s)| *s == split) {
            return Err(Error::invalid("tau", format!("{prev} and {tau} fall on the same split point")));
        }
        splits.push((tau, split));
    }
    for (tau, split) in splits {
        let tau_used = 1.0 - split.as_steps() * grid.h;
        let shards = map_shards(0, n_outer, |range| {
            let mut stepper = Stepper::new(setup);
            let mut shared = stepper.fresh_particle();
            let mut scratch = stepper.fresh_particle();
            let mut acc = MomentAccumulator::default();
            let mut inner = MomentAccumulator::default();
            for r in range {
                let mut work = WorkCounter::default();
                let (mut s1, mut s2) = (0.0, 0.0);
                walk_nested(&mut stepper, r, split, n_inner, &mut shared, &mut scratch, &mut work, |_, leaf| {
                    let v = leaf_delta(&leaf, &set);
                    s1 += v;
                    s2 += v * v;
                })?;
                acc.push(squared_mean_unbiased(s1, s2, n_inner), work.increments_generated);
                inner.push(s1 / f64::from(n_inner), 0);
            }
            Ok((acc, inner))
        })?;
        let acc = merge_in_order(&shards.iter().map(|s| s.0).collect::<Vec<_>>());
        let inner = merge_in_order(&shards.iter().map(|s| s.1).collect::<Vec<_>>());
        table.push(StudyRow {
            abscissa: tau_used,
            statistic: acc.mean(),
            stderr: acc.mean_stderr(),
            n: acc.n,
            aux: vec![tau, acc.mean_work(), inner.mean()],
        })?;
    }
    Ok(table)
}

/// Grids of the boundary-density check.
#[derive(Clone, Debug, PartialEq)]
pub struct CondDensitySpec {
    /// Neighbourhood radii swept at lag `delta_sweep_tau`.
    pub deltas: Vec<f64>,
    pub delta_sweep_tau: f64,
    /// Lags swept at radius `tau_sweep_delta`.
    pub taus: Vec<f64>,
    pub tau_sweep_delta: f64,
    pub n_outer: u64,
    pub n_inner: u32,
    /// Euler step used when the model has no exact transition.
    pub h_ref: f64,
}

impl Default for CondDensitySpec {
    fn default() -> Self {
        CondDensitySpec {
            deltas: vec![1e-3, 2e-3, 4e-3, 8e-3],
            delta_sweep_tau: 0.25,
            taus: vec![0.25, 0.125, 0.0625, 0.03125, 0.015625],
            tau_sweep_delta: 1e-3,
            n_outer: 1_000_000,
            n_inner: 64,
            h_ref: 1.0 / 1024.0,
        }
    }
}

/// Tables of the boundary-density check.
#[derive(Clone, Debug, PartialEq)]
pub struct CondDensityReport {
    pub delta_sweep: StudyTable,
    pub tau_sweep: StudyTable,
}

impl CondDensityReport {
    /// Fitted exponents in `delta` and in `tau`.
    pub fn exponents(&self) -> Result<(RateFit, RateFit)> {
        Ok((fit_rate(&self.delta_sweep, "statistic")?, fit_rate(&self.tau_sweep, "statistic")?))
    }
}

/// Nested estimate of `E[P(dist(X_1, K) <= delta | F_{1-tau})^2]`, with the
/// same unbiased inner correction as [`tau_study`].
pub fn cond_density_study(
    model: &ModelSpec,
    set: &DigitalSet,
    spec: &CondDensitySpec,
    seed: u64,
) -> Result<CondDensityReport> {
    if spec.n_inner < 2 {
        return Err(Error::invalid("n_inner", format!("need at least 2 inner samples, got {}", spec.n_inner)));
    }
    for &v in spec.deltas.iter().chain(&spec.taus).chain([&spec.delta_sweep_tau, &spec.tau_sweep_delta]) {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid("cond-density grid", format!("values must be positive, got {v}")));
        }
    }
    let meta = |t: StudyTable| {
        t.meta("model", model.name)
            .meta("set", set.name())
            .meta("n_outer", spec.n_outer)
            .meta("n_inner", spec.n_inner)
            .meta("seed", seed)
    };
    let mut delta_sweep = meta(StudyTable::new("cond-density-delta", vec!["tau".into()]));
    let accs = nested_boundary_moments(model, set, spec.delta_sweep_tau, &spec.deltas, spec, seed)?;
    for (&delta, acc) in spec.deltas.iter().zip(&accs) {
        delta_sweep.push(StudyRow {
            abscissa: delta,
            statistic: acc.mean(),
            stderr: acc.mean_stderr(),
            n: acc.n,
            aux: vec![spec.delta_sweep_tau],
        })?;
    }
    let mut tau_sweep = meta(StudyTable::new("cond-density-tau", vec!["delta".into()]));
    for &tau in &spec.taus {
        let acc = nested_boundary_moments(model, set, tau, &[spec.tau_sweep_delta], spec, seed)?.remove(0);
        tau_sweep.push(StudyRow {
            abscissa: tau,
            statistic: acc.mean(),
            stderr: acc.mean_stderr(),
            n: acc.n,
            aux: vec![spec.tau_sweep_delta],
        })?;
    }
    Ok(CondDensityReport { delta_sweep, tau_sweep })
}

fn nested_boundary_moments(
    model: &ModelSpec,
    set: &DigitalSet,
    tau: f64,
    deltas: &[f64],
    spec: &CondDensitySpec,
    seed: u64,
) -> Result<Vec<MomentAccumulator>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("tau", format!("must lie in (0, 1), got {tau}")));
    }
    let m = spec.n_inner;
    let record = |accs: &mut Vec<MomentAccumulator>, counts: &[u32], work: u64| {
        for (a, &c) in accs.iter_mut().zip(counts) {
            let c = f64::from(c);
            a.push(squared_mean_unbiased(c, c, m), work);
        }
    };
    let shards = if matches!(model.kind, ModelKind::Gbm(_)) && model.caps.exact_transition {
        let dp = model.d_prime;
        if dp > MAX_CHANNELS {
            return Err(Error::invalid("model", format!("at most {MAX_CHANNELS} channels supported")));
        }
        let bits = (32 - (m - 1).leading_zeros()).max(1) as u8;
        map_shards(0, spec.n_outer, |range| {
            let mut accs = vec![MomentAccumulator::default(); deltas.len()];
            let mut z = [0.0; MAX_CHANNELS];
            let mut dw = [0.0; MAX_CHANNELS];
            let mut x = vec![0.0; model.d];
            let mut y = vec![0.0; model.d];
            let mut counts = vec![0u32; deltas.len()];
            for r in range {
                let outer = SegmentStream::new(seed, 0, r, BranchIndex::ROOT, 0);
                outer.fill_normals(0, &mut z[..dp]);
                let s = (1.0 - tau).sqrt();
                for c in 0..dp {
                    dw[c] = s * z[c];
                }
                model.exact_step_into(&model.x0, 1.0 - tau, &dw[..dp], &mut x);
                counts.iter_mut().for_each(|c| *c = 0);
                let s = tau.sqrt();
                for j in 0..m {
                    let label = BranchIndex::from_parts(bits, u64::from(j))?;
                    SegmentStream::new(seed, 0, r, label, 1).fill_normals(0, &mut z[..dp]);
                    for c in 0..dp {
                        dw[c] = s * z[c];
                    }
                    model.exact_step_into(&x, tau, &dw[..dp], &mut y);
                    let dist = set.dist(&y);
                    for (c, &delta) in counts.iter_mut().zip(deltas) {
                        *c += u32::from(dist <= delta);
                    }
                }
                record(&mut accs, &counts, u64::from(m) + 1);
            }
            Ok(accs)
        })?
    } else {
        let grid = LevelGrid::with_step(0, spec.h_ref, 2)?;
        let schedule = BranchSchedule::plain(grid);
        let setup = TreeSetup { model, scheme: Scheme::Euler, schedule: &schedule, master_seed: seed };
        setup.validate()?;
        let split = GridPos::from_steps(f64::from(grid.fine_steps) * (1.0 - tau));
        map_shards(0, spec.n_outer, |range| {
            let mut stepper = Stepper::new(setup);
            let mut shared = stepper.fresh_particle();
            let mut scratch = stepper.fresh_particle();
            let mut accs = vec![MomentAccumulator::default(); deltas.len()];
            let mut counts = vec![0u32; deltas.len()];
            for r in range {
                let mut work = WorkCounter::default();
                counts.iter_mut().for_each(|c| *c = 0);
                walk_nested(&mut stepper, r, split, m, &mut shared, &mut scratch, &mut work, |_, leaf| {
                    let dist = set.dist(leaf.fine);
                    for (c, &delta) in counts.iter_mut().zip(deltas) {
                        *c += u32::from(dist <= delta);
                    }
                })?;
                record(&mut accs, &counts, work.increments_generated);
            }
            Ok(accs)
        })?
    };
    let mut out = vec![MomentAccumulator::default(); deltas.len()];
    for shard in &shards {
        for (o, a) in out.iter_mut().zip(shard) {
            o.merge(a);
        }
    }
    Ok(out)
}

/// Total MLMC work times `eps^2` for each tolerance and configuration,
/// averaged over `repeats` seeds (`master_seed + r`).
pub fn complexity_sweep(
    eps_list: &[f64],
    configs: &[EstimatorConfig],
    opts: &MlmcOptions,
    repeats: u32,
) -> Result<StudyTable> {
    if configs.is_empty() {
        return Err(Error::invalid("configs", "need at least one estimator"));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats", "need at least one run"));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("eps-list", "tolerances must be strictly decreasing"));
    }
    let labels = unique_labels(configs);
    let mut aux = Vec::new();
    for l in &labels {
        for suffix in ["work_eps2", "work_eps2_se", "estimate", "finest_level", "unconverged"] {
            aux.push(format!("{l}_{suffix}"));
        }
    }
    let mut table = StudyTable::new("complexity", aux)
        .meta("statistic", format!("total work * eps^2 of {}", labels[0]))
        .meta("repeats", repeats)
        .meta("warmup", opts.warmup)
        .meta("seed", configs[0].master_seed);
    for (l, c) in labels.iter().zip(configs) {
        table.push_meta(format!("config.{l}"), describe(c));
    }
    for &eps in eps_list {
        let run_opts = MlmcOptions { eps, ..*opts };
        let mut row = Vec::new();
        let mut first = None;
        for cfg in configs {
            let mut cost = MomentAccumulator::default();
            let (mut est, mut finest, mut unconverged) = (0.0, 0.0, 0.0);
            for r in 0..repeats {
                let c = cfg.clone().with_seed(cfg.master_seed.wrapping_add(u64::from(r)));
                let res = run_mlmc(&c, &run_opts)?;
                cost.push(res.total_work * eps * eps, 0);
                est += res.estimate;
                finest += f64::from(res.finest_level);
                unconverged += f64::from(u8::from(res.bias_unconverged));
            }
            let k = f64::from(repeats);
            row.extend([cost.mean(), cost.mean_stderr(), est / k, finest / k, unconverged]);
            first.get_or_insert((cost.mean(), cost.mean_stderr()));
        }
        let (statistic, stderr) = first.expect("at least one config");
        table.push(StudyRow { abscissa: eps, statistic, stderr, n: u64::from(repeats), aux: row })?;
    }
    Ok(table)
}

/// Coupled strong errors per level on single paths: `E|fine - coarse|^2`
/// as the statistic, `E|fine - exact|^2` for models with an exact solution
/// and `E|(fine + anti)/2 - coarse|^2` for the antithetic scheme.
pub fn strong_convergence_study(cfg: &EstimatorConfig, levels: RangeInclusive<u32>, n: u64) -> Result<StudyTable> {
    cfg.validate()?;
    let names = ["exact_mse", "exact_mse_se", "anti_mse", "anti_mse_se"];
    let mut table = StudyTable::new("strong", names.iter().map(|s| s.to_string()).collect())
        .meta("config", describe(cfg))
        .meta("n", n)
        .meta("seed", cfg.master_seed);
    let gbm = cfg.model.gbm_params();
    for level in levels {
        if level == 0 {
            return Err(Error::invalid("levels", "strong coupling needs levels >= 1"));
        }
        let schedule = BranchSchedule::plain(cfg.grid(level)?);
        let setup = TreeSetup {
            model: &cfg.model,
            scheme: cfg.scheme,
            schedule: &schedule,
            master_seed: cfg.master_seed,
        };
        let shards = map_shards(0, n, |range| {
            let mut stepper = Stepper::new(setup);
            let mut accs = [MomentAccumulator::default(); 3];
            for r in range {
                stepper.walk_tree(r, &mut |leaf: crate::branching::LeafView<'_>| {
                    let coarse = leaf.coarse.expect("level >= 1 has a coarse path");
                    accs[0].push(sq_dist(leaf.fine, coarse), 0);
                    if let Some(p) = gbm {
                        let b: Vec<f64> = (0..p.dim()).map(|i| p.combined_increment(i, leaf.brownian)).collect();
                        accs[1].push(sq_dist(leaf.fine, &p.exact_solution(1.0, &b)), 0);
                    }
                    if let Some(a) = leaf.antithetic {
                        let mid: Vec<f64> = leaf.fine.iter().zip(a).map(|(f, a)| 0.5 * (f + a)).collect();
                        accs[2].push(sq_dist(&mid, coarse), 0);
                    }
                })?;
            }
            Ok(accs)
        })?;
        let merged: Vec<MomentAccumulator> =
            (0..3).map(|k| merge_in_order(&shards.iter().map(|s| s[k]).collect::<Vec<_>>())).collect();
        let opt = |a: &MomentAccumulator, v: f64| if a.n == 0 { f64::NAN } else { v };
        table.push(StudyRow {
            abscissa: schedule.grid.h,
            statistic: merged[0].mean(),
            stderr: merged[0].mean_stderr(),
            n,
            aux: vec![
                opt(&merged[1], merged[1].mean()),
                opt(&merged[1], merged[1].mean_stderr()),
                opt(&merged[2], merged[2].mean()),
                opt(&merged[2], merged[2].mean_stderr()),
            ],
        })?;
    }
    Ok(table)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from(xs: &[f64], ys: &[f64]) -> StudyTable {
        let mut t = StudyTable::new("t", vec![]);
        for (&x, &y) in xs.iter().zip(ys) {
            t.push(StudyRow { abscissa: x, statistic: y, stderr: 0.0, n: 1, aux: vec![] }).unwrap();
        }
        t
    }

    #[test]
    fn exact_power_law() {
        let xs: Vec<f64> = (1..8).map(|k| (-(k as f64)).exp2()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 7.0 * x * x).collect();
        let f = fit_rate(&table_from(&xs, &ys), "statistic").unwrap();
        assert!((f.slope - 2.0).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.points, 7);
    }

    #[test]
    fn constant_data_has_zero_slope() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let f = fit_rate(&table_from(&xs, &[3.0; 4]), "statistic").unwrap();
        assert!(f.slope.abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_negative_and_short_data() {
        let t = table_from(&[1.0, 2.0, 4.0], &[1.0, -2.0, 3.0]);
        assert!(matches!(fit_rate(&t, "statistic"), Err(Error::NonPositive { .. })));
        let t = table_from(&[1.0, 2.0], &[1.0, 2.0]);
        assert!(matches!(fit_rate(&t, "statistic"), Err(Error::InsufficientData { .. })));
        assert!(fit_rate(&t, "missing").is_err());
    }

    #[test]
    fn noisy_rows_are_skipped() {
        let mut t = StudyTable::new("t", vec![]);
        for (k, se) in [(1, 0.0), (2, 0.0), (3, 0.0), (4, 5.0)] {
            let x = f64::from(k);
            t.push(StudyRow { abscissa: x, statistic: x, stderr: se, n: 1, aux: vec![] }).unwrap();
        }
        let f = fit_rate(&t, "statistic").unwrap();
        assert_eq!(f.points, 3);
        assert!((f.slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_must_be_monotone() {
        let mut t = table_from(&[1.0, 2.0], &[1.0, 1.0]);
        assert!(t.push(StudyRow { abscissa: 1.5, statistic: 1.0, stderr: 0.0, n: 1, aux: vec![] }).is_err());
        let mut t = table_from(&[1.0], &[1.0]);
        assert!(t.push(StudyRow { abscissa: 1.0, statistic: 1.0, stderr: 0.0, n: 1, aux: vec![] }).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut t = StudyTable::new("demo", vec!["extra".into()]).meta("seed", 3);
        t.push(StudyRow { abscissa: 0.5, statistic: 0.25, stderr: 0.0, n: 10, aux: vec![1.0] }).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec!["# study=demo", "# seed=3", "abscissa,statistic,stderr,n,extra", "5e-1,2.5e-1,0e0,10,1e0"]);
    }

    #[test]
    fn unbiased_square_identity() {
        // mean^2 - s^2/m computed directly
        let xs = [1.0, 0.0, -1.0, 1.0, 1.0];
        let m = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / m;
        let s2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let direct = mean * mean - s2 / m;
        let sum: f64 = xs.iter().sum();
        let sq: f64 = xs.iter().map(|x| x * x).sum();
        assert!((squared_mean_unbiased(sum, sq, 5) - direct).abs() < 1e-15);
    }
}
