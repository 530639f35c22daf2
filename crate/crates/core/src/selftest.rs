//! Built-in invariant suite run by `selftest`: work closed forms, leaf-pair
//! census, telescoping, estimator unbiasedness, antithetic symmetry,
//! allocation bounds, exact Clark–Cameron components and thread invariance.

use std::time::Instant;

use crate::branching::{
    simulate_tree, Alignment, BranchIndex, BranchParams, BranchSchedule, LeafView, LevelGrid, Stepper,
    TreeSetup,
};
use crate::diagnostics::variance_study;
use crate::error::{Error, Result};
use crate::estimators::{map_shards, merge_in_order, EstimatorConfig, LevelSampler};
use crate::mlmc::{allocate_samples, MomentAccumulator};
use crate::rng::SegmentStream;
use crate::schemes::Scheme;
use crate::sde_models::{make_clark_cameron, make_gbm, GbmParams};

/// Branching exponents covered by the work checks.
pub const WORK_ETAS: [f64; 4] = [0.8, 1.0, 4.0 / 3.0, 1.5];
pub const WORK_MAX_LEVEL: u32 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfTestReport {
    pub checks: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Sample sizes of the statistical checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfTestSizes {
    pub telescoping_per_level: u64,
    pub telescoping_reference: u64,
    pub unbiased: u64,
    pub antithetic: u64,
    pub allocation_cases: u64,
    pub threads_n: u64,
}

impl Default for SelfTestSizes {
    fn default() -> Self {
        SelfTestSizes {
            telescoping_per_level: 20_000,
            telescoping_reference: 200_000,
            unbiased: 50_000,
            antithetic: 50_000,
            allocation_cases: 2_000,
            threads_n: 4_000,
        }
    }
}

type Check = fn(u64, &SelfTestSizes) -> Result<(bool, String)>;

/// Run every check; a check that errors counts as failed.
pub fn run_selftest(seed: u64, sizes: &SelfTestSizes) -> SelfTestReport {
    let checks: [(&'static str, Check); 8] = [
        ("work-closed-form", check_work_closed_form),
        ("work-aligned-count", check_work_aligned),
        ("pair-meet-census", check_pair_census),
        ("telescoping", check_telescoping),
        ("branching-unbiased", check_branching_unbiased),
        ("antithetic-identity", check_antithetic_identity),
        ("allocation-bound", check_allocation),
        ("clark-cameron-exact", check_cc_exact),
    ];
    let mut report = SelfTestReport::default();
    for (name, f) in checks {
        report.checks.push(timed(name, || f(seed, sizes)));
    }
    report.checks.push(timed("thread-invariance", || check_threads(seed, sizes)));
    report
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn gbm_config(scheme: Scheme, branching: Option<BranchParams>, seed: u64) -> Result<EstimatorConfig> {
    Ok(EstimatorConfig::new(make_gbm(GbmParams::reference(1))?, scheme)
        .with_branching(branching)
        .with_seed(seed))
}

/// Work of one tree counted from first principles: segment `k` is walked by
/// `2^k` particles and costs one draw per piece between consecutive
/// breakpoints, where breakpoints are its two ends and every fine grid time
/// strictly inside.
pub fn work_by_segments(h: f64, tau0: f64, eta: f64) -> u64 {
    let steps = (1.0 / h).round();
    let depth = (1..)
        .take_while(|&k| tau0 * (-eta * f64::from(k)).exp2() >= h * (1.0 - 1e-9))
        .count() as u32;
    let time = |k: u32| steps * (1.0 - tau0 * (-eta * f64::from(k)).exp2());
    let snap = |x: f64| if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
    let mut total = 0u64;
    for k in 0..=depth {
        let a = if k == 0 { 0.0 } else { snap(time(k - 1)) };
        let b = if k == depth { steps } else { snap(time(k)) };
        if b <= a {
            continue;
        }
        let inner = (a.floor() as i64 + 1..=b.ceil() as i64 - 1).count() as u64;
        total += (inner + 1) << k;
    }
    total
}

fn check_work_closed_form(seed: u64, _: &SelfTestSizes) -> Result<(bool, String)> {
    let model = make_gbm(GbmParams::reference(1))?;
    let mut cases = 0;
    for &eta in &WORK_ETAS {
        for level in 0..=WORK_MAX_LEVEL {
            let grid = LevelGrid::new(level, 0.5, 2)?;
            let schedule = BranchSchedule::new(grid, BranchParams::new(0.5, eta, Alignment::Split)?)?;
            let setup = TreeSetup { model: &model, scheme: Scheme::Euler, schedule: &schedule, master_seed: seed };
            let got = simulate_tree(setup, 0)?.work.increments_generated;
            let want = work_by_segments(grid.h, 0.5, eta);
            if got != want || got != schedule.expected_work() {
                return Ok((false, format!("eta={eta} level={level}: simulated {got}, formula {want}")));
            }
            cases += 1;
        }
    }
    Ok((true, format!("{cases} (level, eta) cases equal")))
}

fn check_work_aligned(seed: u64, _: &SelfTestSizes) -> Result<(bool, String)> {
    let model = make_gbm(GbmParams::reference(1))?;
    for level in 1..=WORK_MAX_LEVEL {
        let grid = LevelGrid::new(level, 1.0, 2)?;
        let schedule = BranchSchedule::new(grid, BranchParams::new(0.5, 1.0, Alignment::Split)?)?;
        let setup = TreeSetup { model: &model, scheme: Scheme::Euler, schedule: &schedule, master_seed: seed };
        let got = simulate_tree(setup, 0)?.work.increments_generated;
        let want = u64::from(level + 1) << (level - 1);
        if got != want {
            return Ok((false, format!("level {level}: {got} != (l+1) 2^(l-1) = {want}")));
        }
    }
    Ok((true, format!("levels 1..={WORK_MAX_LEVEL} match (l+1) 2^(l-1)")))
}

fn check_pair_census(_: u64, _: &SelfTestSizes) -> Result<(bool, String)> {
    for depth in 0..=6u8 {
        let leaves: Vec<BranchIndex> = (0..1u64 << depth)
            .map(|c| BranchIndex::from_parts(depth, c))
            .collect::<Result<_>>()?;
        let mut counts = std::collections::BTreeMap::new();
        for (i, u) in leaves.iter().enumerate() {
            for (j, v) in leaves.iter().enumerate() {
                if i != j {
                    *counts.entry(u32::from(u.meet_depth(*v))).or_insert(0u64) += 1;
                }
            }
        }
        for m in 0..u32::from(depth) {
            let want = 1u64 << (2 * u32::from(depth) - m - 1);
            if counts.get(&m).copied().unwrap_or(0) != want {
                return Ok((false, format!("depth {depth}, meet {m}: {:?} != {want}", counts.get(&m))));
            }
        }
        if counts.keys().any(|&m| m >= u32::from(depth)) {
            return Ok((false, format!("depth {depth}: meet depth out of range")));
        }
    }
    Ok((true, "depths 0..=6 enumerated".into()))
}

fn check_telescoping(seed: u64, sizes: &SelfTestSizes) -> Result<(bool, String)> {
    let top = 4;
    let cfg = gbm_config(Scheme::Euler, Some(BranchParams::new(0.5, 1.0, Alignment::Split)?), seed)?;
    let (mut sum, mut var) = (0.0, 0.0);
    for level in 0..=top {
        let acc = LevelSampler::new(&cfg, level)?.accumulate(0, sizes.telescoping_per_level)?;
        sum += acc.mean();
        var += acc.mean_stderr().powi(2);
    }
    let plain = gbm_config(Scheme::Euler, None, seed)?;
    let schedule = plain.schedule(top)?;
    let setup = TreeSetup { model: &plain.model, scheme: plain.scheme, schedule: &schedule, master_seed: seed };
    let set = plain.set;
    // replicates far from those used above, so the two estimates are independent
    let offset = 1u64 << 40;
    let parts = map_shards(offset, sizes.telescoping_reference, |range| {
        let mut stepper = Stepper::new(setup);
        let mut acc = MomentAccumulator::default();
        for r in range {
            stepper.walk_tree(r, &mut |leaf: LeafView<'_>| {
                acc.push(f64::from(u8::from(set.contains(leaf.fine))), 0)
            })?;
        }
        Ok(acc)
    })?;
    let reference = merge_in_order(&parts);
    let sd = (var + reference.mean_stderr().powi(2)).sqrt();
    let z = (sum - reference.mean()) / sd;
    Ok((z.abs() < 4.0, format!("sum of level means {sum:.5}, level-{top} estimate {:.5}, z = {z:.2}", reference.mean())))
}

fn check_branching_unbiased(seed: u64, sizes: &SelfTestSizes) -> Result<(bool, String)> {
    let level = 6;
    let branched = gbm_config(Scheme::Euler, Some(BranchParams::new(0.5, 1.0, Alignment::Split)?), seed)?;
    let plain = gbm_config(Scheme::Euler, None, seed)?;
    let a = LevelSampler::new(&branched, level)?;
    let b = LevelSampler::new(&plain, level)?;
    let parts = map_shards(0, sizes.unbiased, |range| {
        let mut xs = Vec::with_capacity((range.end - range.start) as usize);
        a.for_each(range.clone(), |_, s| xs.push(s.value))?;
        let mut acc = MomentAccumulator::default();
        let mut i = 0;
        b.for_each(range, |_, s| {
            acc.push(xs[i] - s.value, 0);
            i += 1;
        })?;
        Ok(acc)
    })?;
    let d = merge_in_order(&parts);
    let z = d.mean() / d.mean_stderr();
    Ok((z.abs() < 4.0, format!("paired mean difference {:.3e}, z = {z:.2}", d.mean())))
}

fn check_antithetic_identity(seed: u64, sizes: &SelfTestSizes) -> Result<(bool, String)> {
    let model = make_clark_cameron();
    let grid = LevelGrid::new(4, 0.5, 2)?;
    let schedule = BranchSchedule::plain(grid);
    let setup = TreeSetup { model: &model, scheme: Scheme::AntitheticCc, schedule: &schedule, master_seed: seed };
    let parts = map_shards(0, sizes.antithetic, |range| {
        let mut stepper = Stepper::new(setup);
        let mut acc = [MomentAccumulator::default(); 4];
        for r in range {
            stepper.walk_tree(r, &mut |leaf: LeafView<'_>| {
                let anti = leaf.antithetic.expect("antithetic leaf");
                for c in 0..2 {
                    acc[c].push(leaf.fine[c], 0);
                    acc[2 + c].push(anti[c], 0);
                }
            })?;
        }
        Ok(acc)
    })?;
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        let f = merge_in_order(&parts.iter().map(|p| p[c]).collect::<Vec<_>>());
        let a = merge_in_order(&parts.iter().map(|p| p[2 + c]).collect::<Vec<_>>());
        let zm = (f.mean() - a.mean()) / (f.mean_stderr().powi(2) + a.mean_stderr().powi(2)).sqrt();
        let zv = (f.variance() - a.variance()) / (f.variance_stderr().powi(2) + a.variance_stderr().powi(2)).sqrt();
        worst = worst.max(zm.abs()).max(zv.abs());
    }
    Ok((worst < 4.0, format!("largest |z| over means and variances {worst:.2}")))
}

fn check_allocation(seed: u64, sizes: &SelfTestSizes) -> Result<(bool, String)> {
    for case in 0..sizes.allocation_cases {
        let s = SegmentStream::new(seed, 0, case, BranchIndex::ROOT, 0);
        let levels = 1 + (s.normal(0, 0).abs() * 4.0) as usize % 12;
        let v: Vec<f64> = (0..levels).map(|i| (s.normal(1 + i as u32, 0) * 4.0).exp() * 1e-3).collect();
        let w: Vec<f64> = (0..levels).map(|i| (s.normal(1 + i as u32, 1) * 2.0).exp() * 10.0).collect();
        let eps = (s.normal(100, 0) - 4.0).exp().max(1e-5);
        let n = allocate_samples(&v, &w, eps)?;
        let total: f64 = v.iter().zip(&n).map(|(v, n)| v / *n as f64).sum();
        if total > eps * eps / 2.0 {
            return Ok((false, format!("case {case}: sum V/N = {total:e} > eps^2/2 = {:e}", eps * eps / 2.0)));
        }
    }
    Ok((true, format!("{} random cases", sizes.allocation_cases)))
}

fn check_cc_exact(seed: u64, _: &SelfTestSizes) -> Result<(bool, String)> {
    let model = make_clark_cameron();
    let mut leaves = 0;
    for scheme in [Scheme::Euler, Scheme::AntitheticCc] {
        for level in 0..=6 {
            let grid = LevelGrid::new(level, 0.5, 2)?;
            let schedule = BranchSchedule::new(grid, BranchParams::new(0.5, 1.0, Alignment::Snap)?)?;
            let setup = TreeSetup { model: &model, scheme, schedule: &schedule, master_seed: seed };
            for r in 0..4 {
                for leaf in simulate_tree(setup, r)?.leaves {
                    let w = leaf.brownian[0].to_bits();
                    let paths = std::iter::once(&leaf.fine).chain(&leaf.coarse).chain(&leaf.antithetic);
                    for p in paths {
                        if p[0].to_bits() != w {
                            return Ok((false, format!("{scheme} level {level}: x1 = {} but W1 = {}", p[0], leaf.brownian[0])));
                        }
                    }
                    leaves += 1;
                }
            }
        }
    }
    Ok((true, format!("{leaves} leaves bitwise equal")))
}

fn check_threads(seed: u64, sizes: &SelfTestSizes) -> Result<(bool, String)> {
    let cfg = gbm_config(Scheme::Milstein, Some(BranchParams::new(0.5, 1.0, Alignment::Split)?), seed)?;
    let run = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid("threads", e.to_string()))?;
        pool.install(|| variance_study(1..=4, sizes.threads_n, std::slice::from_ref(&cfg)).map(|t| t.to_csv()))
    };
    let one = run(1)?;
    for t in [2, 8] {
        if run(t)? != one {
            return Ok((false, format!("output with {t} threads differs from 1 thread")));
        }
    }
    Ok((true, "1, 2 and 8 threads give identical tables".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_oracle_examples() {
        // h = 1/4, tau0 = 1/2, eta = 1: one branch at t = 1/2, 2 + 2*2 = 6
        assert_eq!(work_by_segments(0.25, 0.5, 1.0), 6);
        // no branching when tau0 < h
        assert_eq!(work_by_segments(0.5, 0.25, 1.0), 2);
        // h = 1/8, eta = 1: 4 + 2*2 + 4*2 = 16
        assert_eq!(work_by_segments(0.125, 0.5, 1.0), 16);
    }

    #[test]
    fn quick_suite_passes() {
        let sizes = SelfTestSizes {
            telescoping_per_level: 2_000,
            telescoping_reference: 10_000,
            unbiased: 4_000,
            antithetic: 4_000,
            allocation_cases: 200,
            threads_n: 600,
        };
        let report = run_selftest(3, &sizes);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(report.checks.len(), 9);
    }
}
