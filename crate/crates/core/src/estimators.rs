//! Digital payoffs and level estimators.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;

use crate::branching::{BranchParams, BranchSchedule, LeafView, LevelGrid, Stepper, TreeSetup};
use crate::error::{Error, Result};
use crate::mlmc::MomentAccumulator;
use crate::schemes::Scheme;
use crate::sde_models::{ModelKind, ModelSpec};

/// Replicates per shard. Shards are the unit of parallel work and are always
/// merged in index order, so results do not depend on the thread count.
pub const SHARD_SIZE: u64 = 512;

pub const SET_NAMES: [&str; 5] = [
    "gbm-mean-below",
    "cc-corner",
    "cc-halfplane-x1",
    "cc-halfplane-x2",
    "everything",
];

/// Closed target set `S` for the digital payoff `1{X_1 in S}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DigitalSet {
    /// `(1/d) sum x_i <= threshold`
    MeanBelow { threshold: f64 },
    /// `min(x_1, x_2) >= threshold`
    Corner { threshold: f64 },
    /// `x_axis >= threshold`, zero-based axis
    HalfPlane { axis: usize, threshold: f64 },
    /// All of `R^d`; there is no boundary.
    Everything,
}

impl DigitalSet {
    /// Look up a built-in set; `threshold` defaults to 1.
    pub fn from_name(name: &str, threshold: Option<f64>) -> Result<Self> {
        let k = threshold.unwrap_or(1.0);
        if !k.is_finite() {
            return Err(Error::invalid("payoff.threshold", format!("must be finite, got {k}")));
        }
        Ok(match name {
            "gbm-mean-below" => DigitalSet::MeanBelow { threshold: k },
            "cc-corner" => DigitalSet::Corner { threshold: k },
            "cc-halfplane" | "cc-halfplane-x2" => DigitalSet::HalfPlane { axis: 1, threshold: k },
            "cc-halfplane-x1" => DigitalSet::HalfPlane { axis: 0, threshold: k },
            "everything" => DigitalSet::Everything,
            other => {
                return Err(Error::invalid(
                    "payoff.set",
                    format!("unknown set `{other}`, expected one of {}", SET_NAMES.join(", ")),
                ))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DigitalSet::MeanBelow { .. } => "gbm-mean-below",
            DigitalSet::Corner { .. } => "cc-corner",
            DigitalSet::HalfPlane { axis: 0, .. } => "cc-halfplane-x1",
            DigitalSet::HalfPlane { .. } => "cc-halfplane-x2",
            DigitalSet::Everything => "everything",
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            DigitalSet::MeanBelow { threshold }
            | DigitalSet::Corner { threshold }
            | DigitalSet::HalfPlane { threshold, .. } => Some(threshold),
            DigitalSet::Everything => None,
        }
    }

    /// The set used by default for a model.
    pub fn default_for(model: &ModelSpec) -> Self {
        match model.kind {
            ModelKind::Gbm(_) => DigitalSet::MeanBelow { threshold: 1.0 },
            ModelKind::ClarkCameron => DigitalSet::Corner { threshold: 1.0 },
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        let needed = match self {
            DigitalSet::Corner { .. } => 2,
            DigitalSet::HalfPlane { axis, .. } => axis + 1,
            DigitalSet::MeanBelow { .. } | DigitalSet::Everything => 1,
        };
        if d < needed {
            return Err(Error::incompatible(
                format!("payoff.set = {}", self.name()),
                format!("state dimension {d}"),
                format!("the set needs at least {needed} components"),
            ));
        }
        Ok(())
    }

    /// Membership; points on the boundary belong to `S`.
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        match *self {
            DigitalSet::MeanBelow { threshold } => mean(x) <= threshold,
            DigitalSet::Corner { threshold } => x[0].min(x[1]) >= threshold,
            DigitalSet::HalfPlane { axis, threshold } => x[axis] >= threshold,
            DigitalSet::Everything => true,
        }
    }

    /// Euclidean distance from `x` to the boundary of `S`; infinite when the
    /// boundary is empty.
    pub fn dist(&self, x: &[f64]) -> f64 {
        match *self {
            DigitalSet::MeanBelow { threshold } => {
                let d = x.len() as f64;
                (mean(x) - threshold).abs() * d.sqrt()
            }
            DigitalSet::Corner { threshold } => {
                let (a, b) = (x[0] - threshold, x[1] - threshold);
                if a >= 0.0 && b >= 0.0 {
                    a.min(b)
                } else {
                    a.min(0.0).hypot(b.min(0.0))
                }
            }
            DigitalSet::HalfPlane { axis, threshold } => (x[axis] - threshold).abs(),
            DigitalSet::Everything => f64::INFINITY,
        }
    }
}

impl fmt::Display for DigitalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DigitalSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DigitalSet::from_name(s, None)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[inline]
fn indicator(set: &DigitalSet, x: &[f64]) -> f64 {
    if set.contains(x) {
        1.0
    } else {
        0.0
    }
}

/// `1{fine in S} - 1{coarse in S}`.
pub fn delta_p_plain(fine: &[f64], coarse: &[f64], set: &DigitalSet) -> f64 {
    indicator(set, fine) - indicator(set, coarse)
}

/// `(1{fine in S} + 1{anti in S}) / 2 - 1{coarse in S}`.
pub fn delta_p_antithetic(fine: &[f64], anti: &[f64], coarse: &[f64], set: &DigitalSet) -> f64 {
    0.5 * (indicator(set, fine) + indicator(set, anti)) - indicator(set, coarse)
}

/// Level difference of one leaf; at level 0 this is the fine indicator.
#[inline]
pub fn leaf_delta(leaf: &LeafView<'_>, set: &DigitalSet) -> f64 {
    match (leaf.coarse, leaf.antithetic) {
        (None, _) => indicator(set, leaf.fine),
        (Some(c), None) => delta_p_plain(leaf.fine, c, set),
        (Some(c), Some(a)) => delta_p_antithetic(leaf.fine, a, c, set),
    }
}

/// One draw of the (possibly branching) level estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSample {
    pub value: f64,
    pub work: u64,
}

/// Model, scheme, payoff and level hierarchy of one estimator.
#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub model: ModelSpec,
    pub scheme: Scheme,
    pub set: DigitalSet,
    /// `None` runs one path per sample.
    pub branching: Option<BranchParams>,
    pub h0: f64,
    pub refinement: u32,
    pub master_seed: u64,
}

impl EstimatorConfig {
    pub fn new(model: ModelSpec, scheme: Scheme) -> Self {
        let set = DigitalSet::default_for(&model);
        EstimatorConfig {
            model,
            scheme,
            set,
            branching: None,
            h0: 0.5,
            refinement: 2,
            master_seed: 0,
        }
    }

    pub fn with_branching(mut self, params: Option<BranchParams>) -> Self {
        self.branching = params;
        self
    }

    pub fn with_set(mut self, set: DigitalSet) -> Self {
        self.set = set;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.check_model(&self.model)?;
        self.set.check_dim(self.model.d)?;
        if let Some(p) = &self.branching {
            p.validate()?;
        }
        LevelGrid::new(0, self.h0, self.refinement)?;
        // exercise the cross-field rules on a level with a coarse path
        let s = self.schedule(1)?;
        TreeSetup {
            model: &self.model,
            scheme: self.scheme,
            schedule: &s,
            master_seed: self.master_seed,
        }
        .validate()
    }

    pub fn grid(&self, level: u32) -> Result<LevelGrid> {
        LevelGrid::new(level, self.h0, self.refinement)
    }

    pub fn schedule(&self, level: u32) -> Result<BranchSchedule> {
        let grid = self.grid(level)?;
        match self.branching {
            Some(p) => BranchSchedule::new(grid, p),
            None => Ok(BranchSchedule::plain(grid)),
        }
    }

    /// Short label such as `euler+branch(eta=1)`.
    pub fn label(&self) -> String {
        match &self.branching {
            Some(p) => format!("{}+branch(eta={})", self.scheme, p.eta),
            None => self.scheme.to_string(),
        }
    }
}

/// Precomputed schedule for drawing samples of one level.
#[derive(Clone, Debug)]
pub struct LevelSampler<'a> {
    cfg: &'a EstimatorConfig,
    schedule: BranchSchedule,
}

impl<'a> LevelSampler<'a> {
    pub fn new(cfg: &'a EstimatorConfig, level: u32) -> Result<Self> {
        let schedule = cfg.schedule(level)?;
        let s = LevelSampler { cfg, schedule };
        s.setup().validate()?;
        Ok(s)
    }

    pub fn schedule(&self) -> &BranchSchedule {
        &self.schedule
    }

    pub fn setup(&self) -> TreeSetup<'_> {
        TreeSetup {
            model: &self.cfg.model,
            scheme: self.cfg.scheme,
            schedule: &self.schedule,
            master_seed: self.cfg.master_seed,
        }
    }

    /// Draw replicates `range` sequentially, feeding each sample to `sink`.
    pub fn for_each<F>(&self, range: Range<u64>, mut sink: F) -> Result<()>
    where
        F: FnMut(u64, LevelSample),
    {
        let set = self.cfg.set;
        let weight = 1.0 / self.schedule.leaf_count() as f64;
        let mut stepper = Stepper::new(self.setup());
        for r in range {
            let mut total = 0.0;
            let work = stepper.walk_tree(r, &mut |leaf: LeafView<'_>| total += leaf_delta(&leaf, &set))?;
            sink(
                r,
                LevelSample {
                    value: total * weight,
                    work: work.increments_generated,
                },
            );
        }
        Ok(())
    }

    /// Per-shard moments of replicates `start..start + n`, in shard order.
    pub fn accumulate_shards(&self, start: u64, n: u64) -> Result<Vec<MomentAccumulator>> {
        map_shards(start, n, |range| {
            let mut acc = MomentAccumulator::default();
            self.for_each(range, |_, s| acc.push(s.value, s.work))?;
            Ok(acc)
        })
    }

    /// Moments of replicates `start..start + n`, computed shard-parallel and
    /// merged in shard order.
    pub fn accumulate(&self, start: u64, n: u64) -> Result<MomentAccumulator> {
        Ok(merge_in_order(&self.accumulate_shards(start, n)?))
    }
}

/// Split `start..start + n` into fixed shards aligned to multiples of
/// [`SHARD_SIZE`], run `f` on each in parallel and return results in order.
pub fn map_shards<T, F>(start: u64, n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<u64>) -> Result<T> + Sync,
{
    let end = start + n;
    let mut ranges = Vec::new();
    let mut a = start;
    while a < end {
        let b = ((a / SHARD_SIZE + 1) * SHARD_SIZE).min(end);
        ranges.push(a..b);
        a = b;
    }
    ranges.into_par_iter().map(&f).collect()
}

/// Merge accumulators left to right.
pub fn merge_in_order(parts: &[MomentAccumulator]) -> MomentAccumulator {
    parts.iter().fold(MomentAccumulator::default(), |mut a, b| {
        a.merge(b);
        a
    })
}

/// A single draw of the level estimator for replicate `replicate`.
pub fn branching_sample(cfg: &EstimatorConfig, level: u32, replicate: u64) -> Result<LevelSample> {
    let sampler = LevelSampler::new(cfg, level)?;
    let mut out = None;
    sampler.for_each(replicate..replicate + 1, |_, s| out = Some(s))?;
    Ok(out.expect("one replicate was drawn"))
}

/// Moments of `n` replicates of the level estimator starting at `start`.
pub fn sample_level(cfg: &EstimatorConfig, level: u32, start: u64, n: u64) -> Result<MomentAccumulator> {
    LevelSampler::new(cfg, level)?.accumulate(start, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::{Alignment, BranchIndex};
    use crate::sde_models::{make_clark_cameron, make_gbm, GbmParams};

    fn gbm_cfg(scheme: Scheme, eta: Option<f64>) -> EstimatorConfig {
        let model = make_gbm(GbmParams::reference(1)).unwrap();
        EstimatorConfig::new(model, scheme)
            .with_branching(eta.map(|e| BranchParams::new(0.5, e, Alignment::Split).unwrap()))
    }

    #[test]
    fn plain_and_antithetic_deltas() {
        let s = DigitalSet::HalfPlane { axis: 0, threshold: 1.0 };
        let (inn, out) = ([2.0], [0.0]);
        assert_eq!(delta_p_plain(&inn, &out, &s), 1.0);
        assert_eq!(delta_p_plain(&inn, &inn, &s), 0.0);
        assert_eq!(delta_p_plain(&out, &inn, &s), -1.0);
        assert_eq!(delta_p_antithetic(&inn, &out, &out, &s), 0.5);
        assert_eq!(delta_p_antithetic(&inn, &inn, &inn, &s), 0.0);
        assert_eq!(delta_p_antithetic(&out, &out, &inn, &s), -1.0);
    }

    #[test]
    fn set_membership_and_distance() {
        let m = DigitalSet::MeanBelow { threshold: 1.0 };
        assert!(m.contains(&[1.0, 1.0]));
        assert!(!m.contains(&[1.5, 1.0]));
        assert!((m.dist(&[2.0, 2.0]) - 2f64.sqrt()).abs() < 1e-15);
        let c = DigitalSet::Corner { threshold: 1.0 };
        assert!(c.contains(&[1.0, 3.0]));
        assert!(!c.contains(&[0.9, 3.0]));
        assert_eq!(c.dist(&[1.5, 3.0]), 0.5);
        assert!((c.dist(&[0.0, 0.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.dist(&[0.0, 5.0]), 1.0);
        let h = DigitalSet::from_name("cc-halfplane", None).unwrap();
        assert_eq!(h, DigitalSet::HalfPlane { axis: 1, threshold: 1.0 });
        assert!(h.contains(&[0.0, 1.0]));
        assert_eq!(DigitalSet::Everything.dist(&[0.0]), f64::INFINITY);
        assert!(DigitalSet::from_name("nope", None).is_err());
        assert!(c.check_dim(1).is_err());
    }

    #[test]
    fn depth_zero_sample_is_plain_difference() {
        // h0 = 1/2, level 1: depth floor(log2(0.25/0.25)) = 0 with tau0 = 1/4
        let model = make_gbm(GbmParams::reference(1)).unwrap();
        let branch = EstimatorConfig::new(model.clone(), Scheme::Euler)
            .with_branching(Some(BranchParams::new(0.25, 1.0, Alignment::Split).unwrap()));
        let plain = EstimatorConfig::new(model, Scheme::Euler);
        assert_eq!(branch.schedule(1).unwrap().depth, 0);
        for r in 0..50 {
            assert_eq!(branching_sample(&branch, 1, r).unwrap(), branching_sample(&plain, 1, r).unwrap());
        }
    }

    #[test]
    fn sample_values_are_bounded() {
        let cfg = gbm_cfg(Scheme::Milstein, Some(1.0));
        let sampler = LevelSampler::new(&cfg, 4).unwrap();
        sampler
            .for_each(0..200, |_, s| {
                assert!(s.value.abs() <= 1.0);
                assert_eq!(s.work, sampler.schedule().expected_work());
            })
            .unwrap();
    }

    #[test]
    fn shards_cover_range_in_order() {
        let got = map_shards(1000, 1200, Ok).unwrap();
        assert_eq!(got.first().unwrap().start, 1000);
        assert_eq!(got.last().unwrap().end, 2200);
        assert!(got.windows(2).all(|w| w[0].end == w[1].start));
        assert!(got.iter().all(|r| r.end - r.start <= SHARD_SIZE));
    }

    #[test]
    fn antithetic_tree_leaves_feed_antithetic_delta() {
        let cfg = EstimatorConfig::new(make_clark_cameron(), Scheme::AntitheticCc)
            .with_branching(Some(BranchParams::new(0.5, 1.0, Alignment::Snap).unwrap()));
        let sampler = LevelSampler::new(&cfg, 3).unwrap();
        let mut stepper = Stepper::new(sampler.setup());
        let mut n = 0;
        stepper
            .walk_tree(0, &mut |leaf: LeafView<'_>| {
                assert!(leaf.antithetic.is_some());
                assert!(leaf.index.depth() == 3 && leaf.index != BranchIndex::ROOT);
                n += 1;
            })
            .unwrap();
        assert_eq!(n, 8);
    }

    #[test]
    fn config_validation() {
        let bad = EstimatorConfig::new(make_gbm(GbmParams::reference(1)).unwrap(), Scheme::AntitheticCc);
        assert!(bad.validate().is_err());
        let split = EstimatorConfig::new(make_clark_cameron(), Scheme::AntitheticCc)
            .with_branching(Some(BranchParams::new(0.5, 1.0, Alignment::Split).unwrap()));
        assert!(matches!(split.validate(), Err(Error::Incompatible { .. })));
        assert!(gbm_cfg(Scheme::Euler, Some(1.0)).validate().is_ok());
    }
}
