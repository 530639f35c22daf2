//! Branching path trees.
//!
//! A level-`l` sample starts from one particle carrying a coupled fine and
//! coarse path (plus an antithetic fine path when the scheme has one). At each
//! branch time `1 - tau_k`, `tau_k = tau0 * 2^(-eta k)`, every live particle
//! splits into two children that share all history and draw independent
//! increments afterwards. After `depth` branch events there are `2^depth`
//! leaves.
//!
//! Branch times that fall inside a fine step are handled in one of two ways:
//! [`Alignment::Split`] draws a shared increment for the part of the step
//! before the branch and per-child increments for the remainder, while
//! [`Alignment::Snap`] moves the branch time to the nearest coarse grid point.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SegmentStream;
use crate::schemes::{cc_antithetic_pair_of_steps, cc_truncated_milstein_step, milstein_update_gbm, Scheme};
use crate::sde_models::{GbmParams, ModelSpec};

/// Node label `u in {-1,+1}^k`; bit `j` of the code is 1 when the `j`-th
/// symbol is `+1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BranchIndex {
    depth: u8,
    code: u64,
}

impl BranchIndex {
    pub const ROOT: BranchIndex = BranchIndex { depth: 0, code: 0 };
    pub const MAX_DEPTH: u8 = 63;

    pub fn from_parts(depth: u8, code: u64) -> Result<Self> {
        if depth > Self::MAX_DEPTH {
            return Err(Error::BranchDepthOverflow { depth });
        }
        if depth < 64 && code >> depth != 0 {
            return Err(Error::invalid(
                "branch code",
                format!("code {code:#x} has bits beyond depth {depth}"),
            ));
        }
        Ok(BranchIndex { depth, code })
    }

    pub fn from_symbols(symbols: &[i8]) -> Result<Self> {
        symbols
            .iter()
            .try_fold(BranchIndex::ROOT, |acc, &s| acc.child(s))
    }

    pub fn depth(self) -> u8 {
        self.depth
    }

    pub fn code(self) -> u64 {
        self.code
    }

    pub fn child(self, symbol: i8) -> Result<Self> {
        if self.depth >= Self::MAX_DEPTH {
            return Err(Error::BranchDepthOverflow { depth: self.depth });
        }
        let bit = match symbol {
            1 => 1u64,
            -1 => 0u64,
            other => {
                return Err(Error::invalid(
                    "child",
                    format!("branch symbol must be +1 or -1, got {other}"),
                ))
            }
        };
        Ok(BranchIndex {
            depth: self.depth + 1,
            code: self.code | (bit << self.depth),
        })
    }

    /// Drop the last symbol; `None` at the root.
    pub fn parent(self) -> Option<Self> {
        if self.depth == 0 {
            return None;
        }
        let depth = self.depth - 1;
        Some(BranchIndex {
            depth,
            code: self.code & ((1u64 << depth) - 1),
        })
    }

    /// Symbol `j` (zero-based) as `+1` or `-1`.
    pub fn symbol(self, j: u8) -> i8 {
        assert!(j < self.depth, "symbol {j} out of range for depth {}", self.depth);
        if (self.code >> j) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn symbols(self) -> Vec<i8> {
        (0..self.depth).map(|j| self.symbol(j)).collect()
    }

    /// Length of the longest common prefix, `|u ^ v|_0`.
    pub fn meet_depth(self, other: BranchIndex) -> u8 {
        let max = self.depth.min(other.depth);
        let diff = self.code ^ other.code;
        (diff.trailing_zeros() as u8).min(max)
    }
}

impl fmt::Display for BranchIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for j in 0..self.depth {
            if j > 0 {
                f.write_str(",")?;
            }
            f.write_str(if self.symbol(j) > 0 { "+1" } else { "-1" })?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Alignment {
    Split,
    Snap,
}

impl Alignment {
    pub fn name(self) -> &'static str {
        match self {
            Alignment::Split => "split",
            Alignment::Snap => "snap",
        }
    }

    /// Split for Euler/Milstein, snap for the antithetic scheme.
    pub fn default_for(scheme: Scheme) -> Self {
        if scheme.is_antithetic() {
            Alignment::Snap
        } else {
            Alignment::Split
        }
    }
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Alignment::Split),
            "snap" => Ok(Alignment::Snap),
            other => Err(Error::invalid(
                "branch.align",
                format!("expected `split` or `snap`, got `{other}`"),
            )),
        }
    }
}

/// `tau0`, `eta` and how branch times meet the time grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchParams {
    pub tau0: f64,
    pub eta: f64,
    pub align: Alignment,
}

impl BranchParams {
    pub fn new(tau0: f64, eta: f64, align: Alignment) -> Result<Self> {
        let p = BranchParams { tau0, eta, align };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0 < 1.0) {
            return Err(Error::invalid("branch.tau0", format!("must lie in (0, 1), got {}", self.tau0)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("branch.eta", format!("must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Uniform time grid of one MLMC level: `h = h0 M^-level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGrid {
    pub level: u32,
    pub h: f64,
    pub fine_steps: u32,
    pub refinement: u32,
}

impl LevelGrid {
    pub fn new(level: u32, h0: f64, refinement: u32) -> Result<Self> {
        if refinement < 2 {
            return Err(Error::invalid("mlmc.M", format!("refinement factor must be >= 2, got {refinement}")));
        }
        if !(h0 > 0.0 && h0 <= 1.0) {
            return Err(Error::invalid("mlmc.h0", format!("must lie in (0, 1], got {h0}")));
        }
        let n0 = (1.0 / h0).round();
        if ((n0 * h0) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mlmc.h0", format!("1/h0 must be an integer, got {h0}")));
        }
        let fine = (n0 as u64)
            .checked_mul(u64::from(refinement).checked_pow(level).unwrap_or(u64::MAX))
            .filter(|n| *n <= u64::from(u32::MAX / 2))
            .ok_or_else(|| Error::invalid("level", format!("level {level} needs too many timesteps")))?;
        Ok(LevelGrid {
            level,
            h: 1.0 / fine as f64,
            fine_steps: fine as u32,
            refinement,
        })
    }

    /// Grid with an explicit step size, for schedules that are not tied to an
    /// MLMC hierarchy.
    pub fn with_step(level: u32, h: f64, refinement: u32) -> Result<Self> {
        let n = (1.0 / h).round();
        if !(h > 0.0) || ((n * h) - 1.0).abs() > 1e-9 || n > f64::from(u32::MAX / 2) {
            return Err(Error::invalid("h", format!("1/h must be a positive integer, got {h}")));
        }
        Ok(LevelGrid {
            level,
            h: 1.0 / n,
            fine_steps: n as u32,
            refinement,
        })
    }

    pub fn has_coarse(&self) -> bool {
        self.level > 0
    }

    /// Coarse step size `h_{l-1}`.
    pub fn coarse_h(&self) -> f64 {
        self.h * f64::from(self.refinement)
    }
}

/// `max(0, floor(log2(tau0 / h) / eta))`.
pub fn compute_depth(h: f64, tau0: f64, eta: f64) -> Result<u32> {
    BranchParams::new(tau0, eta, Alignment::Split)?;
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid("h", format!("must lie in (0, 1], got {h}")));
    }
    let x = (tau0 / h).log2() / eta;
    Ok((x + 1e-9).floor().max(0.0) as u32)
}

/// Position on the fine grid: `step + frac` fine steps from the origin.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct GridPos {
    pub step: u32,
    pub frac: f64,
}

impl GridPos {
    pub const ORIGIN: GridPos = GridPos { step: 0, frac: 0.0 };

    pub fn at_step(step: u32) -> Self {
        GridPos { step, frac: 0.0 }
    }

    /// Nearest representation of `s` fine steps; values within `1e-9` of a
    /// grid point land on it.
    pub fn from_steps(s: f64) -> Self {
        let r = s.round();
        if (s - r).abs() <= 1e-9 * s.abs().max(1.0) {
            return GridPos::at_step(r as u32);
        }
        let step = s.floor();
        GridPos {
            step: step as u32,
            frac: s - step,
        }
    }

    pub fn as_steps(self) -> f64 {
        f64::from(self.step) + self.frac
    }

    pub fn on_grid(self) -> bool {
        self.frac == 0.0
    }
}

/// Branch times of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSchedule {
    pub grid: LevelGrid,
    pub params: Option<BranchParams>,
    pub depth: u32,
    /// Branch positions, one per branch event, non-decreasing.
    pub points: Vec<GridPos>,
    /// Branch events that landed on the same time as the previous one.
    pub collisions: usize,
}

impl BranchSchedule {
    /// A single path per sample.
    pub fn plain(grid: LevelGrid) -> Self {
        BranchSchedule {
            grid,
            params: None,
            depth: 0,
            points: Vec::new(),
            collisions: 0,
        }
    }

    pub fn new(grid: LevelGrid, params: BranchParams) -> Result<Self> {
        params.validate()?;
        let depth = compute_depth(grid.h, params.tau0, params.eta)?;
        if depth > u32::from(BranchIndex::MAX_DEPTH) {
            return Err(Error::BranchDepthOverflow { depth: depth as u8 });
        }
        let n = f64::from(grid.fine_steps);
        let snap_unit = if grid.has_coarse() { grid.refinement } else { 1 };
        let last_snap = grid.fine_steps.saturating_sub(snap_unit);
        let mut points = Vec::with_capacity(depth as usize);
        for k in 0..depth {
            let s = n * (1.0 - tau_k(params.tau0, params.eta, k));
            let p = match params.align {
                Alignment::Split => GridPos::from_steps(s),
                Alignment::Snap => {
                    let u = s / f64::from(snap_unit);
                    let r = u.round();
                    // ties go to the earlier grid point
                    let q = if (u - r).abs() <= 1e-9 * u.abs().max(1.0) { r } else { (u - 0.5).ceil() };
                    let snapped = (q.max(0.0) as u32).saturating_mul(snap_unit);
                    GridPos::at_step(snapped.min(last_snap))
                }
            };
            points.push(p);
        }
        let collisions = points.windows(2).filter(|w| w[0] == w[1]).count();
        Ok(BranchSchedule {
            grid,
            params: Some(params),
            depth,
            points,
            collisions,
        })
    }

    pub fn leaf_count(&self) -> u64 {
        1u64 << self.depth
    }

    /// `tau_k` for `k = 0..depth`.
    pub fn taus(&self) -> Vec<f64> {
        match self.params {
            Some(p) => (0..self.depth).map(|k| tau_k(p.tau0, p.eta, k)).collect(),
            None => Vec::new(),
        }
    }

    /// Partition `0 = t_0 < ... < 1` of `[0, 1]` at the (possibly snapped)
    /// branch times, duplicates collapsed.
    pub fn segment_times(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for p in &self.points {
            let t = p.as_steps() * self.grid.h;
            if t > *out.last().unwrap() {
                out.push(t);
            }
        }
        if *out.last().unwrap() < 1.0 {
            out.push(1.0);
        }
        out
    }

    /// Start and end of segment `k` (`k = 0..=depth`).
    pub fn segment_bounds(&self, k: usize) -> (GridPos, GridPos) {
        let start = if k == 0 { GridPos::ORIGIN } else { self.points[k - 1] };
        let end = self
            .points
            .get(k)
            .copied()
            .unwrap_or(GridPos::at_step(self.grid.fine_steps));
        (start, end)
    }

    /// Increment draws of one tree, summed segment by segment.
    pub fn expected_work(&self) -> u64 {
        (0..=self.depth as usize)
            .map(|k| {
                let (a, b) = self.segment_bounds(k);
                (1u64 << k) * pieces_between(a, b)
            })
            .sum()
    }
}

/// `tau0 * 2^(-eta k)`.
pub fn tau_k(tau0: f64, eta: f64, k: u32) -> f64 {
    tau0 * (-eta * f64::from(k)).exp2()
}

/// Number of increment draws needed to move one particle from `a` to `b`.
pub fn pieces_between(a: GridPos, b: GridPos) -> u64 {
    if b <= a {
        return 0;
    }
    if a.step == b.step {
        return 1;
    }
    let head = u64::from(a.frac > 0.0);
    let first_full = a.step + u32::from(a.frac > 0.0);
    let full = u64::from(b.step - first_full);
    let tail = u64::from(b.frac > 0.0);
    head + full + tail
}

/// For `depth` levels of binary branching, number of ordered leaf pairs
/// `u != v` with meet depth `l'`, which is `2^(2 depth - l' - 1)`.
pub fn pair_meet_census(depth: u32) -> BTreeMap<u32, u64> {
    (0..depth)
        .map(|m| (m, 1u64 << (2 * depth - m - 1)))
        .collect()
}

/// Count of Brownian vector increments drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct WorkCounter {
    pub increments_generated: u64,
}

/// Terminal states of one leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafOutcome {
    pub index: BranchIndex,
    pub fine: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
    pub antithetic: Option<Vec<f64>>,
    /// Driving Brownian motion at `t = 1`.
    pub brownian: Vec<f64>,
}

/// Borrowed view of a leaf handed to visitors.
#[derive(Clone, Copy, Debug)]
pub struct LeafView<'a> {
    pub index: BranchIndex,
    pub fine: &'a [f64],
    pub coarse: Option<&'a [f64]>,
    pub antithetic: Option<&'a [f64]>,
    pub brownian: &'a [f64],
}

impl LeafView<'_> {
    pub fn to_owned(self) -> LeafOutcome {
        LeafOutcome {
            index: self.index,
            fine: self.fine.to_vec(),
            coarse: self.coarse.map(<[f64]>::to_vec),
            antithetic: self.antithetic.map(<[f64]>::to_vec),
            brownian: self.brownian.to_vec(),
        }
    }
}

/// Largest Brownian dimension the path simulator handles.
pub const MAX_CHANNELS: usize = 8;

type Lane = [f64; MAX_CHANNELS];

/// Coupled path state of one particle. Channels beyond the model's
/// dimensions stay zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Particle {
    pos: GridPos,
    fine: Lane,
    coarse: Lane,
    anti: Lane,
    /// Brownian value at the last completed fine grid point.
    w: Lane,
    /// Brownian value at the start of the current coarse step.
    w_coarse: Lane,
    fine_acc: Lane,
    coarse_acc: Lane,
    /// First fine increment of the current coarse step (antithetic only).
    first_fine: Lane,
}

impl Particle {
    fn new(model: &ModelSpec) -> Self {
        let mut x0 = [0.0; MAX_CHANNELS];
        x0[..model.d].copy_from_slice(&model.x0);
        Particle {
            pos: GridPos::ORIGIN,
            fine: x0,
            coarse: x0,
            anti: x0,
            w: [0.0; MAX_CHANNELS],
            w_coarse: [0.0; MAX_CHANNELS],
            fine_acc: [0.0; MAX_CHANNELS],
            coarse_acc: [0.0; MAX_CHANNELS],
            first_fine: [0.0; MAX_CHANNELS],
        }
    }

    fn copy_from(&mut self, other: &Particle) {
        *self = *other;
    }

    fn reset(&mut self, model: &ModelSpec) {
        *self = Particle::new(model);
    }
}

/// Everything needed to advance particles of one level.
#[derive(Clone, Copy, Debug)]
pub struct TreeSetup<'a> {
    pub model: &'a ModelSpec,
    pub scheme: Scheme,
    pub schedule: &'a BranchSchedule,
    pub master_seed: u64,
}

impl<'a> TreeSetup<'a> {
    pub fn validate(&self) -> Result<()> {
        self.scheme.check_model(self.model)?;
        if self.model.d_prime > MAX_CHANNELS || self.model.d > MAX_CHANNELS {
            return Err(Error::invalid(
                "model",
                format!(
                    "at most {MAX_CHANNELS} Brownian channels are supported, got {}",
                    self.model.d_prime
                ),
            ));
        }
        if self.scheme.is_antithetic() {
            if let Some(p) = self.schedule.params {
                if p.align != Alignment::Snap {
                    return Err(Error::incompatible(
                        "scheme = antithetic-cc",
                        "branch.align = split",
                        "the antithetic swap needs branch times on the coarse grid",
                    ));
                }
            }
            if self.schedule.grid.has_coarse() && self.schedule.grid.refinement != 2 {
                return Err(Error::incompatible(
                    "scheme = antithetic-cc",
                    format!("mlmc.M = {}", self.schedule.grid.refinement),
                    "the antithetic pair swaps two fine steps per coarse step",
                ));
            }
        }
        if self.schedule.grid.level > u32::from(u8::MAX) {
            return Err(Error::invalid("level", "levels above 255 are not addressable"));
        }
        Ok(())
    }
}

/// Mutable machinery for stepping particles; one per worker.
pub(crate) struct Stepper<'a> {
    setup: TreeSetup<'a>,
    gbm: Option<&'a GbmParams>,
    z: Lane,
    sqrt_h: f64,
    stack: Vec<Particle>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(setup: TreeSetup<'a>) -> Self {
        Stepper {
            gbm: setup.model.gbm_params(),
            z: [0.0; MAX_CHANNELS],
            sqrt_h: setup.schedule.grid.h.sqrt(),
            stack: vec![Particle::new(setup.model); setup.schedule.depth as usize + 1],
            setup,
        }
    }

    pub(crate) fn fresh_particle(&self) -> Particle {
        Particle::new(self.setup.model)
    }

    pub(crate) fn stream(&self, replicate: u64, branch: BranchIndex, segment: u16) -> SegmentStream {
        SegmentStream::new(
            self.setup.master_seed,
            self.setup.schedule.grid.level as u8,
            replicate,
            branch,
            segment,
        )
    }

    /// Move `p` forward to `to`, drawing increments from `stream`.
    pub(crate) fn advance(
        &mut self,
        p: &mut Particle,
        to: GridPos,
        stream: &SegmentStream,
        work: &mut WorkCounter,
    ) -> Result<()> {
        let h = self.setup.schedule.grid.h;
        let dp = self.setup.model.d_prime;
        let mut draw = 0u32;
        while p.pos < to {
            let full = p.pos.frac == 0.0 && to.step > p.pos.step;
            let f1 = if full || to.step != p.pos.step { 1.0 } else { to.frac };
            let scale = if full { self.sqrt_h } else { ((f1 - p.pos.frac) * h).sqrt() };
            stream.fill_normals(draw, &mut self.z[..dp]);
            draw += 1;
            work.increments_generated += 1;
            for c in 0..MAX_CHANNELS {
                p.fine_acc[c] += scale * self.z[c];
            }
            if f1 == 1.0 {
                self.complete_fine_step(p)?;
                p.pos = GridPos::at_step(p.pos.step + 1);
            } else {
                p.pos.frac = f1;
            }
        }
        Ok(())
    }

    fn complete_fine_step(&mut self, p: &mut Particle) -> Result<()> {
        let model = self.setup.model;
        let d = model.d;
        let grid = self.setup.schedule.grid;
        let step = p.pos.step;
        let dw = p.fine_acc;

        self.update(&mut p.fine[..d], p.w[0], grid.h, &dw);
        for c in 0..MAX_CHANNELS {
            p.w[c] += dw[c];
        }
        set_exact(model, &mut p.fine, &p.w);
        finite_or_err(&p.fine[..d], f64::from(step + 1) * grid.h)?;

        if grid.has_coarse() {
            for c in 0..MAX_CHANNELS {
                p.coarse_acc[c] += dw[c];
            }
            if self.setup.scheme.is_antithetic() {
                if step.is_multiple_of(2) {
                    p.first_fine = dw;
                } else {
                    let first = [p.first_fine[0], p.first_fine[1]];
                    let second = [dw[0], dw[1]];
                    let next = cc_antithetic_pair_of_steps([p.anti[0], p.anti[1]], p.w_coarse[0], first, second);
                    p.anti[0] = next[0];
                    p.anti[1] = next[1];
                    set_exact(model, &mut p.anti, &p.w);
                    finite_or_err(&p.anti[..d], f64::from(step + 1) * grid.h)?;
                }
            }
            if (step + 1).is_multiple_of(grid.refinement) {
                let dwc = p.coarse_acc;
                self.update(&mut p.coarse[..d], p.w_coarse[0], grid.coarse_h(), &dwc);
                set_exact(model, &mut p.coarse, &p.w);
                finite_or_err(&p.coarse[..d], f64::from(step + 1) * grid.h)?;
                p.w_coarse = p.w;
                p.coarse_acc = [0.0; MAX_CHANNELS];
            }
        }
        p.fine_acc = [0.0; MAX_CHANNELS];
        Ok(())
    }

    /// One step of the configured scheme, in place. `w1_begin` is the first
    /// Brownian channel at the start of the step.
    #[inline]
    fn update(&self, x: &mut [f64], w1_begin: f64, h: f64, dw: &Lane) {
        match self.setup.scheme {
            Scheme::Euler => self.setup.model.euler_update(x, h, dw),
            Scheme::Milstein => {
                let p = self.gbm.expect("milstein is checked to run on GBM");
                milstein_update_gbm(p, x, h, dw);
            }
            Scheme::AntitheticCc => {
                let next = cc_truncated_milstein_step([x[0], x[1]], w1_begin, [dw[0], dw[1]]);
                x[0] = next[0];
                x[1] = next[1];
            }
        }
    }

    pub(crate) fn leaf_view<'p>(&self, index: BranchIndex, p: &'p Particle) -> LeafView<'p> {
        let coarse = self.setup.schedule.grid.has_coarse();
        let d = self.setup.model.d;
        LeafView {
            index,
            fine: &p.fine[..d],
            coarse: coarse.then_some(&p.coarse[..d]),
            antithetic: (coarse && self.setup.scheme.is_antithetic()).then_some(&p.anti[..d]),
            brownian: &p.w[..self.setup.model.d_prime],
        }
    }

    /// Depth-first walk over the tree of replicate `replicate`.
    pub(crate) fn walk_tree<F>(&mut self, replicate: u64, visit: &mut F) -> Result<WorkCounter>
    where
        F: FnMut(LeafView<'_>),
    {
        let mut stack = std::mem::take(&mut self.stack);
        stack[0].reset(self.setup.model);
        let mut work = WorkCounter::default();
        let res = self.walk(0, BranchIndex::ROOT, replicate, &mut stack, &mut work, visit);
        self.stack = stack;
        res.map(|()| work)
    }

    fn walk<F>(
        &mut self,
        k: usize,
        branch: BranchIndex,
        replicate: u64,
        stack: &mut [Particle],
        work: &mut WorkCounter,
        visit: &mut F,
    ) -> Result<()>
    where
        F: FnMut(LeafView<'_>),
    {
        let (cur, rest) = stack.split_first_mut().expect("particle stack sized to depth + 1");
        let (_, end) = self.setup.schedule.segment_bounds(k);
        let stream = self.stream(replicate, branch, k as u16);
        self.advance(cur, end, &stream, work)?;
        if k == self.setup.schedule.depth as usize {
            visit(self.leaf_view(branch, cur));
            return Ok(());
        }
        for symbol in [-1i8, 1] {
            rest[0].copy_from(cur);
            self.walk(k + 1, branch.child(symbol)?, replicate, rest, work, visit)?;
        }
        Ok(())
    }

    /// Follow a single root-to-leaf path of the tree.
    pub(crate) fn replay_leaf(&mut self, replicate: u64, leaf: BranchIndex) -> Result<(LeafOutcome, WorkCounter)> {
        let depth = self.setup.schedule.depth;
        if u32::from(leaf.depth()) != depth {
            return Err(Error::invalid(
                "leaf",
                format!("leaf depth {} differs from tree depth {depth}", leaf.depth()),
            ));
        }
        let mut p = self.fresh_particle();
        let mut work = WorkCounter::default();
        let mut branch = BranchIndex::ROOT;
        for k in 0..=depth as usize {
            let (_, end) = self.setup.schedule.segment_bounds(k);
            let stream = self.stream(replicate, branch, k as u16);
            self.advance(&mut p, end, &stream, &mut work)?;
            if k < depth as usize {
                branch = branch.child(leaf.symbol(k as u8))?;
            }
        }
        Ok((self.leaf_view(branch, &p).to_owned(), work))
    }
}

fn set_exact(model: &ModelSpec, x: &mut [f64], w: &[f64]) {
    for e in &model.caps.exact_components {
        x[e.component] = model.x0[e.component] + w[e.channel];
    }
}

#[inline]
fn finite_or_err(x: &[f64], time: f64) -> Result<()> {
    if x.iter().sum::<f64>().is_finite() || x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { state: x.to_vec(), time })
    }
}

/// All leaves of one replicate's tree together with the increments drawn.
#[derive(Clone, Debug)]
pub struct TreeOutcome {
    pub leaves: Vec<LeafOutcome>,
    pub work: WorkCounter,
}

/// Simulate the full branching tree of `replicate`.
pub fn simulate_tree(setup: TreeSetup<'_>, replicate: u64) -> Result<TreeOutcome> {
    setup.validate()?;
    let mut stepper = Stepper::new(setup);
    let mut leaves = Vec::with_capacity(setup.schedule.leaf_count() as usize);
    let work = stepper.walk_tree(replicate, &mut |leaf: LeafView<'_>| leaves.push(leaf.to_owned()))?;
    Ok(TreeOutcome { leaves, work })
}

/// Recompute one leaf by walking only its own path.
pub fn replay_leaf(setup: TreeSetup<'_>, replicate: u64, leaf: BranchIndex) -> Result<LeafOutcome> {
    setup.validate()?;
    Ok(Stepper::new(setup).replay_leaf(replicate, leaf)?.0)
}

/// Nested continuation: one shared path up to `split`, then `n_inner`
/// independent continuations to `t = 1`. Continuation `j` uses the branch
/// label whose bits spell `j`.
pub(crate) fn walk_nested<F>(
    stepper: &mut Stepper<'_>,
    replicate: u64,
    split: GridPos,
    n_inner: u32,
    shared: &mut Particle,
    scratch: &mut Particle,
    work: &mut WorkCounter,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(u32, LeafView<'_>),
{
    let bits = (32 - n_inner.saturating_sub(1).leading_zeros()).max(1) as u8;
    shared.reset(stepper.setup.model);
    let stream = stepper.stream(replicate, BranchIndex::ROOT, 0);
    stepper.advance(shared, split, &stream, work)?;
    let end = GridPos::at_step(stepper.setup.schedule.grid.fine_steps);
    for j in 0..n_inner {
        let label = BranchIndex::from_parts(bits, u64::from(j))?;
        scratch.copy_from(shared);
        let stream = stepper.stream(replicate, label, 1);
        stepper.advance(scratch, end, &stream, work)?;
        visit(j, stepper.leaf_view(label, scratch));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde_models::{make_clark_cameron, make_gbm, GbmParams};

    fn grid(level: u32) -> LevelGrid {
        LevelGrid::new(level, 0.5, 2).unwrap()
    }

    #[test]
    fn branch_index_parent_and_meet() {
        let u = BranchIndex::from_symbols(&[1, -1, 1]).unwrap();
        let v = BranchIndex::from_symbols(&[1, -1, -1]).unwrap();
        let w = BranchIndex::from_symbols(&[-1, -1, 1]).unwrap();
        assert_eq!(u.parent().unwrap(), BranchIndex::from_symbols(&[1, -1]).unwrap());
        assert_eq!(BranchIndex::ROOT.parent(), None);
        assert_eq!(u.meet_depth(v), 2);
        assert_eq!(u.meet_depth(w), 0);
        assert_eq!(u.meet_depth(u), 3);
        assert_eq!(u.symbols(), vec![1, -1, 1]);
        assert_eq!(u.to_string(), "(+1,-1,+1)");
        assert!(BranchIndex::ROOT.child(0).is_err());
        assert!(BranchIndex::from_parts(2, 0b100).is_err());
    }

    #[test]
    fn depth_examples() {
        assert_eq!(compute_depth(1.0 / 16.0, 0.5, 1.0).unwrap(), 3);
        for l in 0..20 {
            let h = (-(l as f64) - 1.0).exp2();
            assert_eq!(compute_depth(h, 0.5, 1.0).unwrap(), l);
        }
        assert_eq!(compute_depth(1.0 / 32.0, 0.5, 4.0 / 3.0).unwrap(), 3);
        assert_eq!(compute_depth(0.5, 0.25, 1.0).unwrap(), 0);
        assert!(compute_depth(0.1, 1.5, 1.0).is_err());
        assert!(compute_depth(0.1, 0.5, 0.0).is_err());
    }

    #[test]
    fn segment_times_examples() {
        // tau0 = 1/2, eta = 1, h = 1/8 gives depth 2
        let g = LevelGrid::with_step(2, 0.125, 2).unwrap();
        let s = BranchSchedule::new(g, BranchParams::new(0.5, 1.0, Alignment::Split).unwrap()).unwrap();
        assert_eq!(s.depth, 2);
        assert_eq!(s.segment_times(), vec![0.0, 0.5, 0.75, 1.0]);
        let plain = BranchSchedule::plain(grid(3));
        assert_eq!(plain.segment_times(), vec![0.0, 1.0]);
        assert!((tau_k(0.5, 4.0 / 3.0, 3) - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn tau_bracket_and_monotonicity() {
        for eta in [0.8, 1.0, 4.0 / 3.0, 1.5] {
            for l in 1..=12 {
                let g = grid(l);
                let s = BranchSchedule::new(g, BranchParams::new(0.5, eta, Alignment::Split).unwrap()).unwrap();
                let taus = s.taus();
                assert!(taus.windows(2).all(|w| w[1] < w[0]));
                // the first unused time tau_depth lies in [h, 2^eta h)
                let next = tau_k(0.5, eta, s.depth);
                assert!(next >= g.h * (1.0 - 1e-9) && next < eta.exp2() * g.h * (1.0 + 1e-9),
                    "eta={eta} l={l} tau={next} h={}", g.h);
                if let Some(last) = taus.last() {
                    assert!(*last >= eta.exp2() * g.h * (1.0 - 1e-9) && *last < (2.0 * eta).exp2() * g.h * (1.0 + 1e-9));
                }
                assert!(s.points.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn snapped_points_lie_on_coarse_grid() {
        for eta in [0.8, 1.0, 4.0 / 3.0, 1.5] {
            for l in 1..=10 {
                let s = BranchSchedule::new(grid(l), BranchParams::new(0.5, eta, Alignment::Snap).unwrap()).unwrap();
                for p in &s.points {
                    assert!(p.on_grid() && p.step % 2 == 0 && p.step < s.grid.fine_steps);
                }
                let times = s.segment_times();
                assert!(times.windows(2).all(|w| w[0] < w[1]));
                assert_eq!(times.len(), s.depth as usize + 2 - s.collisions);
            }
        }
    }

    #[test]
    fn pieces_counting() {
        let p = |s: f64| GridPos::from_steps(s);
        assert_eq!(pieces_between(p(0.0), p(4.0)), 4);
        assert_eq!(pieces_between(p(0.0), p(3.5)), 4);
        assert_eq!(pieces_between(p(1.25), p(1.75)), 1);
        assert_eq!(pieces_between(p(1.25), p(3.0)), 2);
        assert_eq!(pieces_between(p(2.0), p(2.0)), 0);
    }

    #[test]
    fn census_closed_form() {
        let c = pair_meet_census(1);
        assert_eq!(c.get(&0), Some(&2));
        let c = pair_meet_census(3);
        // per fixed leaf: divide by the 8 leaves
        assert_eq!(c[&0] / 8, 4);
        assert_eq!(c[&1] / 8, 2);
        assert_eq!(c[&2] / 8, 1);
        for d in 0..10u32 {
            let total: u64 = pair_meet_census(d).values().sum();
            assert_eq!(total, (1u64 << d) * ((1u64 << d) - 1));
        }
    }

    #[test]
    fn single_leaf_without_branching() {
        let model = make_gbm(GbmParams::reference(1)).unwrap();
        let sched = BranchSchedule::plain(grid(5));
        let setup = TreeSetup { model: &model, scheme: Scheme::Euler, schedule: &sched, master_seed: 1 };
        let out = simulate_tree(setup, 7).unwrap();
        assert_eq!(out.leaves.len(), 1);
        assert_eq!(out.work.increments_generated, 64);
    }

    #[test]
    fn leaf_count_and_work_match_schedule() {
        let model = make_gbm(GbmParams::reference(1)).unwrap();
        for eta in [0.8, 1.0, 4.0 / 3.0] {
            let sched = BranchSchedule::new(grid(6), BranchParams::new(0.5, eta, Alignment::Split).unwrap()).unwrap();
            let setup = TreeSetup { model: &model, scheme: Scheme::Milstein, schedule: &sched, master_seed: 3 };
            let out = simulate_tree(setup, 11).unwrap();
            assert_eq!(out.leaves.len() as u64, sched.leaf_count());
            assert_eq!(out.work.increments_generated, sched.expected_work());
        }
    }

    #[test]
    fn replay_reproduces_every_leaf() {
        let model = make_gbm(GbmParams::reference(2)).unwrap();
        let sched = BranchSchedule::new(grid(5), BranchParams::new(0.5, 4.0 / 3.0, Alignment::Split).unwrap()).unwrap();
        let setup = TreeSetup { model: &model, scheme: Scheme::Euler, schedule: &sched, master_seed: 99 };
        let tree = simulate_tree(setup, 5).unwrap();
        for leaf in &tree.leaves {
            let again = replay_leaf(setup, 5, leaf.index).unwrap();
            assert_eq!(&again, leaf);
        }
    }

    #[test]
    fn siblings_share_prefix_and_differ_after() {
        let model = make_clark_cameron();
        let sched = BranchSchedule::new(grid(4), BranchParams::new(0.5, 1.0, Alignment::Snap).unwrap()).unwrap();
        let setup = TreeSetup { model: &model, scheme: Scheme::AntitheticCc, schedule: &sched, master_seed: 0 };
        let tree = simulate_tree(setup, 0).unwrap();
        assert_eq!(tree.leaves.len(), 16);
        let a = &tree.leaves[0];
        let b = &tree.leaves[1];
        assert_ne!(a.fine, b.fine);
        assert!(a.antithetic.is_some());
    }

    #[test]
    fn antithetic_requires_snap() {
        let model = make_clark_cameron();
        let sched = BranchSchedule::new(grid(4), BranchParams::new(0.5, 1.0, Alignment::Split).unwrap()).unwrap();
        let setup = TreeSetup { model: &model, scheme: Scheme::AntitheticCc, schedule: &sched, master_seed: 0 };
        assert!(matches!(simulate_tree(setup, 0), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn level_grid_checks() {
        assert_eq!(LevelGrid::new(3, 0.5, 2).unwrap().fine_steps, 16);
        assert_eq!(LevelGrid::new(2, 1.0, 4).unwrap().fine_steps, 16);
        assert!(LevelGrid::new(1, 0.3, 2).is_err());
        assert!(LevelGrid::new(1, 0.5, 1).is_err());
        assert!(LevelGrid::new(40, 0.5, 2).is_err());
    }
}
