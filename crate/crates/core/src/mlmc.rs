//! Multilevel driver: moment accumulation, sample allocation and level
//! selection.

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, LevelSampler};

/// Running power sums of level samples and their work.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentAccumulator {
    pub n: u64,
    /// `sum y^k` for `k = 1..=4`.
    pub sums: [f64; 4],
    pub work: u64,
}

impl MomentAccumulator {
    #[inline]
    pub fn push(&mut self, y: f64, work: u64) {
        let y2 = y * y;
        self.n += 1;
        self.sums[0] += y;
        self.sums[1] += y2;
        self.sums[2] += y2 * y;
        self.sums[3] += y2 * y2;
        self.work += work;
    }

    /// Append `other`; merging is order-sensitive only through floating-point
    /// rounding, so callers merge in a fixed order.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.n += other.n;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.work += other.work;
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = MomentAccumulator::default();
        for &y in samples {
            acc.push(y, 0);
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sums[0] / self.n as f64
    }

    /// Raw moment `E[y^k]`, `k = 1..=4`.
    fn raw(&self, k: usize) -> f64 {
        self.sums[k - 1] / self.n as f64
    }

    /// Biased central moments `(m2, m3, m4)`.
    pub fn central_moments(&self) -> (f64, f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let m = self.mean();
        let (r2, r3, r4) = (self.raw(2), self.raw(3), self.raw(4));
        let m2 = (r2 - m * m).max(0.0);
        let m3 = r3 - 3.0 * m * r2 + 2.0 * m * m * m;
        let m4 = (r4 - 4.0 * m * r3 + 6.0 * m * m * r2 - 3.0 * m.powi(4)).max(0.0);
        (m2, m3, m4)
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        self.central_moments().0 * n / (n - 1.0)
    }

    /// Standard error of the mean.
    pub fn mean_stderr(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    /// Standard error of the variance estimate, `sqrt((m4 - m2^2) / n)`.
    pub fn variance_stderr(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let (m2, _, m4) = self.central_moments();
        ((m4 - m2 * m2).max(0.0) / self.n as f64).sqrt()
    }

    pub fn mean_work(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.work as f64 / self.n as f64
    }

    pub fn is_degenerate(&self) -> bool {
        let (m2, _, _) = self.central_moments();
        self.n < 4 || m2 <= 1e-12 * self.raw(2).max(f64::MIN_POSITIVE)
    }

    /// `m4 / m2^2`; `None` when there are fewer than four samples or the
    /// variance vanishes.
    pub fn kurtosis(&self) -> Option<f64> {
        if self.is_degenerate() {
            return None;
        }
        let (m2, _, m4) = self.central_moments();
        Some(m4 / (m2 * m2))
    }
}

/// `m4 / m2^2` of an accumulator.
pub fn kurtosis(acc: &MomentAccumulator) -> Option<f64> {
    acc.kurtosis()
}

/// Samples per level minimising work for a variance budget of `eps^2 / 2`:
/// `N_l = ceil(2 eps^-2 sqrt(V_l / W_l) sum_k sqrt(W_k V_k))`, at least one.
pub fn allocate_samples(variances: &[f64], works: &[f64], eps: f64) -> Result<Vec<u64>> {
    if variances.len() != works.len() || variances.is_empty() {
        return Err(Error::invalid(
            "allocate_samples",
            format!("need equally many variances and works, got {} and {}", variances.len(), works.len()),
        ));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid("mlmc.eps", format!("must be positive, got {eps}")));
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("variance", format!("must be finite and non-negative, got {v}")));
    }
    if let Some(w) = works.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("work", format!("must be finite and positive, got {w}")));
    }
    let total: f64 = variances.iter().zip(works).map(|(v, w)| (v * w).sqrt()).sum();
    if total == 0.0 {
        return Ok(vec![1; variances.len()]);
    }
    let scale = 2.0 / (eps * eps) * total;
    let mut n: Vec<u64> = variances
        .iter()
        .zip(works)
        .map(|(v, w)| ((scale * (v / w).sqrt()).ceil() as u64).max(1))
        .collect();
    // rounding in the formula can leave the budget a few ulps short
    let budget = 0.5 * eps * eps;
    loop {
        let spent: f64 = variances.iter().zip(&n).map(|(v, &k)| v / k as f64).sum();
        if spent <= budget {
            break;
        }
        let worst = (0..n.len())
            .max_by(|&a, &b| {
                let ga = variances[a] / (n[a] as f64 * (n[a] + 1) as f64 * works[a]);
                let gb = variances[b] / (n[b] as f64 * (n[b] + 1) as f64 * works[b]);
                ga.total_cmp(&gb)
            })
            .expect("non-empty");
        n[worst] += 1;
    }
    Ok(n)
}

/// Options of the adaptive driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmcOptions {
    pub eps: f64,
    /// Weak order used by the bias test; `None` fits it from the level means
    /// once four levels exist, falling back to 1.
    pub alpha: Option<f64>,
    pub max_level: u32,
    pub warmup: u64,
    /// Finest level of the initial hierarchy.
    pub initial_level: u32,
}

impl MlmcOptions {
    pub fn new(eps: f64) -> Self {
        MlmcOptions {
            eps,
            alpha: Some(1.0),
            max_level: 20,
            warmup: 10_000,
            initial_level: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid("mlmc.eps", format!("must be positive, got {}", self.eps)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::invalid("mlmc.alpha", format!("must be positive, got {a}")));
            }
        }
        if self.warmup < 2 {
            return Err(Error::invalid("mlmc.warmup", format!("need at least 2 samples, got {}", self.warmup)));
        }
        if self.initial_level > self.max_level {
            return Err(Error::invalid(
                "mlmc.max_level",
                format!("must be at least {}, got {}", self.initial_level, self.max_level),
            ));
        }
        Ok(())
    }
}

/// Statistics of one level after the run.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    pub mean_work: f64,
    pub kurtosis: Option<f64>,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmcResult {
    pub estimate: f64,
    pub levels: Vec<LevelStats>,
    pub finest_level: u32,
    pub bias_estimate: f64,
    pub alpha: f64,
    pub total_work: f64,
    pub eps: f64,
    /// The level cap was hit before the bias test passed.
    pub bias_unconverged: bool,
}

impl MlmcResult {
    /// Sum of `V_l / N_l`.
    pub fn estimator_variance(&self) -> f64 {
        self.levels.iter().map(|l| l.variance / l.n as f64).sum()
    }
}

/// Least-squares slope of `log2 |mean_l|` against `l` for `l >= 1`, negated.
fn fitted_alpha(accs: &[MomentAccumulator]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = accs
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, a)| a.mean() != 0.0)
        .map(|(l, a)| (l as f64, a.mean().abs().log2()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let alpha = -sxy / sxx;
    (alpha > 0.0 && alpha.is_finite()).then_some(alpha)
}

/// Adaptive multilevel estimate of `P(X_1 in S)` with root-mean-square
/// error target `eps`: variance at most `eps^2 / 2` and estimated bias at
/// most `eps / sqrt 2`.
pub fn run_mlmc(cfg: &EstimatorConfig, opts: &MlmcOptions) -> Result<MlmcResult> {
    opts.validate()?;
    cfg.validate()?;
    let m = f64::from(cfg.refinement);
    let eps = opts.eps;
    let mut samplers: Vec<LevelSampler<'_>> = Vec::new();
    let mut accs: Vec<MomentAccumulator> = Vec::new();
    let mut pending: Vec<u64> = Vec::new();
    for l in 0..=opts.initial_level {
        samplers.push(LevelSampler::new(cfg, l)?);
        accs.push(MomentAccumulator::default());
        pending.push(opts.warmup);
    }
    let mut unconverged = false;
    let (bias, alpha) = loop {
        for l in 0..samplers.len() {
            if pending[l] > 0 {
                let more = samplers[l].accumulate(accs[l].n, pending[l])?;
                accs[l].merge(&more);
                pending[l] = 0;
            }
        }
        let v: Vec<f64> = accs.iter().map(MomentAccumulator::variance).collect();
        let w: Vec<f64> = accs.iter().map(|a| a.mean_work().max(1.0)).collect();
        let target = allocate_samples(&v, &w, eps)?;
        let mut again = false;
        for l in 0..accs.len() {
            pending[l] = target[l].saturating_sub(accs[l].n);
            again |= pending[l] > 0;
        }
        if again {
            continue;
        }
        let alpha = opts.alpha.or_else(|| fitted_alpha(&accs)).unwrap_or(1.0);
        let ma = m.powf(alpha);
        let last = accs.len() - 1;
        let bias = accs[last].mean().abs().max(accs[last - 1].mean().abs() / ma) / (ma - 1.0);
        if bias <= eps / std::f64::consts::SQRT_2 {
            break (bias, alpha);
        }
        let next = samplers.len() as u32;
        if next > opts.max_level {
            unconverged = true;
            break (bias, alpha);
        }
        samplers.push(LevelSampler::new(cfg, next)?);
        accs.push(MomentAccumulator::default());
        pending.push(opts.warmup);
    };

    let levels: Vec<LevelStats> = accs
        .iter()
        .zip(&samplers)
        .enumerate()
        .map(|(l, (a, s))| LevelStats {
            level: l as u32,
            n: a.n,
            mean: a.mean(),
            variance: a.variance(),
            mean_work: a.mean_work(),
            kurtosis: a.kurtosis(),
            depth: s.schedule().depth,
        })
        .collect();
    Ok(MlmcResult {
        estimate: levels.iter().map(|l| l.mean).sum(),
        total_work: levels.iter().map(|l| l.n as f64 * l.mean_work).sum(),
        finest_level: (levels.len() - 1) as u32,
        levels,
        bias_estimate: bias,
        alpha,
        eps,
        bias_unconverged: unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::DigitalSet;
    use crate::schemes::Scheme;
    use crate::sde_models::{make_gbm, GbmParams};

    #[test]
    fn kurtosis_examples() {
        assert_eq!(MomentAccumulator::from_samples(&[0.3; 10]).kurtosis(), None);
        assert_eq!(MomentAccumulator::from_samples(&[0.0; 10]).kurtosis(), None);
        let two = MomentAccumulator::from_samples(&[-1.0, 1.0, -1.0, 1.0]);
        assert!((two.kurtosis().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(MomentAccumulator::from_samples(&[1.0, 2.0, 3.0]).kurtosis(), None);
    }

    #[test]
    fn moments_of_small_sample() {
        let a = MomentAccumulator::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mean(), 2.5);
        assert!((a.variance() - 5.0 / 3.0).abs() < 1e-14);
        // m2 = 1.25, m4 = (2*5.0625 + 2*0.0625)/4 = 2.5625
        assert!((a.kurtosis().unwrap() - 2.5625 / 1.5625).abs() < 1e-14);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_samples(&[1.0], &[1.0], 0.1).unwrap(), vec![200]);
        let eps: f64 = 0.1;
        let n = allocate_samples(&[1.0, 0.25], &[1.0, 4.0], eps).unwrap();
        assert_eq!(n, vec![(4.0 / (eps * eps)).ceil() as u64, (1.0 / (eps * eps)).ceil() as u64]);
        assert_eq!(allocate_samples(&[0.0, 0.0], &[1.0, 2.0], 0.1).unwrap(), vec![1, 1]);
        assert!(allocate_samples(&[1.0], &[0.0], 0.1).is_err());
        assert!(allocate_samples(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn everything_set_gives_exactly_one() {
        let cfg = EstimatorConfig::new(make_gbm(GbmParams::reference(1)).unwrap(), Scheme::Euler)
            .with_set(DigitalSet::Everything);
        let mut opts = MlmcOptions::new(0.01);
        opts.warmup = 100;
        let res = run_mlmc(&cfg, &opts).unwrap();
        assert_eq!(res.estimate, 1.0);
        assert!(!res.bias_unconverged);
        for l in &res.levels[1..] {
            assert_eq!(l.mean, 0.0);
            assert_eq!(l.variance, 0.0);
        }
    }

    #[test]
    fn level_cap_flags_unconverged() {
        let cfg = EstimatorConfig::new(make_gbm(GbmParams::reference(1)).unwrap(), Scheme::Euler);
        let opts = MlmcOptions { eps: 0.002, alpha: Some(1.0), max_level: 1, warmup: 20_000, initial_level: 1 };
        let res = run_mlmc(&cfg, &opts).unwrap();
        assert_eq!(res.finest_level, 1);
        assert!(res.bias_estimate > opts.eps / 2f64.sqrt(), "bias {}", res.bias_estimate);
        assert!(res.bias_unconverged);
    }
}
