//! Run configuration: a line-oriented `section.key = value` format, flag
//! overrides on top, and the number-list and level-range parsers shared with
//! the command line.
//!
//! ```text
//! # comment
//! model = gbm
//! scheme = milstein
//! gbm.d = 1
//! branch.eta = 4/3
//! study.taus = 2^-2, 2^-4, 2^-6
//! ```

use std::ops::RangeInclusive;
use std::path::PathBuf;

use crate::branching::{Alignment, BranchParams, MAX_CHANNELS};
use crate::diagnostics::CondDensitySpec;
use crate::error::{Error, Result};
use crate::estimators::{DigitalSet, EstimatorConfig};
use crate::mlmc::MlmcOptions;
use crate::schemes::Scheme;
use crate::sde_models::{model_from_name, GbmParams, ModelSpec, MODEL_NAMES};

/// Environment variable read when no seed is given.
pub const SEED_ENV: &str = "MLMC_BRANCH_SEED";

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "model",
    "scheme",
    "seed",
    "output",
    "gbm.d",
    "gbm.mu",
    "gbm.sigma",
    "gbm.rho",
    "gbm.x0",
    "payoff.set",
    "payoff.threshold",
    "branch.enabled",
    "branch.tau0",
    "branch.eta",
    "branch.align",
    "mlmc.eps",
    "mlmc.h0",
    "mlmc.M",
    "mlmc.alpha",
    "mlmc.max_level",
    "mlmc.warmup",
    "mlmc.initial_level",
    "study.levels",
    "study.n",
    "study.h",
    "study.taus",
    "study.n_outer",
    "study.n_inner",
    "study.eps_list",
    "study.repeats",
    "study.deltas",
    "study.density_taus",
    "study.delta_tau",
    "study.tau_delta",
    "study.h_ref",
];

/// Parameters of the diagnostic studies.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyParams {
    pub levels: RangeInclusive<u32>,
    pub n: u64,
    /// Step size of the τ-study.
    pub h: f64,
    pub taus: Vec<f64>,
    pub n_outer: u64,
    pub n_inner: u32,
    pub eps_list: Vec<f64>,
    pub repeats: u32,
    pub cond_density: CondDensitySpec,
}

impl Default for StudyParams {
    fn default() -> Self {
        StudyParams {
            levels: 2..=9,
            n: 100_000,
            h: 1.0 / 1024.0,
            taus: (2..=8).map(|k| (-f64::from(k)).exp2()).collect(),
            n_outer: 100_000,
            n_inner: 64,
            eps_list: vec![0.02, 0.01, 0.005, 0.0025],
            repeats: 1,
            cond_density: CondDensitySpec::default(),
        }
    }
}

/// A fully parsed and validated run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub gbm: GbmParams,
    pub scheme: Scheme,
    /// `None` picks the model's default set.
    pub set: Option<String>,
    pub threshold: Option<f64>,
    pub branching: bool,
    pub tau0: f64,
    pub eta: f64,
    /// `None` picks the scheme's default alignment.
    pub align: Option<Alignment>,
    pub h0: f64,
    pub refinement: u32,
    pub mlmc: MlmcOptions,
    pub study: StudyParams,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "gbm".into(),
            gbm: GbmParams::reference(1),
            scheme: Scheme::Euler,
            set: None,
            threshold: None,
            branching: true,
            tau0: 0.5,
            eta: 1.0,
            align: None,
            h0: 0.5,
            refinement: 2,
            mlmc: MlmcOptions::new(0.005),
            study: StudyParams::default(),
            seed: 0,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        model_from_name(&self.model, &self.gbm)
    }

    pub fn digital_set(&self, model: &ModelSpec) -> Result<DigitalSet> {
        match &self.set {
            Some(name) => DigitalSet::from_name(name, self.threshold),
            None => {
                let base = DigitalSet::default_for(model);
                match self.threshold {
                    Some(t) => DigitalSet::from_name(base.name(), Some(t)),
                    None => Ok(base),
                }
            }
        }
    }

    pub fn branch_params(&self) -> Result<Option<BranchParams>> {
        if !self.branching {
            return Ok(None);
        }
        let align = self.align.unwrap_or_else(|| Alignment::default_for(self.scheme));
        BranchParams::new(self.tau0, self.eta, align).map(Some)
    }

    /// The estimator described by this run, validated.
    pub fn estimator(&self) -> Result<EstimatorConfig> {
        let model = self.model_spec()?;
        let set = self.digital_set(&model)?;
        let cfg = EstimatorConfig {
            model,
            scheme: self.scheme,
            set,
            branching: self.branch_params()?,
            h0: self.h0,
            refinement: self.refinement,
            master_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == "gbm" && self.gbm.dim() + 1 > MAX_CHANNELS {
            return Err(Error::invalid("gbm.d", format!("at most {} assets supported", MAX_CHANNELS - 1)));
        }
        self.estimator()?;
        self.mlmc.validate()?;
        let s = &self.study;
        if s.levels.is_empty() {
            return Err(Error::invalid("study.levels", "range is empty"));
        }
        if s.n_inner < 2 {
            return Err(Error::invalid("study.n_inner", "need at least 2 inner samples"));
        }
        if s.repeats == 0 {
            return Err(Error::invalid("study.repeats", "need at least one run"));
        }
        if !(s.h > 0.0 && s.h <= 1.0) {
            return Err(Error::invalid("study.h", format!("must lie in (0, 1], got {}", s.h)));
        }
        Ok(())
    }

    /// Level whose step size is `study.h`.
    pub fn study_level(&self) -> Result<u32> {
        let m = f64::from(self.refinement);
        let l = (self.h0 / self.study.h).ln() / m.ln();
        let r = l.round();
        if r < 0.0 || (l - r).abs() > 1e-9 {
            return Err(Error::invalid(
                "study.h",
                format!("{} is not h0 * M^-l for h0 = {}, M = {}", self.study.h, self.h0, self.refinement),
            ));
        }
        Ok(r as u32)
    }

    /// Apply one `key = value` assignment.
    pub fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "model" => {
                if !MODEL_NAMES.contains(&v) {
                    return Err(format!("unknown model `{v}` (expected {})", MODEL_NAMES.join(" or ")));
                }
                self.model = v.to_string();
            }
            "scheme" => self.scheme = v.parse().map_err(|e: Error| e.to_string())?,
            "seed" => self.seed = parse_u64(v)?,
            "output" => self.output = Some(PathBuf::from(v)),
            "gbm.d" => {
                let d = parse_u64(v)? as usize;
                if d == 0 || d >= MAX_CHANNELS {
                    return Err(format!("dimension must lie in 1..={}, got {d}", MAX_CHANNELS - 1));
                }
                let g = &mut self.gbm;
                g.mu = resize(&g.mu, d);
                g.sigma = resize(&g.sigma, d);
                g.x0 = resize(&g.x0, d);
            }
            "gbm.mu" => self.gbm.mu = broadcast(parse_f64_list(v)?, self.gbm.dim())?,
            "gbm.sigma" => self.gbm.sigma = broadcast(parse_f64_list(v)?, self.gbm.dim())?,
            "gbm.x0" => self.gbm.x0 = broadcast(parse_f64_list(v)?, self.gbm.dim())?,
            "gbm.rho" => self.gbm.rho = parse_f64(v)?,
            "payoff.set" => {
                DigitalSet::from_name(v, None).map_err(|e| e.to_string())?;
                self.set = Some(v.to_string());
            }
            "payoff.threshold" => self.threshold = Some(parse_f64(v)?),
            "branch.enabled" => self.branching = parse_bool(v)?,
            "branch.tau0" => self.tau0 = parse_f64(v)?,
            "branch.eta" => self.eta = parse_f64(v)?,
            "branch.align" => self.align = Some(v.parse().map_err(|e: Error| e.to_string())?),
            "mlmc.eps" => self.mlmc.eps = parse_f64(v)?,
            "mlmc.h0" => self.h0 = parse_f64(v)?,
            "mlmc.M" => self.refinement = parse_u32(v)?,
            "mlmc.alpha" => {
                self.mlmc.alpha = if v == "auto" { None } else { Some(parse_f64(v)?) };
            }
            "mlmc.max_level" => self.mlmc.max_level = parse_u32(v)?,
            "mlmc.warmup" => self.mlmc.warmup = parse_u64(v)?,
            "mlmc.initial_level" => self.mlmc.initial_level = parse_u32(v)?,
            "study.levels" => self.study.levels = parse_level_range(v)?,
            "study.n" => self.study.n = parse_u64(v)?,
            "study.h" => self.study.h = parse_f64(v)?,
            "study.taus" => self.study.taus = parse_f64_list(v)?,
            "study.n_outer" => {
                let n = parse_u64(v)?;
                self.study.n_outer = n;
                self.study.cond_density.n_outer = n;
            }
            "study.n_inner" => {
                let n = parse_u32(v)?;
                self.study.n_inner = n;
                self.study.cond_density.n_inner = n;
            }
            "study.eps_list" => self.study.eps_list = parse_f64_list(v)?,
            "study.repeats" => self.study.repeats = parse_u32(v)?,
            "study.deltas" => self.study.cond_density.deltas = parse_f64_list(v)?,
            "study.density_taus" => self.study.cond_density.taus = parse_f64_list(v)?,
            "study.delta_tau" => self.study.cond_density.delta_sweep_tau = parse_f64(v)?,
            "study.tau_delta" => self.study.cond_density.tau_sweep_delta = parse_f64(v)?,
            "study.h_ref" => self.study.cond_density.h_ref = parse_f64(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

fn resize(v: &[f64], d: usize) -> Vec<f64> {
    let fill = v.first().copied().unwrap_or(0.0);
    let mut out = v.to_vec();
    out.resize(d, fill);
    out.truncate(d);
    out
}

fn broadcast(values: Vec<f64>, d: usize) -> std::result::Result<Vec<f64>, String> {
    match values.len() {
        1 => Ok(vec![values[0]; d]),
        n if n == d => Ok(values),
        n => Err(format!("expected 1 or {d} values, got {n}")),
    }
}

/// Parse a config file, then apply flag overrides, then fill the seed from
/// `env_seed` when neither set it.
pub fn parse_config(text: &str, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seed_given = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        seed_given |= key == "seed";
        cfg.set_key(key, value).map_err(|message| Error::Parse {
            line,
            message: format!("{key}: {message}"),
        })?;
    }
    for (key, value) in overrides {
        seed_given |= key == "seed";
        cfg.set_key(key, value).map_err(|reason| Error::Override {
            key: key.clone(),
            reason,
        })?;
    }
    if !seed_given {
        if let Some(s) = env_seed {
            cfg.seed = parse_u64(s.trim()).map_err(|reason| Error::Override {
                key: SEED_ENV.to_string(),
                reason,
            })?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A single number: decimal, `a/b` or `2^k`.
pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = if let Some((a, b)) = s.split_once('/') {
        let num = parse_plain(a)?;
        let den = parse_plain(b)?;
        if den == 0.0 {
            return Err(format!("zero denominator in `{s}`"));
        }
        num / den
    } else if let Some((base, exp)) = s.split_once('^') {
        let base = parse_plain(base)?;
        let exp: i32 = exp.trim().parse().map_err(|_| format!("bad exponent in `{s}`"))?;
        if exp.unsigned_abs() > 1074 {
            return Err(format!("exponent out of range in `{s}`"));
        }
        base.powi(exp)
    } else {
        parse_plain(s)?
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

fn parse_plain(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

/// Comma-separated numbers, each accepted by [`parse_f64`].
pub fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty list".into());
    }
    s.split(',').map(parse_f64).collect()
}

/// Inclusive level range `a..b` (or `a..=b`, or a single level).
pub fn parse_level_range(s: &str) -> std::result::Result<RangeInclusive<u32>, String> {
    let s = s.trim();
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let a = parse_u32(a)?;
    let b = parse_u32(b)?;
    if a > b {
        return Err(format!("empty range `{s}`"));
    }
    Ok(a..=b)
}

fn parse_u64(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    // also accept 1e5 style counts
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))?;
    if v >= 0.0 && v.fract() == 0.0 && v < 1.8e19 {
        Ok(v as u64)
    } else {
        Err(format!("`{s}` is not a non-negative integer"))
    }
}

fn parse_u32(s: &str) -> std::result::Result<u32, String> {
    let v = parse_u64(s)?;
    u32::try_from(v).map_err(|_| format!("`{}` is too large", s.trim()))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}
