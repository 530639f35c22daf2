//! One-step discretization kernels. Increments are always supplied by the
//! caller so the same Brownian values can drive fine, coarse and antithetic
//! paths.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sde_models::{GbmParams, ModelKind, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Euler,
    Milstein,
    AntitheticCc,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Milstein, Scheme::AntitheticCc];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Milstein => "milstein",
            Scheme::AntitheticCc => "antithetic-cc",
        }
    }

    pub fn is_antithetic(self) -> bool {
        self == Scheme::AntitheticCc
    }

    /// Check that `model` provides what the scheme needs.
    pub fn check_model(self, model: &ModelSpec) -> Result<()> {
        match self {
            Scheme::Euler => Ok(()),
            Scheme::Milstein if model.caps.supports_milstein => Ok(()),
            Scheme::AntitheticCc if model.caps.supports_antithetic_truncated_milstein => Ok(()),
            _ => Err(Error::incompatible(
                format!("scheme = {}", self.name()),
                format!("model = {}", model.name),
                "the model does not support this scheme",
            )),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "scheme",
                    format!("unknown scheme `{s}` (expected euler, milstein or antithetic-cc)"),
                )
            })
    }
}

/// State, time, step size and already-scaled Brownian increments for one step.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub h: f64,
    pub dw: &'a [f64],
}

impl StepInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::invalid("h", format!("step size must be positive, got {}", self.h)));
        }
        if self.t + self.h > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "t",
                format!("step [{}, {}] leaves [0, 1]", self.t, self.t + self.h),
            ));
        }
        Ok(())
    }
}

fn check_finite(out: &[f64], time: f64) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            state: out.to_vec(),
            time,
        })
    }
}

/// Reusable coefficient buffers for the Euler kernel.
#[derive(Clone, Debug)]
pub struct EulerScratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl EulerScratch {
    pub fn new(model: &ModelSpec) -> Self {
        EulerScratch {
            drift: vec![0.0; model.d],
            diffusion: vec![0.0; model.d * model.d_prime],
        }
    }
}

/// `x' = x + a(x,t) h + sigma(x,t) dW`, written into `out`.
#[inline]
pub fn euler_step_into(
    model: &ModelSpec,
    input: StepInput<'_>,
    scratch: &mut EulerScratch,
    out: &mut [f64],
) -> Result<()> {
    let StepInput { x, t, h, dw } = input;
    model.drift_into(x, t, &mut scratch.drift);
    model.diffusion_into(x, t, &mut scratch.diffusion);
    let dp = model.d_prime;
    for i in 0..model.d {
        let row = &scratch.diffusion[i * dp..(i + 1) * dp];
        let noise: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
        out[i] = x[i] + scratch.drift[i] * h + noise;
    }
    check_finite(out, t + h)
}

pub fn euler_step(model: &ModelSpec, input: StepInput<'_>) -> Result<Vec<f64>> {
    input.validate()?;
    let mut scratch = EulerScratch::new(model);
    let mut out = vec![0.0; model.d];
    euler_step_into(model, input, &mut scratch, &mut out)?;
    Ok(out)
}

/// Component-wise Milstein for GBM, each asset driven by its combined
/// Brownian increment `dB_i`:
/// `x' = x + mu x h + sigma x dB + 1/2 sigma^2 x (dB^2 - h)`.
#[inline]
pub fn milstein_step_into(model: &ModelSpec, input: StepInput<'_>, out: &mut [f64]) -> Result<()> {
    let ModelKind::Gbm(p) = &model.kind else {
        return Err(Error::incompatible(
            "scheme = milstein",
            format!("model = {}", model.name),
            "Milstein is only available without Levy areas (GBM)",
        ));
    };
    let StepInput { x, t, h, dw } = input;
    out[..model.d].copy_from_slice(&x[..model.d]);
    milstein_update_gbm(p, &mut out[..model.d], h, dw);
    check_finite(out, t + h)
}

/// In-place component-wise GBM Milstein update.
#[inline]
pub fn milstein_update_gbm(p: &GbmParams, x: &mut [f64], h: f64, dw: &[f64]) {
    let sys = p.systematic_weight();
    for (i, xi) in x.iter_mut().enumerate() {
        let db = p.rho * dw[i + 1] + sys * dw[0];
        *xi = gbm_milstein(*xi, p.mu[i], p.sigma[i], h, db);
    }
}

#[inline(always)]
fn gbm_milstein(x: f64, mu: f64, sigma: f64, h: f64, db: f64) -> f64 {
    x + mu * x * h + sigma * x * db + 0.5 * sigma * sigma * x * (db * db - h)
}

/// Scalar GBM Milstein step where `input.dw[0]` is the already-combined
/// increment `dB`.
pub fn milstein_step_scalar_gbm(params: &GbmParams, input: StepInput<'_>) -> Result<f64> {
    input.validate()?;
    if params.dim() != 1 {
        return Err(Error::invalid("gbm.d", "scalar Milstein needs d = 1"));
    }
    let v = gbm_milstein(input.x[0], params.mu[0], params.sigma[0], input.h, input.dw[0]);
    check_finite(&[v], input.t + input.h)?;
    Ok(v)
}

/// Truncated Milstein step for Clark–Cameron (Levy area dropped).
/// `w1_begin` is the exact `W_1` at the start of the step.
#[inline]
pub fn cc_truncated_milstein_step(x: [f64; 2], w1_begin: f64, dw: [f64; 2]) -> [f64; 2] {
    [
        x[0] + dw[0],
        x[1] + w1_begin * dw[1] + 0.5 * dw[0] * dw[1],
    ]
}

/// Antithetic partner over one coarse step: the two fine increments are
/// applied in swapped order, the second fine sub-step using the midpoint
/// value `w1_begin + dw_second[0]`.
#[inline]
pub fn cc_antithetic_pair_of_steps(
    xa: [f64; 2],
    w1_begin: f64,
    dw_first: [f64; 2],
    dw_second: [f64; 2],
) -> [f64; 2] {
    let mid = cc_truncated_milstein_step(xa, w1_begin, dw_second);
    cc_truncated_milstein_step(mid, w1_begin + dw_second[0], dw_first)
}
