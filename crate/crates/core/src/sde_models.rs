//! SDE models: correlated geometric Brownian motion and the Clark–Cameron
//! system, behind one coefficient interface.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Parameters of `dX_i = mu_i X_i dt + sigma_i X_i (rho dW_i + sqrt(1-rho^2) dW_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GbmParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Weight of the idiosyncratic noise; `sqrt(1 - rho^2)` goes to the
    /// systematic channel 0.
    pub rho: f64,
    pub x0: Vec<f64>,
}

impl GbmParams {
    /// `d` identical assets with `mu = 0.05`, `sigma = 0.2`, `rho = 0.7`, `x0 = 1`.
    pub fn reference(d: usize) -> Self {
        GbmParams::uniform(d, 0.05, 0.2, 0.7, 1.0)
    }

    pub fn uniform(d: usize, mu: f64, sigma: f64, rho: f64, x0: f64) -> Self {
        GbmParams {
            mu: vec![mu; d],
            sigma: vec![sigma; d],
            rho,
            x0: vec![x0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.x0.len();
        if d == 0 {
            return Err(Error::invalid("gbm.d", "dimension must be at least 1"));
        }
        if self.mu.len() != d || self.sigma.len() != d {
            return Err(Error::invalid(
                "gbm",
                format!(
                    "parameter lengths differ (mu {}, sigma {}, x0 {d})",
                    self.mu.len(),
                    self.sigma.len()
                ),
            ));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::invalid("gbm.rho", format!("|rho| must be <= 1, got {}", self.rho)));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("gbm.sigma", format!("volatility must be positive, got {s}")));
        }
        if self.mu.iter().chain(&self.x0).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gbm", "drift and initial values must be finite"));
        }
        Ok(())
    }

    /// Weight of the systematic channel, `sqrt(1 - rho^2)`.
    pub fn systematic_weight(&self) -> f64 {
        (1.0 - self.rho * self.rho).max(0.0).sqrt()
    }

    /// Increment of the effective Brownian motion `B_i = rho W_i + sqrt(1-rho^2) W_0`
    /// driving asset `i` (zero-based), from increments over all channels.
    #[inline]
    pub fn combined_increment(&self, i: usize, dw: &[f64]) -> f64 {
        self.rho * dw[i + 1] + self.systematic_weight() * dw[0]
    }

    /// Exact solution at time `t` given the effective Brownian values `b_i(t)`.
    pub fn exact_solution(&self, t: f64, b: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let s = self.sigma[i];
                self.x0[i] * ((self.mu[i] - 0.5 * s * s) * t + s * b[i]).exp()
            })
            .collect()
    }
}

/// A state component solved exactly as `x0[component] + W[channel]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactComponent {
    pub component: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Capabilities {
    pub supports_milstein: bool,
    pub supports_antithetic_truncated_milstein: bool,
    pub exact_components: Vec<ExactComponent>,
    /// The transition law over any step can be sampled exactly from the
    /// Brownian increment.
    pub exact_transition: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    Gbm(GbmParams),
    ClarkCameron,
}

/// An SDE `dX = a(X,t) dt + sigma(X,t) dW` on `[0, 1]` with `X in R^d`, `W in R^d'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: &'static str,
    pub kind: ModelKind,
    pub d: usize,
    pub d_prime: usize,
    pub x0: Vec<f64>,
    pub caps: Capabilities,
}

impl ModelSpec {
    /// Write `a(x, t)` into `out` (length `d`).
    #[inline]
    pub fn drift_into(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm(p) => {
                for i in 0..self.d {
                    out[i] = p.mu[i] * x[i];
                }
            }
            ModelKind::ClarkCameron => {
                out[0] = 0.0;
                out[1] = 0.0;
            }
        }
    }

    /// Write `sigma(x, t)` into `out` as a row-major `d x d'` matrix.
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm(p) => {
                let dp = self.d_prime;
                let sys = p.systematic_weight();
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..self.d {
                    let s = p.sigma[i] * x[i];
                    out[i * dp] = s * sys;
                    out[i * dp + i + 1] = s * p.rho;
                }
            }
            ModelKind::ClarkCameron => {
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = x[0];
            }
        }
    }

    /// In-place Euler update `x += a(x) h + sigma(x) dw` without forming the
    /// diffusion matrix. `dw` may be longer than `d'`.
    #[inline]
    pub fn euler_update(&self, x: &mut [f64], h: f64, dw: &[f64]) {
        match &self.kind {
            ModelKind::Gbm(p) => {
                let sys = p.systematic_weight();
                for i in 0..self.d {
                    let noise = sys * dw[0] + p.rho * dw[i + 1];
                    x[i] += p.mu[i] * x[i] * h + p.sigma[i] * x[i] * noise;
                }
            }
            ModelKind::ClarkCameron => {
                x[1] += x[0] * dw[1];
                x[0] += dw[0];
            }
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(x, t, &mut out);
        out
    }

    /// Diffusion matrix as rows.
    pub fn diffusion(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let mut flat = vec![0.0; self.d * self.d_prime];
        self.diffusion_into(x, t, &mut flat);
        flat.chunks(self.d_prime).map(<[f64]>::to_vec).collect()
    }

    /// Sample the exact transition over a step of length `h` driven by `dw`.
    /// Returns `false` when the model has no exact transition.
    pub fn exact_step_into(&self, x: &[f64], h: f64, dw: &[f64], out: &mut [f64]) -> bool {
        match &self.kind {
            ModelKind::Gbm(p) => {
                for i in 0..self.d {
                    let s = p.sigma[i];
                    let db = p.combined_increment(i, dw);
                    out[i] = x[i] * ((p.mu[i] - 0.5 * s * s) * h + s * db).exp();
                }
                true
            }
            ModelKind::ClarkCameron => false,
        }
    }

    pub fn gbm_params(&self) -> Option<&GbmParams> {
        match &self.kind {
            ModelKind::Gbm(p) => Some(p),
            ModelKind::ClarkCameron => None,
        }
    }
}

/// Correlated GBM with `d' = d + 1` channels, channel 0 systematic.
pub fn make_gbm(params: GbmParams) -> Result<ModelSpec> {
    params.validate()?;
    let d = params.dim();
    Ok(ModelSpec {
        name: "gbm",
        d,
        d_prime: d + 1,
        x0: params.x0.clone(),
        caps: Capabilities {
            supports_milstein: true,
            supports_antithetic_truncated_milstein: false,
            exact_components: Vec::new(),
            exact_transition: true,
        },
        kind: ModelKind::Gbm(params),
    })
}

/// `dX1 = dW1`, `dX2 = X1 dW2`, started at the origin.
pub fn make_clark_cameron() -> ModelSpec {
    ModelSpec {
        name: "clark-cameron",
        kind: ModelKind::ClarkCameron,
        d: 2,
        d_prime: 2,
        x0: vec![0.0, 0.0],
        caps: Capabilities {
            supports_milstein: false,
            supports_antithetic_truncated_milstein: true,
            exact_components: vec![ExactComponent {
                component: 0,
                channel: 0,
            }],
            exact_transition: false,
        },
    }
}

/// Look a model up by its command-line name.
pub fn model_from_name(name: &str, gbm: &GbmParams) -> Result<ModelSpec> {
    match name {
        "gbm" => make_gbm(gbm.clone()),
        "clark-cameron" => Ok(make_clark_cameron()),
        other => Err(Error::invalid(
            "model",
            format!("unknown model `{other}` (expected `gbm` or `clark-cameron`)"),
        )),
    }
}

pub const MODEL_NAMES: [&str; 2] = ["gbm", "clark-cameron"];

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `P(X_1 <= k)` for scalar GBM.
pub fn gbm_digital_closed_form(params: &GbmParams, k: f64) -> Result<f64> {
    params.validate()?;
    if params.dim() != 1 {
        return Err(Error::invalid("gbm.d", "closed form needs d = 1"));
    }
    if !(k > 0.0) {
        return Err(Error::invalid("payoff.threshold", format!("must be positive, got {k}")));
    }
    if k == f64::INFINITY {
        return Ok(1.0);
    }
    let (mu, sigma, x0) = (params.mu[0], params.sigma[0], params.x0[0]);
    Ok(normal_cdf(((k / x0).ln() - (mu - 0.5 * sigma * sigma)) / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gbm_reference_coefficients() {
        let m = make_gbm(GbmParams::reference(1)).unwrap();
        assert_eq!(m.d_prime, 2);
        assert!((m.drift(&[1.0], 0.3)[0] - 0.05).abs() < 1e-15);
        let s = m.diffusion(&[1.0], 0.3);
        assert!((s[0][0] - 0.2 * 0.51f64.sqrt()).abs() < 1e-15);
        assert!((s[0][1] - 0.2 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn gbm_absorbs_at_zero() {
        let m = make_gbm(GbmParams::reference(2)).unwrap();
        assert_eq!(m.drift(&[0.0, 0.0], 0.0), vec![0.0, 0.0]);
        assert!(m.diffusion(&[0.0, 0.0], 0.0).iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn gbm_rho_one_has_no_systematic_column() {
        let m = make_gbm(GbmParams::uniform(3, 0.05, 0.2, 1.0, 1.0)).unwrap();
        let s = m.diffusion(&[1.0, 2.0, 3.0], 0.0);
        assert!(s.iter().all(|row| row[0] == 0.0));
        assert!((s[2][3] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn gbm_rejects_bad_params() {
        assert!(make_gbm(GbmParams::uniform(1, 0.05, 0.2, 1.5, 1.0)).is_err());
        assert!(make_gbm(GbmParams::uniform(1, 0.05, -0.2, 0.5, 1.0)).is_err());
        assert!(make_gbm(GbmParams::uniform(0, 0.05, 0.2, 0.5, 1.0)).is_err());
    }

    #[test]
    fn clark_cameron_coefficients() {
        let m = make_clark_cameron();
        assert_eq!(m.drift(&[4.0, -2.0], 0.5), vec![0.0, 0.0]);
        assert_eq!(m.diffusion(&[3.0, 7.0], 0.1), vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
        let degenerate = m.diffusion(&[0.0, 5.0], 0.1);
        assert_eq!(degenerate[0][1], 0.0);
        assert_eq!(degenerate[1][1], 0.0);
        assert!(m.caps.supports_antithetic_truncated_milstein);
        assert_eq!(m.caps.exact_components[0].component, 0);
    }

    #[test]
    fn closed_form_digital() {
        let p = GbmParams::reference(1);
        let v = gbm_digital_closed_form(&p, 1.0).unwrap();
        assert!((v - 0.440_382_307_629_757_5).abs() < 1e-12, "{v}");
        let median = (0.05f64 - 0.02).exp();
        assert!((gbm_digital_closed_form(&p, median).unwrap() - 0.5).abs() < 1e-14);
        let wide = GbmParams::uniform(1, 0.1, 0.9, 0.0, 2.0);
        let median = 2.0 * (0.1f64 - 0.405).exp();
        assert!((gbm_digital_closed_form(&wide, median).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(gbm_digital_closed_form(&p, f64::INFINITY).unwrap(), 1.0);
        assert!(gbm_digital_closed_form(&p, 0.0).is_err());
        assert!(gbm_digital_closed_form(&GbmParams::reference(2), 1.0).is_err());
    }

    #[test]
    fn registry_names() {
        let g = GbmParams::reference(1);
        for name in MODEL_NAMES {
            assert_eq!(model_from_name(name, &g).unwrap().name, name);
        }
        assert!(model_from_name("heston", &g).is_err());
    }
}
