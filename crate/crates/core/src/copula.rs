//! Gaussian copula log-density and the two reparameterised transforms.
//!
//! For Σ with marginal variances D = diag(Σ_11, …, Σ_dd) and a point q in
//! quantile space,
//!
//! ```text
//! log c_Σ(q) = Σ_i log σ_i − ½ log|Σ| + ½ qᵀ(D⁻¹ − Σ⁻¹)q,   σ_i = √Σ_ii
//! ```
//!
//! which is exactly log N(q; 0, Σ) − Σ_i log N(q_i; 0, Σ_ii).

use crate::error::{Error, Result};
use crate::lowrank::{self, CholeskyFactor, DiagRankOneCov};
use crate::special::{self, Probability, HALF_LN_2PI};

/// A draw from the copula: `q` in quantile space and, optionally, its
/// companion `u_i = Φ(q_i / σ_i)` on the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaSample {
    pub q: Vec<f64>,
    pub u: Option<Vec<Probability>>,
}

impl CopulaSample {
    /// Fills in `u` using the marginal scales of `cov`.
    pub fn with_uniforms(mut self, cov: &DiagRankOneCov) -> Result<Self> {
        let var = lowrank::diag_of(cov);
        if var.len() != self.q.len() {
            return Err(Error::shape("CopulaSample::with_uniforms", var.len(), self.q.len()));
        }
        let u = self
            .q
            .iter()
            .zip(&var)
            .map(|(q, v)| Probability::new(special::cdf(q / v.sqrt())))
            .collect::<Result<Vec<_>>>()?;
        self.u = Some(u);
        Ok(self)
    }
}

pub(crate) fn log_copula_kernel(w: &[f64], a: &[f64], q: &[f64]) -> f64 {
    let mut half_log_var = 0.0;
    let mut qdq = 0.0;
    for i in 0..w.len() {
        let v = w[i] + a[i] * a[i];
        half_log_var += 0.5 * v.ln();
        qdq += q[i] * q[i] / v;
    }
    half_log_var - 0.5 * lowrank::log_det_kernel(w, a) + 0.5 * (qdq - lowrank::inv_quad_kernel(w, a, q))
}

pub fn log_copula_density(cov: &DiagRankOneCov, q: &[f64]) -> Result<f64> {
    if q.len() != cov.dim() {
        return Err(Error::shape("log_copula_density", cov.dim(), q.len()));
    }
    Ok(log_copula_kernel(cov.w(), cov.a(), q))
}

/// q = Lε.
pub fn reparam_copula_sample(chol: &CholeskyFactor, eps: &[f64]) -> Result<CopulaSample> {
    Ok(CopulaSample {
        q: lowrank::sample(chol, eps)?,
        u: None,
    })
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|s| !(*s > 0.0)) {
        Some(i) => Err(Error::Domain(format!("sigma[{i}] = {} must be positive", sigma[i]))),
        None => Ok(()),
    }
}

/// Σ_i log N(z_i; μ_i, σ_i²).
pub fn gaussian_log_marginals_sum(mu: &[f64], sigma: &[f64], z: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != z.len() {
        return Err(Error::shape(
            "gaussian_log_marginals_sum",
            mu.len(),
            format!("sigma {} / z {}", sigma.len(), z.len()),
        ));
    }
    check_sigma(sigma)?;
    let d = mu.len() as f64;
    let mut acc = -d * HALF_LN_2PI;
    for i in 0..mu.len() {
        let r = z[i] - mu[i];
        acc -= sigma[i].ln() + r * r / (2.0 * sigma[i] * sigma[i]);
    }
    Ok(acc)
}

/// log c_Σ(q) + Σ_i log q(z_i | x).
pub fn joint_log_posterior(
    mu: &[f64],
    sigma: &[f64],
    cov: &DiagRankOneCov,
    z: &[f64],
    q: &[f64],
) -> Result<f64> {
    Ok(log_copula_density(cov, q)? + gaussian_log_marginals_sum(mu, sigma, z)?)
}

/// u_i = Φ((z_i − μ_i) / σ_i).
pub fn probability_integral_transform(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<Probability>> {
    if mu.len() != sigma.len() || mu.len() != z.len() {
        return Err(Error::shape("probability_integral_transform", z.len(), mu.len()));
    }
    check_sigma(sigma)?;
    z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| Probability::new(special::cdf((z - m) / s)))
        .collect()
}
