//! Posterior inference for [`crate::bym`] models.
//!
//! [`laplace_fit`] integrates the hyperparameters over a rotated grid and uses
//! a Gaussian approximation of the latent field at every grid point.
//! [`mcmc_fit`] is an independent Metropolis-within-Gibbs sampler used to
//! cross-check it.

mod laplace;
mod mcmc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bym::{ModelError, Variant};
use crate::stats::{normal_mixture_quantile, quantile_sorted, std_normal_cdf};

pub use laplace::{find_mode, laplace_fit, LatentMode};
pub use mcmc::{mcmc_fit, McmcConfig};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Newton iterations did not converge after {iterations} steps (projected gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("negative Hessian is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("every hyperparameter grid point failed; last error: {0}")]
    AllGridPointsFailed(String),
    #[error("grid weights are not finite")]
    BadWeights,
    #[error("fit carries no posterior representation of the linear predictor")]
    MissingPosterior,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Settings of the Laplace engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Grid points per hyperparameter axis.
    pub points_per_axis: usize,
    /// Half-width of the grid in standard deviations of the Gaussian fitted
    /// to the hyperparameter posterior at its mode.
    pub half_width: f64,
    /// Upper bound on the standard deviation used to span each axis.
    pub max_sd: f64,
    pub max_newton_iter: usize,
    pub gradient_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points_per_axis: 15,
            half_width: 3.5,
            max_sd: 2.5,
            max_newton_iter: 50,
            gradient_tol: 1e-8,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.points_per_axis == 0
            || !(self.half_width.is_finite() && self.half_width >= 0.0)
            || !(self.max_sd > 0.0 && self.max_sd.is_finite())
            || self.max_newton_iter == 0
            || !(self.gradient_tol > 0.0)
        {
            return Err(InferenceError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Engine {
    Laplace,
    Mcmc,
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Posterior of `exp(parameter)`: mean and equal-tailed 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrSummary {
    pub name: String,
    pub rr: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Per-area relative risks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimates {
    pub rr: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `P(ρ_i > 1)`.
    pub exceedance: Vec<f64>,
}

impl AreaEstimates {
    pub fn len(&self) -> usize {
        self.rr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rr.is_empty()
    }
}

/// Posterior representation of the linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EtaPosterior {
    /// Weighted mixture of independent Gaussian marginals, one component per
    /// retained grid point.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
    },
    /// Equally weighted draws.
    Draws(Vec<Vec<f64>>),
}

impl EtaPosterior {
    pub fn n_units(&self) -> usize {
        match self {
            EtaPosterior::Mixture { means, .. } => means.first().map_or(0, Vec::len),
            EtaPosterior::Draws(d) => d.first().map_or(0, Vec::len),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            EtaPosterior::Mixture { weights, .. } => weights.is_empty(),
            EtaPosterior::Draws(d) => d.is_empty(),
        }
    }

    /// Posterior mean of `η`.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.n_units();
        let mut out = vec![0.0; n];
        match self {
            EtaPosterior::Mixture { weights, means, .. } => {
                for (w, m) in weights.iter().zip(means) {
                    for (o, x) in out.iter_mut().zip(m) {
                        *o += w * x;
                    }
                }
            }
            EtaPosterior::Draws(d) => {
                for draw in d {
                    for (o, x) in out.iter_mut().zip(draw) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= d.len() as f64);
            }
        }
        out
    }
}

/// Hyperparameter grid point of a Laplace fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub log_tau: f64,
    pub logit_phi: f64,
    pub log_marginal: f64,
    pub weight: f64,
    pub newton_iterations: usize,
}

/// Sampler convergence diagnostics for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    pub mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviance {
    /// Posterior mean deviance.
    pub dbar: f64,
    /// Deviance at the posterior mean of `η`.
    pub d_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub engine: Engine,
    pub variant: Variant,
    /// Intercept first (named `intercept`), then covariates in design order.
    pub fixed: Vec<ParamSummary>,
    pub fixed_rr: Vec<RrSummary>,
    pub hyper: Vec<ParamSummary>,
    pub area: AreaEstimates,
    pub grid: Vec<GridPoint>,
    pub deviance: Deviance,
    pub eta: EtaPosterior,
    pub diagnostics: Vec<ChainDiagnostic>,
    /// False when a sampler diagnostic exceeds 1.1 for a fixed effect.
    pub converged: bool,
}

impl FitResult {
    pub fn fixed_by_name(&self, name: &str) -> Option<&ParamSummary> {
        self.fixed.iter().find(|p| p.name == name)
    }

    pub fn fixed_rr_by_name(&self, name: &str) -> Option<&RrSummary> {
        self.fixed_rr.iter().find(|p| p.name == name)
    }

    pub fn hyper_by_name(&self, name: &str) -> Option<&ParamSummary> {
        self.hyper.iter().find(|p| p.name == name)
    }

    /// Summary CSV: `parameter,mean,sd,q2.5,q97.5`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("parameter,mean,sd,q2.5,q97.5\n");
        for p in self.fixed.iter().chain(&self.hyper) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                p.name, p.mean, p.sd, p.q025, p.q975
            ));
        }
        out
    }

    /// Relative-risk table: `parameter,RR,ci_low,ci_high`.
    pub fn rr_table_csv(&self) -> String {
        let mut out = String::from("parameter,RR,ci_low,ci_high\n");
        for p in &self.fixed_rr {
            out.push_str(&format!("{},{:.4},{:.4},{:.4}\n", p.name, p.rr, p.lo, p.hi));
        }
        out
    }

    /// Area CSV: `unit_id,RR,lo,hi,exceedance`.
    pub fn area_csv(&self, unit_ids: &[String]) -> String {
        let mut out = String::from("unit_id,RR,lo,hi,exceedance\n");
        let a = &self.area;
        for (i, id) in unit_ids.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                id, a.rr[i], a.lo[i], a.hi[i], a.exceedance[i]
            ));
        }
        out
    }
}

/// Relative risks from a posterior representation of `η`: the posterior
/// mean of `exp(η_i)`, equal-tailed 95% interval and `P(η_i > 0)`.
pub fn area_estimates(eta: &EtaPosterior) -> AreaEstimates {
    let n = eta.n_units();
    let mut out = AreaEstimates {
        rr: Vec::with_capacity(n),
        lo: Vec::with_capacity(n),
        hi: Vec::with_capacity(n),
        exceedance: Vec::with_capacity(n),
    };
    match eta {
        EtaPosterior::Mixture {
            weights,
            means,
            vars,
        } => {
            for i in 0..n {
                let m: Vec<f64> = means.iter().map(|r| r[i]).collect();
                let sd: Vec<f64> = vars.iter().map(|r| r[i].max(0.0).sqrt()).collect();
                let mut rr = 0.0;
                let mut exc = 0.0;
                for k in 0..weights.len() {
                    rr += weights[k] * (m[k] + 0.5 * sd[k] * sd[k]).exp();
                    exc += weights[k]
                        * if sd[k] > 0.0 {
                            std_normal_cdf(m[k] / sd[k])
                        } else if m[k] > 0.0 {
                            1.0
                        } else {
                            0.0
                        };
                }
                out.rr.push(rr);
                out.lo
                    .push(normal_mixture_quantile(weights, &m, &sd, 0.025).exp());
                out.hi
                    .push(normal_mixture_quantile(weights, &m, &sd, 0.975).exp());
                out.exceedance.push(exc);
            }
        }
        EtaPosterior::Draws(draws) => {
            for i in 0..n {
                let mut col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
                col.sort_by(|a, b| a.total_cmp(b));
                let rr = col.iter().map(|e| e.exp()).sum::<f64>() / col.len() as f64;
                out.rr.push(rr);
                out.lo.push(quantile_sorted(&col, 0.025).exp());
                out.hi.push(quantile_sorted(&col, 0.975).exp());
                out.exceedance
                    .push(col.iter().filter(|&&e| e > 0.0).count() as f64 / col.len() as f64);
            }
        }
    }
    out
}

/// Per-area relative-risk estimates of a fit.
pub fn predicted_rr(fit: &FitResult) -> AreaEstimates {
    area_estimates(&fit.eta)
}

/// Summary of a scalar whose posterior is a Gaussian mixture.
pub(crate) fn mixture_summary(
    name: &str,
    weights: &[f64],
    means: &[f64],
    vars: &[f64],
) -> (ParamSummary, RrSummary) {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights
        .iter()
        .zip(means.iter().zip(vars))
        .map(|(w, (m, v))| w * (v + m * m))
        .sum();
    let sds: Vec<f64> = vars.iter().map(|v| v.max(0.0).sqrt()).collect();
    let q025 = normal_mixture_quantile(weights, means, &sds, 0.025);
    let q975 = normal_mixture_quantile(weights, means, &sds, 0.975);
    let rr: f64 = weights
        .iter()
        .zip(means.iter().zip(vars))
        .map(|(w, (m, v))| w * (m + 0.5 * v).exp())
        .sum();
    (
        ParamSummary {
            name: name.to_string(),
            mean,
            sd: (second - mean * mean).max(0.0).sqrt(),
            q025,
            q975,
        },
        RrSummary {
            name: name.to_string(),
            rr,
            lo: q025.exp(),
            hi: q975.exp(),
        },
    )
}

/// Summary of a scalar from equally weighted samples.
pub(crate) fn sample_summary(name: &str, samples: &[f64]) -> (ParamSummary, RrSummary) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = crate::stats::mean(samples);
    let sd = crate::stats::sample_var(samples).max(0.0).sqrt();
    let q025 = quantile_sorted(&sorted, 0.025);
    let q975 = quantile_sorted(&sorted, 0.975);
    let rr = samples.iter().map(|x| x.exp()).sum::<f64>() / samples.len() as f64;
    (
        ParamSummary {
            name: name.to_string(),
            mean,
            sd,
            q025,
            q975,
        },
        RrSummary {
            name: name.to_string(),
            rr,
            lo: q025.exp(),
            hi: q975.exp(),
        },
    )
}

/// Summary of a scalar over a discrete weighted set of values.
pub(crate) fn weighted_summary(name: &str, weights: &[f64], values: &[f64]) -> ParamSummary {
    let mean: f64 = weights.iter().zip(values).map(|(w, v)| w * v).sum();
    let var: f64 = weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v - mean).powi(2))
        .sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let quantile = |p: f64| {
        let mut cum = 0.0;
        for &k in &order {
            cum += weights[k];
            if cum >= p {
                return values[k];
            }
        }
        values[*order.last().expect("nonempty")]
    };
    ParamSummary {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        q025: quantile(0.025),
        q975: quantile(0.975),
    }
}

pub(crate) fn fixed_names(covariates: &[String]) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain(covariates.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests;
