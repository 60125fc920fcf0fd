use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::stats::expit;

/// Prior hyperparameters shared by the model and the inference engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSettings {
    /// Precision of the normal prior on the intercept and every coefficient.
    pub fixed_precision: f64,
    /// `P(σ_b > sigma_u) = sigma_alpha`.
    pub sigma_u: f64,
    pub sigma_alpha: f64,
    /// `P(φ < phi_u) = phi_alpha`.
    pub phi_u: f64,
    pub phi_alpha: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            fixed_precision: 0.001,
            sigma_u: 1.0,
            sigma_alpha: 0.01,
            phi_u: 0.5,
            phi_alpha: 2.0 / 3.0,
        }
    }
}

impl PriorSettings {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.fixed_precision > 0.0
            && self.sigma_u > 0.0
            && self.sigma_alpha > 0.0
            && self.sigma_alpha < 1.0
            && self.phi_u > 0.0
            && self.phi_u < 1.0
            && self.phi_alpha > 0.0
            && self.phi_alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidPrior(format!("{self:?}")))
        }
    }
}

/// Exponential PC prior on `σ = τ^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcSigmaPrior {
    pub rate: f64,
}

impl PcSigmaPrior {
    pub fn new(u: f64, alpha: f64) -> Self {
        Self {
            rate: -alpha.ln() / u,
        }
    }

    pub fn log_density_sigma(&self, sigma: f64) -> f64 {
        self.rate.ln() - self.rate * sigma
    }

    /// Density of `log τ` (includes the Jacobian `σ/2`).
    pub fn log_density_log_tau(&self, log_tau: f64) -> f64 {
        let sigma = (-0.5 * log_tau).exp();
        self.log_density_sigma(sigma) + sigma.ln() - std::f64::consts::LN_2
    }
}

const TABLE_HALF_WIDTH: f64 = 15.0;
const TABLE_POINTS: usize = 4001;

/// PC prior on the mixing fraction φ of the scaled BYM2 model, tabulated on
/// the logit scale and normalized numerically.
#[derive(Debug, Clone)]
pub struct PcPhiPrior {
    rate: f64,
    step: f64,
    log_density: Vec<f64>,
}

/// `x − ln(1 + x)`, accurate for small `x`.
fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 - x * (1.0 / 3.0 - 0.25 * x))
    } else {
        x - x.ln_1p()
    }
}

/// Distance function of the PC prior and its derivative.
struct Distance<'a> {
    gammas: &'a [f64],
}

impl Distance<'_> {
    fn kld(&self, phi: f64) -> f64 {
        0.5 * self
            .gammas
            .iter()
            .map(|g| x_minus_log1p(phi * (g - 1.0)))
            .sum::<f64>()
    }

    fn d(&self, phi: f64) -> f64 {
        (2.0 * self.kld(phi)).sqrt()
    }

    /// `ln |d'(φ)|`, using `d' = KLD' / d`.
    fn log_d_prime(&self, phi: f64) -> f64 {
        let kld_prime = 0.5
            * phi
            * self
                .gammas
                .iter()
                .map(|g| (g - 1.0).powi(2) / (1.0 + phi * (g - 1.0)))
                .sum::<f64>();
        kld_prime.ln() - self.d(phi).ln()
    }
}

impl PcPhiPrior {
    /// `gammas` are the eigenvalues of the scaled ICAR covariance restricted
    /// to its range, i.e. `1/(s λ_k)` for the nonzero eigenvalues `λ_k` of Q.
    pub fn new(gammas: &[f64], u: f64, alpha: f64) -> Result<Self, ModelError> {
        if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0)) {
            return Err(ModelError::InvalidPrior(
                "phi prior needs positive eigenvalues".into(),
            ));
        }
        let dist = Distance { gammas };
        let du = dist.d(u);
        let d1 = dist.d(1.0);
        if !(du > 0.0 && d1 > du) {
            return Err(ModelError::InvalidPrior(
                "phi prior distance is degenerate for this graph".into(),
            ));
        }
        // P(φ < u) = (1 − e^{−λ d(u)}) / (1 − e^{−λ d(1)}) is increasing in λ
        // from d(u)/d(1) towards 1.
        let prob = |lam: f64| (-lam * du).exp_m1() / (-lam * d1).exp_m1();
        if alpha <= prob(1e-12) {
            return Err(ModelError::InvalidPrior(format!(
                "phi_alpha {alpha} must exceed {:.4} for this graph",
                du / d1
            )));
        }
        let (mut lo, mut hi) = (1e-12, 1.0);
        while prob(hi) < alpha {
            hi *= 2.0;
            if hi > 1e8 {
                return Err(ModelError::InvalidPrior("phi prior rate not found".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if prob(mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let rate = 0.5 * (lo + hi);

        let step = 2.0 * TABLE_HALF_WIDTH / (TABLE_POINTS - 1) as f64;
        let mut log_density: Vec<f64> = (0..TABLE_POINTS)
            .map(|k| {
                let x = -TABLE_HALF_WIDTH + k as f64 * step;
                let phi = expit(x);
                let log_jac = phi.ln() + (1.0 - phi).ln();
                -rate * dist.d(phi) + dist.log_d_prime(phi) + log_jac
            })
            .collect();
        let peak = log_density
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut mass = 0.0;
        for k in 0..TABLE_POINTS {
            let w = if k == 0 || k + 1 == TABLE_POINTS {
                0.5
            } else {
                1.0
            };
            mass += w * (log_density[k] - peak).exp();
        }
        let log_norm = peak + (mass * step).ln();
        for v in &mut log_density {
            *v -= log_norm;
        }
        Ok(Self {
            rate,
            step,
            log_density,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Log density of `logit φ`, linear interpolation in the table and linear
    /// extrapolation beyond it.
    pub fn log_density_logit(&self, x: f64) -> f64 {
        let pos = (x + TABLE_HALF_WIDTH) / self.step;
        let last = TABLE_POINTS - 1;
        let k = if pos < 0.0 {
            0
        } else if pos >= last as f64 {
            last - 1
        } else {
            pos.floor() as usize
        };
        let frac = pos - k as f64;
        self.log_density[k] + frac * (self.log_density[k + 1] - self.log_density[k])
    }

    /// Log density of φ itself.
    pub fn log_density_phi(&self, phi: f64) -> f64 {
        let x = (phi / (1.0 - phi)).ln();
        self.log_density_logit(x) - phi.ln() - (1.0 - phi).ln()
    }

    /// `P(φ < p)` by trapezoid integration of the table.
    pub fn cdf(&self, p: f64) -> f64 {
        let x_end = (p / (1.0 - p)).ln();
        let mut acc = 0.0;
        let mut x = -TABLE_HALF_WIDTH;
        let mut prev = self.log_density_logit(x).exp();
        while x < x_end {
            let nx = (x + self.step).min(x_end);
            let cur = self.log_density_logit(nx).exp();
            acc += 0.5 * (prev + cur) * (nx - x);
            prev = cur;
            x = nx;
        }
        acc
    }
}
