use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Hyperparams, IcarStructure, ModelError, ModelSpec, ETA_LIMIT};

/// Parameter values used to generate synthetic counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub hyper: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedData {
    pub y: Vec<u64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Draws `v`, `u`, forms `η` and draws Poisson counts. Parts disabled in
/// `spec` are zero. An infinite `tau_b` switches the random effect off.
pub fn simulate_counts(
    spec: &ModelSpec,
    structure: Option<&IcarStructure>,
    truth: &TruthSpec,
    seed: u64,
) -> Result<SimulatedData, ModelError> {
    let n = spec.n_units();
    if truth.beta.len() != spec.n_covariates() {
        return Err(ModelError::Dimension(format!(
            "{} true coefficients for {} covariates",
            truth.beta.len(),
            spec.n_covariates()
        )));
    }
    let h = Hyperparams::new(truth.hyper.tau_b, truth.hyper.phi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = if spec.include_unstructured {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    } else {
        vec![0.0; n]
    };
    let (u, scaling) = if spec.include_spatial {
        let s = structure.ok_or(ModelError::MissingStructure)?;
        let s = if s.scaling_factor().is_some() {
            s.clone()
        } else {
            s.clone().scaled()?
        };
        let u = s.sample(|| StandardNormal.sample(&mut rng))?;
        (u, s.scaling_factor().expect("scaled"))
    } else {
        (vec![0.0; n], 1.0)
    };
    let (cv, cu) = if h.tau_b.is_infinite() {
        (0.0, 0.0)
    } else {
        let phi = match (spec.include_spatial, spec.include_unstructured) {
            (true, true) => h.phi,
            (true, false) => 1.0,
            _ => 0.0,
        };
        Hyperparams {
            tau_b: h.tau_b,
            phi,
        }
        .coefficients(scaling)
    };
    let b: Vec<f64> = (0..n).map(|i| cv * v[i] + cu * u[i]).collect();
    let mut eta = vec![truth.beta0; n];
    for (j, col) in spec.design.iter().enumerate() {
        for (e, x) in eta.iter_mut().zip(col) {
            *e += truth.beta[j] * x;
        }
    }
    for (e, bi) in eta.iter_mut().zip(&b) {
        *e += bi;
    }
    let mut y = Vec::with_capacity(n);
    for (unit, (&e, &off)) in eta.iter().zip(&spec.offset).enumerate() {
        if e > ETA_LIMIT {
            return Err(ModelError::Divergence { unit, eta: e });
        }
        let mu = off * e.exp();
        let draw = if mu > 0.0 {
            Poisson::new(mu)
                .map_err(|_| ModelError::Divergence { unit, eta: e })?
                .sample(&mut rng) as u64
        } else {
            0
        };
        y.push(draw);
    }
    Ok(SimulatedData { y, v, u, b, eta })
}
