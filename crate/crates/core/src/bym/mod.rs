//! Poisson BYM2 model.
//!
//! The linear predictor is `η_i = β0 + x_iᵀβ + b_i` with
//! `b_i = τ^{-1/2} (√(1−φ) v_i + √φ u_i / √s)`, where `v` is standard normal,
//! `u` is an intrinsic CAR field with precision `Q = D − W` constrained to sum
//! to zero on each connected component, and `s` is the geometric mean of the
//! constrained marginal variances of `Q`. Counts are `y_i ~ Poisson(E_i e^{η_i})`.
//!
//! The latent vector handled by the inference engines is laid out as
//! `[β0, β_1..β_p, v (if present), u (if present)]`; see [`LatentLayout`].

mod icar;
mod prior;
mod simulate;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{reverse_cuthill_mckee, EnvelopeMatrix, SparseError, Symbolic};
use crate::stats::{expit, ln_factorial};

pub use icar::{compute_scaling_factor, icar_precision, IcarStructure};
pub use prior::{PcPhiPrior, PcSigmaPrior, PriorSettings};
pub use simulate::{simulate_counts, SimulatedData, TruthSpec};

/// `η` above this value makes `e^η` overflow-prone; treated as divergence.
pub const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("offset must be positive and finite (unit {unit}: {value})")]
    BadOffset { unit: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear predictor diverged at unit {unit} (eta = {eta})")]
    Divergence { unit: usize, eta: f64 },
    #[error("invalid hyperparameters: tau_b = {tau_b}, phi = {phi}")]
    InvalidHyper { tau_b: f64, phi: f64 },
    #[error("invalid prior settings: {0}")]
    InvalidPrior(String),
    #[error("the adjacency graph has no edges; a spatial effect cannot be scaled")]
    NoSpatialStructure,
    #[error("spatial model requires an adjacency structure")]
    MissingStructure,
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Overall random-effect precision and spatial mixing fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub tau_b: f64,
    pub phi: f64,
}

impl Hyperparams {
    pub fn new(tau_b: f64, phi: f64) -> Result<Self, ModelError> {
        if !(tau_b > 0.0) || !(0.0..=1.0).contains(&phi) {
            return Err(ModelError::InvalidHyper { tau_b, phi });
        }
        Ok(Self { tau_b, phi })
    }

    /// Multipliers `(c_v, c_u)` with `b = c_v v + c_u u`.
    pub fn coefficients(&self, scaling: f64) -> (f64, f64) {
        (
            ((1.0 - self.phi) / self.tau_b).sqrt(),
            (self.phi / (self.tau_b * scaling)).sqrt(),
        )
    }
}

/// Which random-effect parts the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Structured and unstructured parts mixed by φ.
    Bym2,
    /// Scaled ICAR only (φ = 1).
    Icar,
    /// Unstructured only (φ = 0).
    Iid,
    /// No random effects.
    Glm,
}

/// Model definition shared by simulation and inference.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub covariate_names: Vec<String>,
    /// Design columns, each of length n (standardized by convention).
    pub design: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub include_spatial: bool,
    pub include_unstructured: bool,
    pub priors: PriorSettings,
}

impl ModelSpec {
    pub fn new(
        covariate_names: Vec<String>,
        design: Vec<Vec<f64>>,
        offset: Vec<f64>,
        include_spatial: bool,
        include_unstructured: bool,
        priors: PriorSettings,
    ) -> Result<Self, ModelError> {
        let n = offset.len();
        if covariate_names.len() != design.len() {
            return Err(ModelError::Dimension(format!(
                "{} covariate names for {} design columns",
                covariate_names.len(),
                design.len()
            )));
        }
        for (name, col) in covariate_names.iter().zip(&design) {
            if col.len() != n {
                return Err(ModelError::Dimension(format!(
                    "covariate {name} has {} values for {n} units",
                    col.len()
                )));
            }
        }
        for (unit, &value) in offset.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::BadOffset { unit, value });
            }
        }
        priors.validate()?;
        Ok(Self {
            covariate_names,
            design,
            offset,
            include_spatial,
            include_unstructured,
            priors,
        })
    }

    pub fn n_units(&self) -> usize {
        self.offset.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.design.len()
    }

    pub fn variant(&self) -> Variant {
        match (self.include_spatial, self.include_unstructured) {
            (true, true) => Variant::Bym2,
            (true, false) => Variant::Icar,
            (false, true) => Variant::Iid,
            (false, false) => Variant::Glm,
        }
    }

    /// Largest deviation of any design column from mean 0 / sd 1.
    pub fn standardization_error(&self) -> f64 {
        self.design
            .iter()
            .map(|c| {
                let m = crate::stats::mean(c);
                let sd = crate::stats::sample_var(c).sqrt();
                m.abs().max((sd - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Same spec with every offset multiplied by `k`.
    pub fn with_scaled_offset(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.offset.iter_mut().for_each(|e| *e *= k);
        out
    }
}

/// Latent state in natural form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

/// Positions of each latent block inside the flat latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub n: usize,
    pub p: usize,
    pub has_v: bool,
    pub has_u: bool,
}

impl LatentLayout {
    pub fn dim(&self) -> usize {
        1 + self.p + if self.has_v { self.n } else { 0 } + if self.has_u { self.n } else { 0 }
    }

    pub fn beta0(&self) -> usize {
        0
    }

    pub fn beta(&self, j: usize) -> usize {
        1 + j
    }

    pub fn n_fixed(&self) -> usize {
        1 + self.p
    }

    pub fn v(&self, i: usize) -> Option<usize> {
        self.has_v.then_some(1 + self.p + i)
    }

    pub fn u(&self, i: usize) -> Option<usize> {
        self.has_u
            .then_some(1 + self.p + if self.has_v { self.n } else { 0 } + i)
    }

    pub fn pack(&self, s: &LatentState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.push(s.beta0);
        x.extend_from_slice(&s.beta);
        if self.has_v {
            x.extend_from_slice(&s.v);
        }
        if self.has_u {
            x.extend_from_slice(&s.u);
        }
        x
    }

    /// Missing blocks come back as zero vectors.
    pub fn unpack(&self, x: &[f64]) -> LatentState {
        let beta = x[1..1 + self.p].to_vec();
        let v = match self.v(0) {
            Some(o) => x[o..o + self.n].to_vec(),
            None => vec![0.0; self.n],
        };
        let u = match self.u(0) {
            Some(o) => x[o..o + self.n].to_vec(),
            None => vec![0.0; self.n],
        };
        LatentState {
            beta0: x[0],
            beta,
            v,
            u,
        }
    }
}

/// Internal hyperparameter coordinates: `log τ_b` and `logit φ` where free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub log_tau: f64,
    pub logit_phi: f64,
}

/// An assembled model: spec, scaled ICAR structure and priors, ready for
/// density, gradient and Hessian evaluation.
#[derive(Debug, Clone)]
pub struct BymModel {
    spec: ModelSpec,
    icar: Option<IcarStructure>,
    scaling: f64,
    sigma_prior: PcSigmaPrior,
    phi_prior: Option<PcPhiPrior>,
    layout: LatentLayout,
    symbolic: Arc<Symbolic>,
    log_fact: Vec<f64>,
    y: Vec<u64>,
}

impl BymModel {
    /// `structure` is required when the spec includes the spatial part; it
    /// is scaled here if not already.
    pub fn new(
        spec: ModelSpec,
        structure: Option<IcarStructure>,
        y: &[u64],
    ) -> Result<Self, ModelError> {
        let n = spec.n_units();
        if y.len() != n {
            return Err(ModelError::Dimension(format!(
                "{} counts for {n} units",
                y.len()
            )));
        }
        let icar = if spec.include_spatial {
            let s = structure.ok_or(ModelError::MissingStructure)?;
            if s.len() != n {
                return Err(ModelError::Dimension(format!(
                    "adjacency has {} units, data has {n}",
                    s.len()
                )));
            }
            Some(if s.scaling_factor().is_some() {
                s
            } else {
                s.scaled()?
            })
        } else {
            None
        };
        let scaling = icar
            .as_ref()
            .and_then(|s| s.scaling_factor())
            .unwrap_or(1.0);
        let phi_prior = match (&icar, spec.include_unstructured) {
            (Some(s), true) => {
                let gammas: Vec<f64> = s
                    .nonzero_eigenvalues()
                    .iter()
                    .map(|l| 1.0 / (scaling * l))
                    .collect();
                Some(PcPhiPrior::new(
                    &gammas,
                    spec.priors.phi_u,
                    spec.priors.phi_alpha,
                )?)
            }
            _ => None,
        };
        let layout = LatentLayout {
            n,
            p: spec.n_covariates(),
            has_v: spec.include_unstructured,
            has_u: spec.include_spatial,
        };
        let symbolic = build_symbolic(&layout, icar.as_ref())?;
        let log_fact = y.iter().map(|&k| ln_factorial(k as f64)).collect();
        Ok(Self {
            sigma_prior: PcSigmaPrior::new(spec.priors.sigma_u, spec.priors.sigma_alpha),
            spec,
            icar,
            scaling,
            phi_prior,
            layout,
            symbolic,
            log_fact,
            y: y.to_vec(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn icar(&self) -> Option<&IcarStructure> {
        self.icar.as_ref()
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn layout(&self) -> LatentLayout {
        self.layout
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    pub fn counts(&self) -> &[u64] {
        &self.y
    }

    pub fn n_units(&self) -> usize {
        self.layout.n
    }

    /// Number of free hyperparameters (0, 1 or 2).
    pub fn theta_dim(&self) -> usize {
        match self.spec.variant() {
            Variant::Bym2 => 2,
            Variant::Icar | Variant::Iid => 1,
            Variant::Glm => 0,
        }
    }

    /// Maps internal coordinates to `(τ_b, φ)`; φ is fixed by the variant
    /// unless both parts are present.
    pub fn hyper_from_theta(&self, t: &Theta) -> Hyperparams {
        let phi = match self.spec.variant() {
            Variant::Bym2 => expit(t.logit_phi),
            Variant::Icar => 1.0,
            Variant::Iid | Variant::Glm => 0.0,
        };
        let tau_b = if self.theta_dim() == 0 {
            f64::INFINITY
        } else {
            t.log_tau.exp()
        };
        Hyperparams { tau_b, phi }
    }

    pub fn coefficients(&self, h: &Hyperparams) -> (f64, f64) {
        if h.tau_b.is_infinite() {
            return (0.0, 0.0);
        }
        h.coefficients(self.scaling)
    }

    /// Log prior density of the internal hyperparameter coordinates.
    pub fn log_hyperprior(&self, t: &Theta) -> f64 {
        let mut lp = 0.0;
        if self.theta_dim() >= 1 {
            lp += self.sigma_prior.log_density_log_tau(t.log_tau);
        }
        if let Some(p) = &self.phi_prior {
            lp += p.log_density_logit(t.logit_phi);
        }
        lp
    }

    pub fn phi_prior(&self) -> Option<&PcPhiPrior> {
        self.phi_prior.as_ref()
    }

    pub fn sigma_prior(&self) -> &PcSigmaPrior {
        &self.sigma_prior
    }

    /// `η` for a flat latent vector.
    pub fn eta(&self, x: &[f64], h: &Hyperparams) -> Vec<f64> {
        let l = &self.layout;
        let (cv, cu) = self.coefficients(h);
        let mut eta = vec![x[0]; l.n];
        for (j, col) in self.spec.design.iter().enumerate() {
            let b = x[l.beta(j)];
            for (e, xv) in eta.iter_mut().zip(col) {
                *e += b * xv;
            }
        }
        if let Some(o) = l.v(0) {
            for (i, e) in eta.iter_mut().enumerate() {
                *e += cv * x[o + i];
            }
        }
        if let Some(o) = l.u(0) {
            for (i, e) in eta.iter_mut().enumerate() {
                *e += cu * x[o + i];
            }
        }
        eta
    }

    /// Poisson log likelihood of the stored counts at `η`.
    pub fn log_likelihood_eta(&self, eta: &[f64]) -> Result<f64, ModelError> {
        poisson_log_likelihood_with(eta, &self.spec.offset, &self.y, &self.log_fact)
    }

    /// Log density of the latent vector given the hyperparameters. For the
    /// ICAR block this is the density on the constrained subspace.
    pub fn log_latent_prior(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let prec = self.spec.priors.fixed_precision;
        let mut lp = 0.0;
        for &b in &x[..l.n_fixed()] {
            lp += 0.5 * (prec.ln() - ln2pi) - 0.5 * prec * b * b;
        }
        if let Some(o) = l.v(0) {
            for &v in &x[o..o + l.n] {
                lp += -0.5 * ln2pi - 0.5 * v * v;
            }
        }
        if let (Some(o), Some(icar)) = (l.u(0), &self.icar) {
            let u = &x[o..o + l.n];
            lp += -0.5 * icar.rank() as f64 * ln2pi + 0.5 * icar.log_pdet()
                - 0.5 * icar.quadratic_form(u);
        }
        lp
    }

    /// `log p(y | x) + log p(x | θ)`.
    pub fn log_joint(&self, x: &[f64], h: &Hyperparams) -> Result<f64, ModelError> {
        let eta = self.eta(x, h);
        Ok(self.log_likelihood_eta(&eta)? + self.log_latent_prior(x))
    }

    /// Gradient of [`Self::log_joint`] with respect to the flat latent vector.
    pub fn gradient(&self, x: &[f64], h: &Hyperparams) -> Result<Vec<f64>, ModelError> {
        let l = &self.layout;
        let (cv, cu) = self.coefficients(h);
        let eta = self.eta(x, h);
        check_eta(&eta)?;
        let r: Vec<f64> = eta
            .iter()
            .zip(&self.spec.offset)
            .zip(&self.y)
            .map(|((e, off), &y)| y as f64 - off * e.exp())
            .collect();
        let prec = self.spec.priors.fixed_precision;
        let mut g = vec![0.0; l.dim()];
        g[0] = r.iter().sum::<f64>() - prec * x[0];
        for (j, col) in self.spec.design.iter().enumerate() {
            let k = l.beta(j);
            g[k] = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() - prec * x[k];
        }
        if let Some(o) = l.v(0) {
            for i in 0..l.n {
                g[o + i] = cv * r[i] - x[o + i];
            }
        }
        if let (Some(o), Some(icar)) = (l.u(0), &self.icar) {
            let u = &x[o..o + l.n];
            for i in 0..l.n {
                g[o + i] = cu * r[i] - icar.q_row_dot(i, u);
            }
        }
        Ok(g)
    }

    /// Fills `out` with the negative Hessian of [`Self::log_joint`].
    pub fn neg_hessian(
        &self,
        x: &[f64],
        h: &Hyperparams,
        out: &mut EnvelopeMatrix,
    ) -> Result<(), ModelError> {
        let l = &self.layout;
        let (cv, cu) = self.coefficients(h);
        let eta = self.eta(x, h);
        check_eta(&eta)?;
        let w: Vec<f64> = eta
            .iter()
            .zip(&self.spec.offset)
            .map(|(e, off)| off * e.exp())
            .collect();
        out.clear();
        let prec = self.spec.priors.fixed_precision;
        let design = &self.spec.design;
        // fixed-effect block
        out.add(0, 0, prec + w.iter().sum::<f64>())?;
        for j in 0..l.p {
            let wx: f64 = w.iter().zip(&design[j]).map(|(a, b)| a * b).sum();
            out.add(l.beta(j), 0, wx)?;
            for k in 0..=j {
                let s: f64 = (0..l.n).map(|i| w[i] * design[j][i] * design[k][i]).sum();
                out.add(l.beta(j), l.beta(k), s + if j == k { prec } else { 0.0 })?;
            }
        }
        for i in 0..l.n {
            let mut coupling = Vec::with_capacity(2);
            if let Some(o) = l.v(0) {
                coupling.push((o + i, cv, 1.0));
            }
            if let (Some(o), Some(icar)) = (l.u(0), &self.icar) {
                coupling.push((o + i, cu, icar.degree(i) as f64));
                for &j in icar.neighbors(i) {
                    if j < i {
                        out.add(o + i, o + j, -1.0)?;
                    }
                }
            }
            for (a, &(ka, ca, prior_diag)) in coupling.iter().enumerate() {
                out.add(ka, 0, w[i] * ca)?;
                for j in 0..l.p {
                    out.add(ka, l.beta(j), w[i] * ca * design[j][i])?;
                }
                out.add(ka, ka, prior_diag + w[i] * ca * ca)?;
                for &(kb, cb, _) in &coupling[..a] {
                    out.add(ka, kb, w[i] * ca * cb)?;
                }
            }
        }
        Ok(())
    }

    /// Constraint rows: for every ICAR component, the latent indices whose
    /// sum must vanish.
    pub fn constraints(&self) -> Vec<Vec<usize>> {
        match (self.layout.u(0), &self.icar) {
            (Some(o), Some(icar)) => icar
                .components()
                .iter()
                .map(|c| c.iter().map(|&i| o + i).collect())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Projects a flat latent vector onto the constraint set.
    pub fn project(&self, x: &mut [f64]) {
        if let (Some(o), Some(icar)) = (self.layout.u(0), &self.icar) {
            icar.center(&mut x[o..o + self.layout.n]);
        }
    }
}

fn check_eta(eta: &[f64]) -> Result<(), ModelError> {
    for (unit, &e) in eta.iter().enumerate() {
        if !(e <= ETA_LIMIT) {
            return Err(ModelError::Divergence { unit, eta: e });
        }
    }
    Ok(())
}

/// Sparsity pattern of the negative Hessian under a unit-level RCM order with
/// `v_i, u_i` interleaved and the fixed effects last.
fn build_symbolic(
    l: &LatentLayout,
    icar: Option<&IcarStructure>,
) -> Result<Arc<Symbolic>, ModelError> {
    let d = l.dim();
    let mut pattern = vec![Vec::new(); d];
    let nf = l.n_fixed();
    for a in 0..nf {
        for b in 0..a {
            pattern[a].push(b);
        }
    }
    for i in 0..l.n {
        let blocks: Vec<usize> = [l.v(i), l.u(i)].into_iter().flatten().collect();
        for &k in &blocks {
            pattern[k].extend(0..nf);
        }
        if let [a, b] = blocks[..] {
            pattern[b].push(a);
        }
        if let (Some(ku), Some(icar)) = (l.u(i), icar) {
            for &j in icar.neighbors(i) {
                pattern[ku].push(l.u(j).expect("u block present"));
            }
        }
    }
    let unit_order = match icar {
        Some(s) => reverse_cuthill_mckee(s.adjacency_lists()),
        None => (0..l.n).collect(),
    };
    let mut perm = Vec::with_capacity(d);
    for &i in &unit_order {
        perm.extend(l.v(i));
        perm.extend(l.u(i));
    }
    perm.extend(0..nf);
    Ok(Symbolic::new(&pattern, perm)?)
}

/// `Σ_i [y_i (log E_i + η_i) − E_i e^{η_i} − log y_i!]`.
pub fn poisson_log_likelihood(eta: &[f64], offset: &[f64], y: &[u64]) -> Result<f64, ModelError> {
    let lf: Vec<f64> = y.iter().map(|&k| ln_factorial(k as f64)).collect();
    poisson_log_likelihood_with(eta, offset, y, &lf)
}

fn poisson_log_likelihood_with(
    eta: &[f64],
    offset: &[f64],
    y: &[u64],
    log_fact: &[f64],
) -> Result<f64, ModelError> {
    check_eta(eta)?;
    let mut acc = 0.0;
    for i in 0..eta.len() {
        let yi = y[i] as f64;
        let mu = offset[i] * eta[i].exp();
        let lin = if y[i] == 0 {
            0.0
        } else {
            yi * (offset[i].ln() + eta[i])
        };
        acc += lin - mu - log_fact[i];
    }
    Ok(acc)
}

/// Log likelihood of a natural-form state; convenience wrapper over
/// [`BymModel::log_likelihood_eta`].
pub fn log_likelihood(
    model: &BymModel,
    state: &LatentState,
    hyper: &Hyperparams,
) -> Result<f64, ModelError> {
    let x = model.layout().pack(state);
    model.log_likelihood_eta(&model.eta(&x, hyper))
}

/// Full log prior: latent terms plus the hyperprior at `hyper`.
pub fn log_prior(
    model: &BymModel,
    state: &LatentState,
    hyper: &Hyperparams,
) -> Result<f64, ModelError> {
    if !(hyper.tau_b > 0.0) || !(0.0..=1.0).contains(&hyper.phi) {
        return Err(ModelError::InvalidHyper {
            tau_b: hyper.tau_b,
            phi: hyper.phi,
        });
    }
    let x = model.layout().pack(state);
    let theta = Theta {
        log_tau: hyper.tau_b.ln(),
        logit_phi: crate::stats::logit(hyper.phi),
    };
    Ok(model.log_latent_prior(&x) + model.log_hyperprior(&theta))
}
