use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    area_estimates, fixed_names, sample_summary, ChainDiagnostic, Deviance, Engine, EtaPosterior,
    FitResult, InferenceError,
};
use crate::bym::{BymModel, Theta, Variant};
use crate::stats::{effective_sample_size, split_rhat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Post-burn-in sweeps per chain.
    pub iterations: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            burn_in: 5000,
            iterations: 20000,
            thin: 10,
            seed: 1,
        }
    }
}

/// Random-walk proposal scale with batch adaptation.
#[derive(Debug, Clone)]
struct Step {
    scale: f64,
    target: f64,
    accepted: u32,
    tried: u32,
}

impl Step {
    fn new(scale: f64, target: f64) -> Self {
        Self {
            scale,
            target,
            accepted: 0,
            tried: 0,
        }
    }

    fn record(&mut self, ok: bool) {
        self.tried += 1;
        if ok {
            self.accepted += 1;
        }
    }

    fn adapt(&mut self, batch: usize) {
        if self.tried == 0 {
            return;
        }
        let rate = self.accepted as f64 / self.tried as f64;
        let delta = (1.0 / (batch as f64).sqrt()).min(0.1);
        self.scale *= if rate > self.target {
            delta.exp()
        } else {
            (-delta).exp()
        };
        self.accepted = 0;
        self.tried = 0;
    }
}

struct Chain<'a> {
    model: &'a BymModel,
    rng: ChaCha8Rng,
    beta0: f64,
    beta: Vec<f64>,
    v: Vec<f64>,
    /// ICAR field, possibly offset by a constant until the next centering.
    u: Vec<f64>,
    theta: Theta,
    cv: f64,
    cu: f64,
    eta: Vec<f64>,
    y: Vec<f64>,
    proposal_v: Vec<f64>,
    proposal_u: Vec<f64>,
    /// A single component spans all units, so moves along `e_i − 1/n` can be
    /// absorbed by the intercept.
    compensate: bool,
    s_beta0: Step,
    s_beta: Vec<Step>,
    s_shift: Step,
    s_v: Step,
    s_u: Step,
    s_hyper: Step,
    s_rescale: Step,
}

struct Samples {
    fixed: Vec<Vec<f64>>,
    tau: Vec<f64>,
    phi: Vec<f64>,
    eta: Vec<Vec<f64>>,
}

impl<'a> Chain<'a> {
    fn new(model: &'a BymModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = model.layout();
        let y: Vec<f64> = model.counts().iter().map(|&k| k as f64).collect();
        let sy: f64 = y.iter().sum();
        let se: f64 = model.spec().offset.iter().sum();
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let beta0 = (sy.max(0.5) / se).ln() + 0.2 * normal();
        let beta: Vec<f64> = (0..l.p).map(|_| 0.2 * normal()).collect();
        let theta = Theta {
            log_tau: 2.0 + normal(),
            logit_phi: normal(),
        };
        let compensate = model.icar().is_some_and(|s| s.components().len() == 1);
        let info = 1.0 / sy.max(1.0).sqrt();
        let mut chain = Self {
            model,
            rng,
            beta0,
            beta,
            v: vec![0.0; l.n],
            u: vec![0.0; l.n],
            theta,
            cv: 0.0,
            cu: 0.0,
            eta: Vec::new(),
            proposal_v: Vec::new(),
            proposal_u: Vec::new(),
            y,
            compensate,
            s_beta0: Step::new(2.0 * info, 0.44),
            s_beta: (0..l.p).map(|_| Step::new(2.0 * info, 0.44)).collect(),
            s_shift: Step::new(0.1, 0.44),
            s_v: Step::new(2.0, 0.44),
            s_u: Step::new(2.0, 0.44),
            s_hyper: Step::new(0.3, 0.3),
            s_rescale: Step::new(0.3, 0.3),
        };
        chain.refresh();
        chain
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn coefficients(&self, t: &Theta) -> (f64, f64) {
        self.model.coefficients(&self.model.hyper_from_theta(t))
    }

    /// Recomputes coefficients, `η` and per-site proposal factors.
    fn refresh(&mut self) {
        let (cv, cu) = self.coefficients(&self.theta);
        self.cv = cv;
        self.cu = cu;
        self.eta = self.compute_eta(cv, cu, &self.v, &self.u);
        let ypos: Vec<f64> = self.y.iter().map(|y| y.max(0.5)).collect();
        self.proposal_v = ypos
            .iter()
            .map(|y| 1.0 / (1.0 + cv * cv * y).sqrt())
            .collect();
        self.proposal_u = match self.model.icar() {
            Some(s) => (0..ypos.len())
                .map(|i| 1.0 / (s.degree(i) as f64 + cu * cu * ypos[i]).sqrt())
                .collect(),
            None => Vec::new(),
        };
    }

    fn compute_eta(&self, cv: f64, cu: f64, v: &[f64], u: &[f64]) -> Vec<f64> {
        let design = &self.model.spec().design;
        (0..self.y.len())
            .map(|i| {
                let mut e = self.beta0 + cv * v[i] + cu * u[i];
                for (b, col) in self.beta.iter().zip(design) {
                    e += b * col[i];
                }
                e
            })
            .collect()
    }

    fn mu(&self, i: usize) -> f64 {
        self.model.spec().offset[i] * self.eta[i].exp()
    }

    fn fixed_prior(&self, b: f64) -> f64 {
        -0.5 * self.model.spec().priors.fixed_precision * b * b
    }

    fn center_u(&mut self) {
        if let Some(s) = self.model.icar() {
            s.center(&mut self.u);
        }
    }

    fn update_beta0(&mut self) {
        let d = self.s_beta0.scale * self.normal();
        let sum_mu: f64 = (0..self.eta.len()).map(|i| self.mu(i)).sum();
        let sy: f64 = self.y.iter().sum();
        let lr = sy * d - d.exp_m1() * sum_mu + self.fixed_prior(self.beta0 + d)
            - self.fixed_prior(self.beta0);
        let ok = self.accept(lr);
        self.s_beta0.record(ok);
        if ok {
            self.beta0 += d;
            self.eta.iter_mut().for_each(|e| *e += d);
        }
    }

    fn update_beta(&mut self, j: usize) {
        let d = self.s_beta[j].scale * self.normal();
        let col = &self.model.spec().design[j];
        let mut lr = self.fixed_prior(self.beta[j] + d) - self.fixed_prior(self.beta[j]);
        for i in 0..self.eta.len() {
            lr += self.y[i] * d * col[i] - self.mu(i) * (d * col[i]).exp_m1();
        }
        let ok = self.accept(lr);
        self.s_beta[j].record(ok);
        if ok {
            self.beta[j] += d;
            for (e, x) in self.eta.iter_mut().zip(col) {
                *e += d * x;
            }
        }
    }

    /// Moves the intercept against the mean of `v`, leaving `η` unchanged.
    fn update_shift(&mut self) {
        if self.cv <= 0.0 {
            return;
        }
        let d = self.s_shift.scale * self.cv * self.normal();
        let a = d / self.cv;
        let n = self.v.len() as f64;
        let sum_v: f64 = self.v.iter().sum();
        let lr = a * sum_v - 0.5 * n * a * a + self.fixed_prior(self.beta0 + d)
            - self.fixed_prior(self.beta0);
        let ok = self.accept(lr);
        self.s_shift.record(ok);
        if ok {
            self.beta0 += d;
            self.v.iter_mut().for_each(|v| *v -= a);
        }
    }

    fn site_loglik_change(&self, i: usize, d_eta: f64) -> f64 {
        self.y[i] * d_eta - self.mu(i) * d_eta.exp_m1()
    }

    fn update_v(&mut self) {
        for i in 0..self.v.len() {
            let e = self.s_v.scale * self.proposal_v[i] * self.normal();
            let d_eta = self.cv * e;
            let lr = self.site_loglik_change(i, d_eta)
                - 0.5 * ((self.v[i] + e).powi(2) - self.v[i].powi(2));
            let ok = self.accept(lr);
            self.s_v.record(ok);
            if ok {
                self.v[i] += e;
                self.eta[i] += d_eta;
            }
        }
    }

    fn update_u(&mut self) {
        let Some(icar) = self.model.icar() else {
            return;
        };
        let n = self.u.len();
        for i in 0..n {
            if icar.is_singleton(i) {
                continue;
            }
            let e = self.s_u.scale * self.proposal_u[i] * self.normal();
            let qd = icar.q_row_dot(i, &self.u);
            let prior = -e * qd - 0.5 * e * e * icar.degree(i) as f64;
            if self.compensate {
                let d0 = self.cu * e / n as f64;
                let lr = self.site_loglik_change(i, self.cu * e)
                    + prior
                    + self.fixed_prior(self.beta0 + d0)
                    - self.fixed_prior(self.beta0);
                let ok = self.accept(lr);
                self.s_u.record(ok);
                if ok {
                    self.u[i] += e;
                    self.beta0 += d0;
                    self.eta[i] += self.cu * e;
                }
            } else {
                let members = &icar.components()[icar.component_of(i)];
                let m = members.len() as f64;
                let mut lr = prior;
                for &j in members {
                    let d = if j == i {
                        self.cu * e * (1.0 - 1.0 / m)
                    } else {
                        -self.cu * e / m
                    };
                    lr += self.site_loglik_change(j, d);
                }
                let ok = self.accept(lr);
                self.s_u.record(ok);
                if ok {
                    for &j in members {
                        let du = if j == i { e * (1.0 - 1.0 / m) } else { -e / m };
                        self.u[j] += du;
                        self.eta[j] += self.cu * du;
                    }
                }
            }
        }
    }

    fn propose_theta(&mut self, scale: f64) -> Theta {
        let mut t = self.theta;
        t.log_tau += scale * self.normal();
        if self.model.spec().variant() == Variant::Bym2 {
            t.logit_phi += scale * self.normal();
        }
        t
    }

    /// Random walk on the hyperparameters with `v`, `u` held fixed.
    fn update_hyper(&mut self) {
        let t = self.propose_theta(self.s_hyper.scale);
        let (cv, cu) = self.coefficients(&t);
        let eta = self.compute_eta(cv, cu, &self.v, &self.u);
        let mut lr = self.model.log_hyperprior(&t) - self.model.log_hyperprior(&self.theta);
        for i in 0..eta.len() {
            lr += self.site_loglik_change(i, eta[i] - self.eta[i]);
        }
        let ok = lr.is_finite() && self.accept(lr);
        self.s_hyper.record(ok);
        if ok {
            self.theta = t;
            self.refresh();
        }
    }

    /// Random walk on the hyperparameters that rescales `v` and `u` so that
    /// the random effect, and hence `η`, is unchanged.
    fn update_rescale(&mut self) {
        let t = self.propose_theta(self.s_rescale.scale);
        let (cv, cu) = self.coefficients(&t);
        let mut lr = self.model.log_hyperprior(&t) - self.model.log_hyperprior(&self.theta);
        let l = self.model.layout();
        let (rv, ru) = (self.cv / cv, self.cu / cu);
        if l.has_v {
            let ss: f64 = self.v.iter().map(|v| v * v).sum();
            lr += -0.5 * ss * (rv * rv - 1.0) + l.n as f64 * rv.ln();
        }
        if let (true, Some(icar)) = (l.has_u, self.model.icar()) {
            let q = icar.quadratic_form(&self.u);
            lr += -0.5 * q * (ru * ru - 1.0) + icar.rank() as f64 * ru.ln();
        }
        let ok = lr.is_finite() && self.accept(lr);
        self.s_rescale.record(ok);
        if ok {
            self.v.iter_mut().for_each(|v| *v *= rv);
            self.u.iter_mut().for_each(|u| *u *= ru);
            self.theta = t;
            self.refresh();
        }
    }

    fn sweep(&mut self) {
        self.update_beta0();
        for j in 0..self.beta.len() {
            self.update_beta(j);
        }
        let l = self.model.layout();
        if l.has_v {
            self.update_shift();
            self.update_v();
        }
        if l.has_u {
            self.update_u();
            self.center_u();
        }
        if self.model.theta_dim() > 0 {
            self.update_hyper();
            self.update_rescale();
        }
    }

    fn adapt(&mut self, batch: usize) {
        self.s_beta0.adapt(batch);
        self.s_beta.iter_mut().for_each(|s| s.adapt(batch));
        self.s_shift.adapt(batch);
        self.s_v.adapt(batch);
        self.s_u.adapt(batch);
        self.s_hyper.adapt(batch);
        self.s_rescale.adapt(batch);
    }

    fn run(mut self, cfg: &McmcConfig) -> Samples {
        const BATCH: usize = 50;
        for it in 0..cfg.burn_in {
            self.sweep();
            if (it + 1) % BATCH == 0 {
                self.adapt((it + 1) / BATCH);
            }
        }
        let mut out = Samples {
            fixed: vec![Vec::new(); 1 + self.beta.len()],
            tau: Vec::new(),
            phi: Vec::new(),
            eta: Vec::new(),
        };
        for it in 0..cfg.iterations {
            self.sweep();
            if (it + 1) % cfg.thin == 0 {
                out.fixed[0].push(self.beta0);
                for (j, b) in self.beta.iter().enumerate() {
                    out.fixed[j + 1].push(*b);
                }
                let h = self.model.hyper_from_theta(&self.theta);
                out.tau.push(h.tau_b);
                out.phi.push(h.phi);
                out.eta.push(self.eta.clone());
            }
        }
        out
    }
}

fn diagnostic(name: &str, chains: &[Vec<f64>]) -> ChainDiagnostic {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let ess: f64 = chains.iter().map(|c| effective_sample_size(c)).sum();
    let sd = crate::stats::sample_var(&all).sqrt();
    ChainDiagnostic {
        name: name.to_string(),
        rhat: split_rhat(chains),
        ess,
        mcse: sd / ess.sqrt(),
    }
}

/// Metropolis-within-Gibbs sampler. Chains run in parallel with seeds
/// derived from `cfg.seed`; results are deterministic given the config.
pub fn mcmc_fit(model: &BymModel, cfg: &McmcConfig) -> Result<FitResult, InferenceError> {
    if cfg.chains == 0 || cfg.iterations == 0 || cfg.thin == 0 || cfg.iterations < 4 * cfg.thin {
        return Err(InferenceError::Config(format!("{cfg:?}")));
    }
    let runs: Vec<Samples> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(c as u64);
            Chain::new(model, seed).run(cfg)
        })
        .collect();

    let names = fixed_names(&model.spec().covariate_names);
    let mut fixed = Vec::new();
    let mut fixed_rr = Vec::new();
    let mut diagnostics = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = runs.iter().map(|r| r.fixed[j].clone()).collect();
        let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let (s, r) = sample_summary(name, &all);
        fixed.push(s);
        fixed_rr.push(r);
        diagnostics.push(diagnostic(name, &per_chain));
    }
    let converged = diagnostics.iter().all(|d| d.rhat < 1.1);
    let mut hyper = Vec::new();
    if model.theta_dim() >= 1 {
        let per_chain: Vec<Vec<f64>> = runs.iter().map(|r| r.tau.clone()).collect();
        let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
        hyper.push(sample_summary("tau_b", &all).0);
        diagnostics.push(diagnostic("tau_b", &per_chain));
    }
    if model.spec().variant() == Variant::Bym2 {
        let per_chain: Vec<Vec<f64>> = runs.iter().map(|r| r.phi.clone()).collect();
        let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
        hyper.push(sample_summary("phi", &all).0);
        diagnostics.push(diagnostic("phi", &per_chain));
    }
    let draws: Vec<Vec<f64>> = runs.into_iter().flat_map(|r| r.eta).collect();
    let eta = EtaPosterior::Draws(draws);
    let dbar = crate::selection::mean_deviance(&eta, &model.spec().offset, model.counts())?;
    let d_hat = -2.0 * model.log_likelihood_eta(&eta.mean())?;
    Ok(FitResult {
        engine: Engine::Mcmc,
        variant: model.spec().variant(),
        fixed,
        fixed_rr,
        hyper,
        area: area_estimates(&eta),
        grid: Vec::new(),
        deviance: Deviance { dbar, d_hat },
        eta,
        diagnostics,
        converged,
    })
}
