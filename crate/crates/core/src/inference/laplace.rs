use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{
    area_estimates, fixed_names, mixture_summary, weighted_summary, Deviance, Engine, EtaPosterior,
    FitResult, GridConfig, GridPoint, InferenceError,
};
use crate::bym::{BymModel, Hyperparams, Theta, Variant};
use crate::sparse::{Cholesky, EnvelopeMatrix, SelectedInverse};
use crate::stats::expit;

/// Posterior mode of the latent field for fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct LatentMode {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_joint: f64,
}

/// Solves involving the constraint matrix `A` (one row per ICAR component):
/// `Z = H⁻¹ Aᵀ` and `S = A Z`.
struct ConstraintSolve {
    z: Vec<Vec<f64>>,
    s: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det_s: f64,
}

impl ConstraintSolve {
    fn new(
        chol: &Cholesky,
        rows: &[Vec<usize>],
        dim: usize,
    ) -> Result<Option<Self>, InferenceError> {
        if rows.is_empty() {
            return Ok(None);
        }
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut a = vec![0.0; dim];
                for &i in r {
                    a[i] = 1.0;
                }
                chol.solve(&a)
            })
            .collect();
        let k = rows.len();
        let s = DMatrix::from_fn(k, k, |a, b| rows[a].iter().map(|&i| z[b][i]).sum::<f64>());
        let s = s.cholesky().ok_or_else(|| {
            InferenceError::NotPositiveDefinite("constraint Schur complement".into())
        })?;
        let log_det_s = 2.0 * s.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Some(Self { z, s, log_det_s }))
    }

    /// Removes the component of `delta` that violates the constraints.
    fn correct(&self, rows: &[Vec<usize>], delta: &mut [f64]) {
        let ad = DVector::from_iterator(
            rows.len(),
            rows.iter()
                .map(|r| r.iter().map(|&i| delta[i]).sum::<f64>()),
        );
        let c = self.s.solve(&ad);
        for (zc, cv) in self.z.iter().zip(c.iter()) {
            for (d, zi) in delta.iter_mut().zip(zc) {
                *d -= zi * cv;
            }
        }
    }

    /// `tᵀ S⁻¹ t` with `t = Zᵀ a` for a sparse `a` given as (index, coef).
    fn quad(&self, a: &[(usize, f64)]) -> f64 {
        let t = DVector::from_iterator(
            self.z.len(),
            self.z
                .iter()
                .map(|zc| a.iter().map(|&(i, c)| c * zc[i]).sum::<f64>()),
        );
        t.dot(&self.s.solve(&t))
    }
}

fn projected_gradient_norm(g: &[f64], rows: &[Vec<usize>]) -> f64 {
    let mut gp = g.to_vec();
    for r in rows {
        let m = r.iter().map(|&i| g[i]).sum::<f64>() / r.len() as f64;
        for &i in r {
            gp[i] -= m;
        }
    }
    gp.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn default_start(model: &BymModel) -> Vec<f64> {
    let mut x = vec![0.0; model.layout().dim()];
    let sy: f64 = model.counts().iter().map(|&y| y as f64).sum();
    let se: f64 = model.spec().offset.iter().sum();
    x[0] = (sy.max(0.5) / se).ln();
    x
}

struct Newton {
    mode: LatentMode,
    chol: Cholesky,
}

fn newton(
    model: &BymModel,
    h: &Hyperparams,
    cfg: &GridConfig,
    start: Option<&[f64]>,
) -> Result<Newton, InferenceError> {
    let rows = model.constraints();
    let dim = model.layout().dim();
    let mut x = start.map_or_else(|| default_start(model), <[f64]>::to_vec);
    model.project(&mut x);
    let eval = |x: &[f64]| model.log_joint(x, h).unwrap_or(f64::NEG_INFINITY);
    let mut f = eval(&x);
    if !f.is_finite() {
        x = default_start(model);
        f = eval(&x);
    }
    let mut hess = EnvelopeMatrix::zeros(model.symbolic());
    let mut gnorm = f64::INFINITY;
    let mut stalled = false;
    for it in 0..=cfg.max_newton_iter {
        let g = model.gradient(&x, h)?;
        gnorm = projected_gradient_norm(&g, &rows);
        model.neg_hessian(&x, h, &mut hess)?;
        let chol = hess
            .cholesky()
            .map_err(|e| InferenceError::NotPositiveDefinite(e.to_string()))?;
        let done = |chol: Cholesky, iterations: usize, gnorm: f64, x: Vec<f64>, f: f64| Newton {
            mode: LatentMode {
                x,
                iterations,
                gradient_norm: gnorm,
                log_joint: f,
            },
            chol,
        };
        if gnorm < cfg.gradient_tol {
            return Ok(done(chol, it, gnorm, x, f));
        }
        if it == cfg.max_newton_iter {
            break;
        }
        let mut delta = chol.solve(&g);
        if let Some(cs) = ConstraintSolve::new(&chol, &rows, dim)? {
            cs.correct(&rows, &mut delta);
        }
        let decrement: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let noise = 1e-14 * (1.0 + f.abs());
        if decrement <= noise {
            if stalled {
                // the objective no longer changes at working precision
                return Ok(done(chol, it, gnorm, x, f));
            }
            stalled = true;
            x.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
            model.project(&mut x);
            f = eval(&x);
            continue;
        }
        stalled = false;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let xn: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            let fn_ = eval(&xn);
            if fn_ - f >= 1e-4 * t * decrement - noise {
                x = xn;
                model.project(&mut x);
                f = eval(&x);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(InferenceError::NotConverged {
                iterations: it,
                gradient_norm: gnorm,
            });
        }
    }
    Err(InferenceError::NotConverged {
        iterations: cfg.max_newton_iter,
        gradient_norm: gnorm,
    })
}

/// Newton iterations on the constrained latent log density at fixed
/// hyperparameters.
pub fn find_mode(
    model: &BymModel,
    hyper: &Hyperparams,
    cfg: &GridConfig,
    start: Option<&[f64]>,
) -> Result<LatentMode, InferenceError> {
    Ok(newton(model, hyper, cfg, start)?.mode)
}

/// Everything computed at one hyperparameter value.
struct PointEval {
    theta: Theta,
    log_marginal: f64,
    x: Vec<f64>,
    iterations: usize,
    fixed_var: Vec<f64>,
    eta_mean: Vec<f64>,
    eta_var: Vec<f64>,
}

fn log_marginal_at(
    model: &BymModel,
    theta: &Theta,
    cfg: &GridConfig,
    start: Option<&[f64]>,
) -> Result<(f64, Newton), InferenceError> {
    let h = model.hyper_from_theta(theta);
    let nt = newton(model, &h, cfg, start)?;
    let rows = model.constraints();
    let dim = model.layout().dim();
    let mut log_det = nt.chol.log_det();
    if let Some(cs) = ConstraintSolve::new(&nt.chol, &rows, dim)? {
        log_det += cs.log_det_s - rows.iter().map(|r| (r.len() as f64).ln()).sum::<f64>();
    }
    let free = (dim - rows.len()) as f64;
    let lm = nt.mode.log_joint + model.log_hyperprior(theta) - 0.5 * log_det
        + 0.5 * free * (2.0 * std::f64::consts::PI).ln();
    Ok((lm, nt))
}

fn evaluate_point(
    model: &BymModel,
    theta: Theta,
    cfg: &GridConfig,
    start: Option<&[f64]>,
) -> Result<PointEval, InferenceError> {
    let (lm, nt) = log_marginal_at(model, &theta, cfg, start)?;
    let h = model.hyper_from_theta(&theta);
    let (cv, cu) = model.coefficients(&h);
    let l = model.layout();
    let rows = model.constraints();
    let cs = ConstraintSolve::new(&nt.chol, &rows, l.dim())?;
    let sel: SelectedInverse = nt.chol.selected_inverse();
    let x = nt.mode.x;
    let quad = |a: &[(usize, f64)]| -> Result<f64, InferenceError> {
        let mut v = 0.0;
        for &(i, ci) in a {
            for &(j, cj) in a {
                v += ci
                    * cj
                    * sel
                        .get(i, j)
                        .map_err(|e| InferenceError::NotPositiveDefinite(e.to_string()))?;
            }
        }
        if let Some(cs) = &cs {
            v -= cs.quad(a);
        }
        Ok(v.max(0.0))
    };
    let fixed_var = (0..l.n_fixed())
        .map(|j| quad(&[(j, 1.0)]))
        .collect::<Result<Vec<_>, _>>()?;
    let eta_mean = model.eta(&x, &h);
    let design = &model.spec().design;
    let mut eta_var = Vec::with_capacity(l.n);
    let mut a = Vec::with_capacity(l.n_fixed() + 2);
    for i in 0..l.n {
        a.clear();
        a.push((0, 1.0));
        for (j, col) in design.iter().enumerate() {
            a.push((l.beta(j), col[i]));
        }
        if let Some(k) = l.v(i) {
            a.push((k, cv));
        }
        if let Some(k) = l.u(i) {
            a.push((k, cu));
        }
        eta_var.push(quad(&a)?);
    }
    Ok(PointEval {
        theta,
        log_marginal: lm,
        x,
        iterations: nt.mode.iterations,
        fixed_var,
        eta_mean,
        eta_var,
    })
}

fn theta_of(model: &BymModel, v: &[f64]) -> Theta {
    match model.theta_dim() {
        2 => Theta {
            log_tau: v[0],
            logit_phi: v[1],
        },
        1 => Theta {
            log_tau: v[0],
            logit_phi: 0.0,
        },
        _ => Theta {
            log_tau: 0.0,
            logit_phi: 0.0,
        },
    }
}

struct NegLogMarginal<'a> {
    model: &'a BymModel,
    cfg: &'a GridConfig,
    start: &'a [f64],
}

impl CostFunction for NegLogMarginal<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, argmin::core::Error> {
        let t = theta_of(self.model, p);
        Ok(
            match log_marginal_at(self.model, &t, self.cfg, Some(self.start)) {
                Ok((lm, _)) if lm.is_finite() => -lm,
                _ => f64::INFINITY,
            },
        )
    }
}

/// Mode of the hyperparameter log marginal and the latent mode there.
fn hyper_mode(model: &BymModel, cfg: &GridConfig) -> Result<(Vec<f64>, Vec<f64>), InferenceError> {
    let dim = model.theta_dim();
    let log_taus = [-1.0, 0.5, 2.0, 3.5, 5.0, 6.5, 8.0];
    let logit_phis: &[f64] = if dim == 2 { &[-2.0, 0.0, 2.0] } else { &[0.0] };
    let mut coarse: Vec<Vec<f64>> = Vec::new();
    for &lt in &log_taus {
        for &lp in logit_phis {
            coarse.push(if dim == 2 { vec![lt, lp] } else { vec![lt] });
        }
    }
    let evals: Vec<Result<(f64, Newton), InferenceError>> = coarse
        .par_iter()
        .map(|v| log_marginal_at(model, &theta_of(model, v), cfg, None))
        .collect();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut last_err = None;
    for (k, r) in evals.into_iter().enumerate() {
        match r {
            Ok((lm, nt)) if lm.is_finite() => {
                if best.as_ref().is_none_or(|b| lm > b.1) {
                    best = Some((k, lm, nt.mode.x));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e.to_string()),
        }
    }
    let (k, _, x0) =
        best.ok_or_else(|| InferenceError::AllGridPointsFailed(last_err.unwrap_or_default()))?;
    let init = coarse[k].clone();
    let mut simplex = vec![init.clone()];
    for a in 0..dim {
        let mut p = init.clone();
        p[a] += 1.0;
        simplex.push(p);
    }
    let cost = NegLogMarginal {
        model,
        cfg,
        start: &x0,
    };
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-7)
        .map_err(|e| InferenceError::Config(e.to_string()))?;
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(200))
        .run()
        .map_err(|e| InferenceError::Config(e.to_string()))?;
    let mode = res.state().best_param.clone().unwrap_or(init);
    let (_, nt) = log_marginal_at(model, &theta_of(model, &mode), cfg, Some(&x0))?;
    Ok((mode, nt.mode.x))
}

/// Covariance of the Gaussian fitted to the hyperparameter log marginal at
/// its mode, by central differences; falls back to per-axis curvature or
/// `max_sd` when the surface is not locally concave.
fn hyper_covariance(
    model: &BymModel,
    cfg: &GridConfig,
    mode: &[f64],
    start: &[f64],
) -> DMatrix<f64> {
    let dim = mode.len();
    let step = 0.1;
    let f = |v: &[f64]| -> f64 {
        log_marginal_at(model, &theta_of(model, v), cfg, Some(start))
            .map(|r| r.0)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let f0 = f(mode);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut v = mode.to_vec();
        for &(a, d) in pairs {
            v[a] += d;
        }
        f(&v)
    };
    let mut hess = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        let fp = shifted(&[(a, step)]);
        let fm = shifted(&[(a, -step)]);
        hess[(a, a)] = -(fp - 2.0 * f0 + fm) / (step * step);
        for b in 0..a {
            let v = shifted(&[(a, step), (b, step)])
                - shifted(&[(a, step), (b, -step)])
                - shifted(&[(a, -step), (b, step)])
                + shifted(&[(a, -step), (b, -step)]);
            hess[(a, b)] = -v / (4.0 * step * step);
            hess[(b, a)] = hess[(a, b)];
        }
    }
    let floor = 1.0 / (cfg.max_sd * cfg.max_sd);
    let finite = hess.iter().all(|v| v.is_finite());
    if finite {
        if let Some(c) = hess.clone().cholesky() {
            return c.inverse();
        }
    }
    DMatrix::from_fn(dim, dim, |a, b| {
        if a == b {
            let h = hess[(a, a)];
            1.0 / if h.is_finite() { h.max(floor) } else { floor }
        } else {
            0.0
        }
    })
}

/// Grid-based Laplace fit.
pub fn laplace_fit(model: &BymModel, cfg: &GridConfig) -> Result<FitResult, InferenceError> {
    cfg.validate()?;
    let dim = model.theta_dim();
    let (points, start): (Vec<Vec<f64>>, Option<Vec<f64>>) = if dim == 0 {
        (vec![vec![]], None)
    } else {
        let (mode, x0) = hyper_mode(model, cfg)?;
        let cov = hyper_covariance(model, cfg, &mode, &x0);
        let eig = cov.symmetric_eigen();
        let scales: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|l| l.max(1e-6).sqrt().min(cfg.max_sd))
            .collect();
        let m = cfg.points_per_axis;
        let zs: Vec<f64> = if m == 1 {
            vec![0.0]
        } else {
            (0..m)
                .map(|k| -cfg.half_width + 2.0 * cfg.half_width * k as f64 / (m - 1) as f64)
                .collect()
        };
        let mut pts = Vec::new();
        let mut idx = vec![0usize; dim];
        loop {
            let mut p = mode.clone();
            for a in 0..dim {
                for b in 0..dim {
                    p[b] += eig.eigenvectors[(b, a)] * scales[a] * zs[idx[a]];
                }
            }
            pts.push(p);
            let mut a = 0;
            while a < dim {
                idx[a] += 1;
                if idx[a] < m {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
            if a == dim {
                break;
            }
        }
        (pts, Some(x0))
    };

    let evals: Vec<Result<PointEval, InferenceError>> = points
        .par_iter()
        .map(|p| evaluate_point(model, theta_of(model, p), cfg, start.as_deref()))
        .collect();
    let mut ok = Vec::new();
    let mut last_err = None;
    for (p, r) in points.iter().zip(evals) {
        match r {
            Ok(e) if e.log_marginal.is_finite() => ok.push(e),
            Ok(_) => log::warn!("grid point {p:?}: non-finite log marginal"),
            Err(e) => {
                log::warn!("grid point {p:?} failed: {e}");
                last_err = Some(e.to_string());
            }
        }
    }
    if ok.is_empty() {
        return Err(InferenceError::AllGridPointsFailed(
            last_err.unwrap_or_default(),
        ));
    }
    let max_lm = ok
        .iter()
        .map(|e| e.log_marginal)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = ok.iter().map(|e| (e.log_marginal - max_lm).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(InferenceError::BadWeights);
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let grid: Vec<GridPoint> = ok
        .iter()
        .zip(&weights)
        .map(|(e, &w)| GridPoint {
            log_tau: e.theta.log_tau,
            logit_phi: e.theta.logit_phi,
            log_marginal: e.log_marginal,
            weight: w,
            newton_iterations: e.iterations,
        })
        .collect();

    // mixture over points with non-negligible weight
    let keep: Vec<usize> = (0..ok.len()).filter(|&k| weights[k] > 1e-10).collect();
    let kept_total: f64 = keep.iter().map(|&k| weights[k]).sum();
    let kw: Vec<f64> = keep.iter().map(|&k| weights[k] / kept_total).collect();

    let names = fixed_names(&model.spec().covariate_names);
    let mut fixed = Vec::new();
    let mut fixed_rr = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let means: Vec<f64> = keep.iter().map(|&k| ok[k].x[j]).collect();
        let vars: Vec<f64> = keep.iter().map(|&k| ok[k].fixed_var[j]).collect();
        let (s, r) = mixture_summary(name, &kw, &means, &vars);
        fixed.push(s);
        fixed_rr.push(r);
    }

    let mut hyper = Vec::new();
    if dim >= 1 {
        let taus: Vec<f64> = ok.iter().map(|e| e.theta.log_tau.exp()).collect();
        hyper.push(weighted_summary("tau_b", &weights, &taus));
    }
    if model.spec().variant() == Variant::Bym2 {
        let phis: Vec<f64> = ok.iter().map(|e| expit(e.theta.logit_phi)).collect();
        hyper.push(weighted_summary("phi", &weights, &phis));
    }

    let eta = EtaPosterior::Mixture {
        weights: kw,
        means: keep.iter().map(|&k| ok[k].eta_mean.clone()).collect(),
        vars: keep.iter().map(|&k| ok[k].eta_var.clone()).collect(),
    };
    let deviance = mixture_deviance(model, &eta)?;
    Ok(FitResult {
        engine: Engine::Laplace,
        variant: model.spec().variant(),
        fixed,
        fixed_rr,
        hyper,
        area: area_estimates(&eta),
        grid,
        deviance,
        eta,
        diagnostics: Vec::new(),
        converged: true,
    })
}

fn mixture_deviance(model: &BymModel, eta: &EtaPosterior) -> Result<Deviance, InferenceError> {
    let dbar = crate::selection::mean_deviance(eta, &model.spec().offset, model.counts())?;
    let d_hat = -2.0 * model.log_likelihood_eta(&eta.mean())?;
    Ok(Deviance { dbar, d_hat })
}
