//! Deviance information criterion and one-pass bivariate covariate screening.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bym::{BymModel, IcarStructure, ModelError, ModelSpec};
use crate::covariates::{collinearity_check, CollinearPair, ComponentCandidates, CovariateMatrix};
use crate::inference::{
    laplace_fit, mcmc_fit, EtaPosterior, FitResult, GridConfig, InferenceError, McmcConfig,
};
use crate::stats::ln_factorial;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no candidate covariates to screen")]
    Empty,
    #[error("unknown covariate column index {0}")]
    UnknownColumn(usize),
    #[error("every candidate fit failed; last error: {0}")]
    AllFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub dbar: f64,
    pub d_hat: f64,
    pub p_d: f64,
    pub dic: f64,
}

/// `−2 log p(y | η)`.
pub fn deviance(eta: &[f64], offset: &[f64], y: &[u64]) -> Result<f64, ModelError> {
    Ok(-2.0 * crate::bym::poisson_log_likelihood(eta, offset, y)?)
}

/// Posterior mean deviance. For a Gaussian mixture the expectation is exact
/// (`E e^η = e^{μ + σ²/2}`); for draws it is the sample average.
pub fn mean_deviance(eta: &EtaPosterior, offset: &[f64], y: &[u64]) -> Result<f64, InferenceError> {
    if eta.is_empty() {
        return Err(InferenceError::MissingPosterior);
    }
    match eta {
        EtaPosterior::Mixture {
            weights,
            means,
            vars,
        } => {
            let mut acc = 0.0;
            for ((w, m), v) in weights.iter().zip(means).zip(vars) {
                let mut ll = 0.0;
                for i in 0..y.len() {
                    if m[i] + 0.5 * v[i] > crate::bym::ETA_LIMIT {
                        return Err(ModelError::Divergence { unit: i, eta: m[i] }.into());
                    }
                    let yi = y[i] as f64;
                    let lin = if y[i] == 0 {
                        0.0
                    } else {
                        yi * (offset[i].ln() + m[i])
                    };
                    ll += lin - offset[i] * (m[i] + 0.5 * v[i]).exp() - ln_factorial(yi);
                }
                acc += w * -2.0 * ll;
            }
            Ok(acc)
        }
        EtaPosterior::Draws(draws) => {
            let mut acc = 0.0;
            for d in draws {
                acc += deviance(d, offset, y)?;
            }
            Ok(acc / draws.len() as f64)
        }
    }
}

/// DIC with the deviance at the posterior mean of `η` as plug-in.
pub fn dic(fit: &FitResult, spec: &ModelSpec, y: &[u64]) -> Result<DicResult, SelectionError> {
    let dbar = mean_deviance(&fit.eta, &spec.offset, y)?;
    let d_hat = deviance(&fit.eta.mean(), &spec.offset, y)?;
    let p_d = dbar - d_hat;
    Ok(DicResult {
        dbar,
        d_hat,
        p_d,
        dic: dbar + p_d,
    })
}

/// Inference engine used for each screening fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitEngine {
    Laplace(GridConfig),
    Mcmc(McmcConfig),
}

impl FitEngine {
    pub fn fit(&self, model: &BymModel) -> Result<FitResult, InferenceError> {
        match self {
            FitEngine::Laplace(cfg) => laplace_fit(model, cfg),
            FitEngine::Mcmc(cfg) => mcmc_fit(model, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub covariate: String,
    /// 1-based principal component number.
    pub component: usize,
    pub dic: Option<f64>,
    /// 1-based rank within the component (None when the fit failed).
    pub rank: Option<usize>,
    /// Won its component and survived the collinearity check.
    pub retained: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub candidates: Vec<CandidateResult>,
    /// Winner per component, in component order.
    pub component_winners: Vec<(usize, String)>,
    /// Final retained set after deduplication and the collinearity check.
    pub retained: Vec<String>,
    /// Retained pairs that exceeded the collinearity threshold.
    pub collinear: Vec<CollinearPair>,
    /// Covariates dropped because of collinearity with a better-DIC one.
    pub dropped_collinear: Vec<String>,
    pub notes: Vec<String>,
}

impl ScreeningReport {
    /// `covariate,component,DIC,retained`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("covariate,component,DIC,retained\n");
        for c in &self.candidates {
            let dic = c
                .dic
                .map_or_else(|| "NA".to_string(), |d| format!("{d:.4}"));
            let _ = writeln!(
                out,
                "{},{},{},{}",
                c.covariate, c.component, dic, c.retained
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("Bivariate screening\n");
        for (comp, name) in &self.component_winners {
            let _ = writeln!(out, "component {comp}: {name}");
            let mut rows: Vec<&CandidateResult> = self
                .candidates
                .iter()
                .filter(|c| c.component == *comp)
                .collect();
            rows.sort_by_key(|c| c.rank.unwrap_or(usize::MAX));
            for c in rows {
                match (c.dic, &c.error) {
                    (Some(d), _) => {
                        let _ = writeln!(
                            out,
                            "  {:>3}. {:<24} DIC {:>12.3}",
                            c.rank.unwrap_or(0),
                            c.covariate,
                            d
                        );
                    }
                    (None, Some(e)) => {
                        let _ = writeln!(out, "   -  {:<24} failed: {e}", c.covariate);
                    }
                    _ => {}
                }
            }
        }
        let _ = writeln!(out, "retained: {}", self.retained.join(", "));
        for p in &self.collinear {
            let _ = writeln!(out, "collinear: {} ~ {} (r = {:.3})", p.a, p.b, p.r);
        }
        for d in &self.dropped_collinear {
            let _ = writeln!(out, "dropped for collinearity: {d}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Fits the model once per distinct candidate (intercept, offset and the
/// template's random effects plus that single covariate), ranks candidates
/// by DIC within each component and keeps the per-component minimum. Ties
/// go to the earlier column and are noted. The union of winners is then
/// checked for collinearity; of a collinear pair the one with the larger DIC
/// is dropped.
pub fn screen_bivariate(
    candidates: &[ComponentCandidates],
    matrix: &CovariateMatrix,
    template: &ModelSpec,
    structure: Option<&IcarStructure>,
    y: &[u64],
    engine: &FitEngine,
    collinearity_threshold: f64,
) -> Result<ScreeningReport, SelectionError> {
    if candidates.iter().all(|c| c.covariates.is_empty()) {
        return Err(SelectionError::Empty);
    }
    let mut distinct: Vec<usize> = Vec::new();
    for c in candidates {
        for &j in &c.covariates {
            if j >= matrix.n_columns() {
                return Err(SelectionError::UnknownColumn(j));
            }
            if !distinct.contains(&j) {
                distinct.push(j);
            }
        }
    }
    // scale once instead of once per fit
    let structure = match structure {
        Some(s) if template.include_spatial => Some(if s.scaling_factor().is_some() {
            s.clone()
        } else {
            s.clone().scaled()?
        }),
        _ => None,
    };
    let results: Vec<Result<f64, String>> = distinct
        .par_iter()
        .map(|&j| {
            let spec = ModelSpec::new(
                vec![matrix.names[j].clone()],
                vec![matrix.columns[j].clone()],
                template.offset.clone(),
                template.include_spatial,
                template.include_unstructured,
                template.priors,
            )
            .map_err(|e| e.to_string())?;
            let model =
                BymModel::new(spec.clone(), structure.clone(), y).map_err(|e| e.to_string())?;
            let fit = engine.fit(&model).map_err(|e| e.to_string())?;
            dic(&fit, &spec, y)
                .map(|d| d.dic)
                .map_err(|e| e.to_string())
        })
        .collect();
    let dic_of = |j: usize| -> &Result<f64, String> {
        &results[distinct.iter().position(|&d| d == j).expect("screened")]
    };
    if results.iter().all(Result::is_err) {
        let last = results
            .iter()
            .rev()
            .find_map(|r| r.as_ref().err())
            .cloned()
            .unwrap_or_default();
        return Err(SelectionError::AllFailed(last));
    }
    for (&j, r) in distinct.iter().zip(&results) {
        if let Err(e) = r {
            log::warn!("screening fit for {} failed: {e}", matrix.names[j]);
        }
    }

    let mut report = ScreeningReport {
        candidates: Vec::new(),
        component_winners: Vec::new(),
        retained: Vec::new(),
        collinear: Vec::new(),
        dropped_collinear: Vec::new(),
        notes: Vec::new(),
    };
    let mut winners: Vec<usize> = Vec::new();
    for c in candidates {
        let comp = c.component + 1;
        let mut ok: Vec<(usize, f64)> = c
            .covariates
            .iter()
            .filter_map(|&j| dic_of(j).as_ref().ok().map(|&d| (j, d)))
            .collect();
        ok.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if ok.len() > 1 && ok[0].1 == ok[1].1 {
            let note = format!(
                "component {comp}: DIC tie between {} and {}; kept the earlier column",
                matrix.names[ok[0].0], matrix.names[ok[1].0]
            );
            log::info!("{note}");
            report.notes.push(note);
        }
        let winner = ok.first().map(|w| w.0);
        for &j in &c.covariates {
            let r = dic_of(j);
            report.candidates.push(CandidateResult {
                covariate: matrix.names[j].clone(),
                component: comp,
                dic: r.as_ref().ok().copied(),
                rank: ok.iter().position(|w| w.0 == j).map(|p| p + 1),
                retained: Some(j) == winner,
                error: r.as_ref().err().cloned(),
            });
        }
        if let Some(w) = winner {
            report
                .component_winners
                .push((comp, matrix.names[w].clone()));
            if !winners.contains(&w) {
                winners.push(w);
            }
        }
    }

    // collinearity among retained covariates
    let retained_matrix = matrix.select(&winners);
    report.collinear = collinearity_check(&retained_matrix, collinearity_threshold);
    let mut dropped: BTreeSet<String> = BTreeSet::new();
    for p in &report.collinear {
        if dropped.contains(&p.a) || dropped.contains(&p.b) {
            continue;
        }
        let da = matrix
            .names
            .iter()
            .position(|n| *n == p.a)
            .and_then(|j| dic_of(j).as_ref().ok().copied());
        let db = matrix
            .names
            .iter()
            .position(|n| *n == p.b)
            .and_then(|j| dic_of(j).as_ref().ok().copied());
        let loser = if db.unwrap_or(f64::INFINITY) < da.unwrap_or(f64::INFINITY) {
            &p.a
        } else {
            &p.b
        };
        dropped.insert(loser.clone());
    }
    report.retained = winners
        .iter()
        .map(|&j| matrix.names[j].clone())
        .filter(|n| !dropped.contains(n))
        .collect();
    for c in &mut report.candidates {
        if dropped.contains(&c.covariate) {
            c.retained = false;
        }
    }
    report.dropped_collinear = dropped.into_iter().collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{Deviance, Engine, EtaPosterior};

    fn fit_with(eta: EtaPosterior) -> FitResult {
        FitResult {
            engine: Engine::Laplace,
            variant: crate::bym::Variant::Glm,
            fixed: vec![],
            fixed_rr: vec![],
            hyper: vec![],
            area: crate::inference::area_estimates(&eta),
            grid: vec![],
            deviance: Deviance {
                dbar: 0.0,
                d_hat: 0.0,
            },
            eta,
            diagnostics: vec![],
            converged: true,
        }
    }

    fn one_unit_spec() -> ModelSpec {
        ModelSpec::new(vec![], vec![], vec![2.0], false, false, Default::default()).unwrap()
    }

    #[test]
    fn point_mass_has_zero_effective_parameters() {
        let eta = EtaPosterior::Mixture {
            weights: vec![1.0],
            means: vec![vec![0.3]],
            vars: vec![vec![0.0]],
        };
        let d = dic(&fit_with(eta), &one_unit_spec(), &[3]).unwrap();
        assert!(d.p_d.abs() < 1e-12);
        assert!((d.dic - d.d_hat).abs() < 1e-12);
    }

    #[test]
    fn two_point_posterior_by_hand() {
        let (e, y) = (2.0f64, 3u64);
        let dev = |eta: f64| -2.0 * (3.0 * (e.ln() + eta) - e * eta.exp() - 6f64.ln());
        let eta = EtaPosterior::Draws(vec![vec![0.1], vec![0.7]]);
        let d = dic(&fit_with(eta), &one_unit_spec(), &[y]).unwrap();
        let dbar = 0.5 * (dev(0.1) + dev(0.7));
        assert!((d.dbar - dbar).abs() < 1e-12);
        assert!((d.d_hat - dev(0.4)).abs() < 1e-12);
        assert!((d.dic - (2.0 * dbar - dev(0.4))).abs() < 1e-12);
        assert!(d.p_d > 0.0);
    }

    #[test]
    fn empty_posterior_is_an_error() {
        let eta = EtaPosterior::Draws(vec![]);
        assert!(dic(&fit_with(eta), &one_unit_spec(), &[1]).is_err());
    }

    fn lattice(rows: usize, cols: usize) -> IcarStructure {
        use crate::geounits::{build_queen_adjacency, lattice_units, DEFAULT_SNAP_DEG};
        let units = lattice_units(rows, cols, [0.0, 0.0], 1.0);
        crate::bym::icar_precision(&build_queen_adjacency(&units, DEFAULT_SNAP_DEG).unwrap())
    }

    #[test]
    fn intercept_only_glm_has_one_effective_parameter() {
        let offset: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
        let y: Vec<u64> = offset.iter().map(|&e| (e * 1.1).round() as u64).collect();
        let spec =
            ModelSpec::new(vec![], vec![], offset, false, false, Default::default()).unwrap();
        let model = BymModel::new(spec.clone(), None, &y).unwrap();
        let fit = laplace_fit(&model, &GridConfig::default()).unwrap();
        let d = dic(&fit, &spec, &y).unwrap();
        assert!((d.p_d - 1.0).abs() < 0.5, "{d:?}");
    }

    #[test]
    fn laplace_and_mcmc_dic_agree_on_null_data() {
        let offset = vec![4.0, 6.0, 3.0, 8.0, 5.0, 7.0];
        let y = vec![4, 6, 3, 8, 5, 7];
        let spec =
            ModelSpec::new(vec![], vec![], offset, false, false, Default::default()).unwrap();
        let model = BymModel::new(spec.clone(), None, &y).unwrap();
        let a = dic(
            &laplace_fit(&model, &GridConfig::default()).unwrap(),
            &spec,
            &y,
        )
        .unwrap();
        let cfg = McmcConfig {
            chains: 2,
            burn_in: 1000,
            iterations: 5000,
            thin: 2,
            seed: 4,
        };
        let b = dic(&mcmc_fit(&model, &cfg).unwrap(), &spec, &y).unwrap();
        assert!((a.dic - b.dic).abs() < 1.0, "{a:?} {b:?}");
    }

    fn screening_fixture() -> (CovariateMatrix, ModelSpec, IcarStructure, Vec<u64>) {
        let n = 16;
        let a: Vec<f64> = (0..n).map(|i| ((i * 7 % 16) as f64 - 7.5) / 4.6).collect();
        let z: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.3).sin()).collect();
        let c: Vec<f64> = a.iter().zip(&z).map(|(p, q)| 0.95 * p + 0.05 * q).collect();
        let offset = vec![30.0; n];
        let y: Vec<u64> = a
            .iter()
            .map(|x| (30.0 * (0.4 * x).exp()).round() as u64)
            .collect();
        let ids = (0..n).map(|i| format!("u{i}")).collect();
        let m = CovariateMatrix::new(
            ids,
            vec!["a".into(), "noise".into(), "a_copy".into()],
            vec![a, z, c],
        )
        .unwrap();
        let template =
            ModelSpec::new(vec![], vec![], offset, true, true, Default::default()).unwrap();
        (m, template, lattice(4, 4), y)
    }

    fn cand(component: usize, covariates: Vec<usize>) -> ComponentCandidates {
        ComponentCandidates {
            component,
            eigenvalue: 1.5,
            loadings: vec![0.5; covariates.len()],
            covariates,
        }
    }

    #[test]
    fn screening_keeps_the_generating_covariate() {
        let (m, t, s, y) = screening_fixture();
        let engine = FitEngine::Laplace(GridConfig {
            points_per_axis: 5,
            ..GridConfig::default()
        });
        let r =
            screen_bivariate(&[cand(0, vec![0, 1])], &m, &t, Some(&s), &y, &engine, 0.7).unwrap();
        assert_eq!(r.retained, vec!["a".to_string()]);
        assert_eq!(r.candidates[0].rank, Some(1));
        let flipped =
            screen_bivariate(&[cand(0, vec![1, 0])], &m, &t, Some(&s), &y, &engine, 0.7).unwrap();
        assert_eq!(flipped.retained, r.retained);
        assert!(r.to_csv().starts_with("covariate,component,DIC,retained\n"));
    }

    #[test]
    fn collinear_winners_are_pruned_and_duplicates_screened_once() {
        let (m, t, s, y) = screening_fixture();
        let engine = FitEngine::Laplace(GridConfig {
            points_per_axis: 3,
            ..GridConfig::default()
        });
        let r = screen_bivariate(
            &[cand(0, vec![0]), cand(1, vec![2]), cand(2, vec![0])],
            &m,
            &t,
            Some(&s),
            &y,
            &engine,
            0.7,
        )
        .unwrap();
        assert_eq!(r.component_winners.len(), 3);
        assert_eq!(r.collinear.len(), 1);
        assert_eq!(r.retained.len(), 1);
        assert_eq!(r.dropped_collinear.len(), 1);
        assert!(r.to_text().contains("collinear"));
    }

    #[test]
    fn screening_with_every_fit_failing_is_an_error() {
        let (mut m, t, s, y) = screening_fixture();
        m.columns[1][0] = f64::NAN;
        let engine = FitEngine::Laplace(GridConfig::default());
        let r = screen_bivariate(&[cand(0, vec![1])], &m, &t, Some(&s), &y, &engine, 0.7);
        assert!(matches!(r, Err(SelectionError::AllFailed(_))));
        assert!(matches!(
            screen_bivariate(&[cand(0, vec![])], &m, &t, Some(&s), &y, &engine, 0.7),
            Err(SelectionError::Empty)
        ));
    }
}
