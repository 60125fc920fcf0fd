//! Area-level covariates: skewness-triggered transforms, z-scoring,
//! correlation PCA with Kaiser selection, and collinearity screening.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("column `{0}` needs at least two values")]
    TooShort(String),
    #[error("column `{column}`: non-finite value at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("PCA needs more units ({units}) than columns ({columns})")]
    TooFewUnits { units: usize, columns: usize },
    #[error("no covariate columns")]
    Empty,
    #[error("unreadable covariate table: {0}")]
    Csv(#[from] csv::Error),
    #[error("covariate table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    None,
    Sqrt,
    Log,
}

impl Transform {
    pub fn label(self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::Sqrt => "sqrt",
            Transform::Log => "log",
        }
    }
}

/// When to transform a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformPolicy {
    /// Transform when |sample skewness| exceeds this.
    pub skew_threshold: f64,
}

impl Default for TransformPolicy {
    fn default() -> Self {
        Self {
            skew_threshold: 1.0,
        }
    }
}

/// Moment skewness g1 = m3 / m2^{3/2}.
pub fn skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = stats::mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Log when all values are positive, sqrt when non-negative with zeros,
/// otherwise untouched (with a warning), and only when the column is skewed
/// beyond the policy threshold.
pub fn apply_transform(column: &[f64], policy: &TransformPolicy) -> (Vec<f64>, Transform) {
    if column.len() < 3 || skewness(column).abs() <= policy.skew_threshold {
        return (column.to_vec(), Transform::None);
    }
    if column.iter().all(|&v| v > 0.0) {
        (column.iter().map(|v| v.ln()).collect(), Transform::Log)
    } else if column.iter().all(|&v| v >= 0.0) {
        (column.iter().map(|v| v.sqrt()).collect(), Transform::Sqrt)
    } else {
        warn!("skewed column has negative values; left untransformed");
        (column.to_vec(), Transform::None)
    }
}

/// z-scores with the sample sd (divisor n − 1). Returns (z, mean, sd).
pub fn standardize(name: &str, column: &[f64]) -> Result<(Vec<f64>, f64, f64), CovariateError> {
    if column.len() < 2 {
        return Err(CovariateError::TooShort(name.into()));
    }
    let mean = stats::mean(column);
    let sd = stats::sample_var(column).sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(CovariateError::ZeroVariance(name.into()));
    }
    Ok((column.iter().map(|v| (v - mean) / sd).collect(), mean, sd))
}

/// Unit-aligned covariate columns with their transform and scaling history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub unit_ids: Vec<String>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub transforms: Vec<Transform>,
    /// (mean, sd) used for standardization, when applied
    pub scaling: Vec<Option<(f64, f64)>>,
}

impl CovariateMatrix {
    pub fn new(
        unit_ids: Vec<String>,
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
    ) -> Result<Self, CovariateError> {
        if names.is_empty() {
            return Err(CovariateError::Empty);
        }
        if names.len() != columns.len() {
            return Err(CovariateError::Table(
                "names and columns differ in length".into(),
            ));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != unit_ids.len() {
                return Err(CovariateError::Table(format!(
                    "column `{name}` has wrong length"
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(CovariateError::NonFinite {
                    column: name.clone(),
                    row,
                });
            }
        }
        let p = names.len();
        Ok(Self {
            unit_ids,
            names,
            columns,
            transforms: vec![Transform::None; p],
            scaling: vec![None; p],
        })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_columns(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Applies [`apply_transform`] column by column.
    pub fn transformed(&self, policy: &TransformPolicy) -> Self {
        let mut out = self.clone();
        for (k, col) in self.columns.iter().enumerate() {
            let (t, tag) = apply_transform(col, policy);
            out.columns[k] = t;
            out.transforms[k] = tag;
        }
        out
    }

    pub fn standardized(&self) -> Result<Self, CovariateError> {
        let mut out = self.clone();
        for (k, col) in self.columns.iter().enumerate() {
            let (z, m, s) = standardize(&self.names[k], col)?;
            out.columns[k] = z;
            out.scaling[k] = Some((m, s));
        }
        Ok(out)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            unit_ids: self.unit_ids.clone(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            columns: indices.iter().map(|&i| self.columns[i].clone()).collect(),
            transforms: indices.iter().map(|&i| self.transforms[i]).collect(),
            scaling: indices.iter().map(|&i| self.scaling[i]).collect(),
        }
    }

    /// Sample correlation matrix.
    pub fn correlation(&self) -> DMatrix<f64> {
        let p = self.n_columns();
        DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                1.0
            } else {
                stats::pearson(&self.columns[i], &self.columns[j])
            }
        })
    }

    /// CSV with a unit_id column then one column per covariate.
    pub fn to_csv(&self) -> String {
        let mut out = format!("unit_id,{}\n", self.names.join(","));
        for (i, id) in self.unit_ids.iter().enumerate() {
            out.push_str(id);
            for col in &self.columns {
                let _ = write!(out, ",{:.12}", col[i]);
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a covariate CSV keyed by `id_column`. All other columns except
/// `weight_column` must be numeric. Returns the matrix and the weights
/// (1.0 when no weight column is present).
pub fn read_covariate_csv(
    text: &str,
    id_column: &str,
    weight_column: Option<&str>,
) -> Result<(CovariateMatrix, Vec<f64>), CovariateError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let id_idx = headers
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| CovariateError::Table(format!("missing id column `{id_column}`")))?;
    let w_idx = weight_column.and_then(|w| headers.iter().position(|h| h == w));
    if let (Some(w), None) = (weight_column, w_idx) {
        return Err(CovariateError::Table(format!(
            "missing weight column `{w}`"
        )));
    }
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != id_idx && Some(c) != w_idx)
        .collect();
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    let mut columns = vec![Vec::new(); value_cols.len()];
    for (row_no, row) in reader.records().enumerate() {
        let row = row?;
        ids.push(row.get(id_idx).unwrap_or("").to_string());
        let parse = |c: usize| -> Result<f64, CovariateError> {
            row.get(c)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CovariateError::NonFinite {
                    column: headers[c].to_string(),
                    row: row_no + 1,
                })
        };
        weights.push(match w_idx {
            Some(c) => parse(c)?,
            None => 1.0,
        });
        for (k, &c) in value_cols.iter().enumerate() {
            columns[k].push(parse(c)?);
        }
    }
    let names = value_cols.iter().map(|&c| headers[c].to_string()).collect();
    Ok((CovariateMatrix::new(ids, names, columns)?, weights))
}

/// Recombines covariates for merged units as weighted means over members,
/// in the order of `survivors`. `lookup` maps original id → surviving id.
pub fn recombine(
    matrix: &CovariateMatrix,
    weights: &[f64],
    lookup: &BTreeMap<&str, &str>,
    survivors: &[String],
) -> Result<CovariateMatrix, CovariateError> {
    let index: BTreeMap<&str, usize> = survivors
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let p = matrix.n_columns();
    let mut sums = vec![vec![0.0; survivors.len()]; p];
    let mut wsum = vec![0.0; survivors.len()];
    for (row, id) in matrix.unit_ids.iter().enumerate() {
        let to = lookup.get(id.as_str()).copied().unwrap_or(id.as_str());
        let Some(&k) = index.get(to) else { continue };
        let w = weights[row];
        wsum[k] += w;
        for c in 0..p {
            sums[c][k] += w * matrix.columns[c][row];
        }
    }
    if let Some(k) = wsum.iter().position(|&w| !(w > 0.0)) {
        return Err(CovariateError::Table(format!(
            "no covariate rows (or zero weight) for unit `{}`",
            survivors[k]
        )));
    }
    let columns = sums
        .into_iter()
        .map(|col| col.iter().zip(&wsum).map(|(s, w)| s / w).collect())
        .collect();
    CovariateMatrix::new(survivors.to_vec(), matrix.names.clone(), columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub names: Vec<String>,
    /// descending
    pub eigenvalues: Vec<f64>,
    /// `loadings[c][j]`: weight of variable j in component c (unit norm)
    pub loadings: Vec<Vec<f64>>,
    /// components with eigenvalue strictly above one
    pub retained: Vec<usize>,
    pub rank_deficient: bool,
}

/// Eigen-decomposition of the sample correlation matrix. The sign of each
/// eigenvector is fixed so that its largest-magnitude loading is positive.
pub fn pca(matrix: &CovariateMatrix) -> Result<PcaResult, CovariateError> {
    let (n, p) = (matrix.n_units(), matrix.n_columns());
    if p == 0 {
        return Err(CovariateError::Empty);
    }
    if n <= p {
        return Err(CovariateError::TooFewUnits {
            units: n,
            columns: p,
        });
    }
    let corr = matrix.correlation();
    let eig = corr.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let loadings: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(_, &x)| x)
                .unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    let rank_deficient = eigenvalues.iter().any(|&l| l < 1e-8 * p as f64);
    if rank_deficient {
        warn!("correlation matrix is rank deficient");
    }
    let retained = (0..p).filter(|&k| eigenvalues[k] > 1.0).collect();
    Ok(PcaResult {
        names: matrix.names.clone(),
        eigenvalues,
        loadings,
        retained,
        rank_deficient,
    })
}

/// Candidate covariates drawn from one retained component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCandidates {
    pub component: usize,
    pub eigenvalue: f64,
    /// column indices, largest |loading| first
    pub covariates: Vec<usize>,
    pub loadings: Vec<f64>,
}

/// For every retained component, the `k` columns with the largest absolute
/// loading (ties by column order). Lists may overlap across components.
pub fn kaiser_select(result: &PcaResult, k: usize) -> Vec<ComponentCandidates> {
    if result.retained.is_empty() {
        warn!("no principal component has eigenvalue above one");
    }
    result
        .retained
        .iter()
        .map(|&c| {
            let load = &result.loadings[c];
            let mut idx: Vec<usize> = (0..load.len()).collect();
            idx.sort_by(|&a, &b| load[b].abs().total_cmp(&load[a].abs()).then(a.cmp(&b)));
            idx.truncate(k);
            ComponentCandidates {
                component: c,
                eigenvalue: result.eigenvalues[c],
                loadings: idx.iter().map(|&j| load[j]).collect(),
                covariates: idx,
            }
        })
        .collect()
}

pub fn screening_candidates_csv(result: &PcaResult, candidates: &[ComponentCandidates]) -> String {
    let mut out = String::from("component,eigenvalue,covariate,loading\n");
    for c in candidates {
        for (&j, &l) in c.covariates.iter().zip(&c.loadings) {
            let _ = writeln!(
                out,
                "{},{:.10},{},{:.10}",
                c.component + 1,
                c.eigenvalue,
                result.names[j],
                l
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollinearPair {
    pub a: String,
    pub b: String,
    pub r: f64,
}

/// Pairs with |Pearson r| ≥ `threshold`.
pub fn collinearity_check(matrix: &CovariateMatrix, threshold: f64) -> Vec<CollinearPair> {
    let p = matrix.n_columns();
    let mut out = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let r = stats::pearson(&matrix.columns[i], &matrix.columns[j]);
            if r.abs() >= threshold {
                out.push(CollinearPair {
                    a: matrix.names[i].clone(),
                    b: matrix.names[j].clone(),
                    r,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(cols: Vec<Vec<f64>>) -> CovariateMatrix {
        let n = cols[0].len();
        let names = (0..cols.len()).map(|i| format!("x{i}")).collect();
        CovariateMatrix::new((0..n).map(|i| i.to_string()).collect(), names, cols).unwrap()
    }

    #[test]
    fn transform_examples() {
        let policy = TransformPolicy::default();
        let (out, tag) = apply_transform(&[3.0; 6], &policy);
        assert_eq!(tag, Transform::None);
        assert_eq!(out, vec![3.0; 6]);

        let (out, tag) = apply_transform(&[1.0, 10.0, 100.0, 1000.0], &policy);
        assert_eq!(tag, Transform::Log);
        let ln10 = std::f64::consts::LN_10;
        let expected = [0.0, ln10, 2.0 * ln10, 3.0 * ln10];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }

        let (_, tag) = apply_transform(&[0.0, 0.0, 0.0, 1.0, 100.0], &policy);
        assert_eq!(tag, Transform::Sqrt);
        let (_, tag) = apply_transform(&[-1.0, 0.0, 0.0, 1.0, 100.0], &policy);
        assert_eq!(tag, Transform::None);
    }

    #[test]
    fn skewness_direct_formula() {
        // m2 and m3 by hand for {1, 10, 100, 1000}
        let x = [1.0, 10.0, 100.0, 1000.0];
        let m = 277.75;
        let m2: f64 = x.iter().map(|v: &f64| (v - m).powi(2)).sum::<f64>() / 4.0;
        let m3: f64 = x.iter().map(|v: &f64| (v - m).powi(3)).sum::<f64>() / 4.0;
        assert!((skewness(&x) - m3 / m2.powf(1.5)).abs() < 1e-12);
        assert!(skewness(&x) > 1.0);
    }

    #[test]
    fn standardize_examples() {
        let (z, m, s) = standardize("a", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(z, vec![-1.0, 0.0, 1.0]);
        let (z, _, _) = standardize("b", &[10.0, 20.0]).unwrap();
        assert!((z[0] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((z[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(
            matches!(standardize("c", &[4.0; 5]), Err(CovariateError::ZeroVariance(n)) if n == "c")
        );
    }

    #[test]
    fn perfectly_correlated_columns() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 1.0).collect();
        let r = pca(&matrix(vec![a, b]).standardized().unwrap()).unwrap();
        assert!((r.eigenvalues[0] - 2.0).abs() < 1e-10);
        assert!(r.eigenvalues[1].abs() < 1e-10);
        assert!(r.rank_deficient);
        assert_eq!(r.retained, vec![0]);
    }

    #[test]
    fn uncorrelated_columns_retain_nothing() {
        // orthogonal ±1 patterns: correlation matrix is exactly the identity
        let n = 16;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..n)
                    .map(|i| if (i >> k) & 1 == 0 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let r = pca(&matrix(cols).standardized().unwrap()).unwrap();
        for l in &r.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(r.retained.is_empty());
        assert!(kaiser_select(&r, 4).is_empty());
    }

    #[test]
    fn single_component_takes_all_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                base.iter()
                    .map(|b| b + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let r = pca(&matrix(cols).standardized().unwrap()).unwrap();
        let sel = kaiser_select(&r, 4);
        assert_eq!(sel.len(), 1);
        let mut got = sel[0].covariates.clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..50).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = pca(&matrix(cols).standardized().unwrap()).unwrap();
        for v in &r.loadings {
            let pivot = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap();
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn collinearity_examples() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let m = matrix(vec![a.clone(), a.clone(), neg]);
        let flags = collinearity_check(&m, 0.7);
        assert_eq!(flags.len(), 3);
        assert!((flags[0].r - 1.0).abs() < 1e-12);
        assert!((flags[1].r + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert!(collinearity_check(&matrix(cols), 0.7).is_empty());
    }

    #[test]
    fn recombine_uses_weighted_means() {
        let m = CovariateMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into()],
            vec![vec![1.0, 4.0, 10.0]],
        )
        .unwrap();
        let lookup: BTreeMap<&str, &str> =
            [("a", "a"), ("b", "a"), ("c", "c")].into_iter().collect();
        let out = recombine(&m, &[1.0, 3.0, 1.0], &lookup, &["a".into(), "c".into()]).unwrap();
        assert_eq!(out.columns[0], vec![(1.0 + 12.0) / 4.0, 10.0]);
    }

    #[test]
    fn csv_reader() {
        let text = "unit_id,population,income,rate\nu1,100,1000,0.5\nu2,50,2000,0.25\n";
        let (m, w) = read_covariate_csv(text, "unit_id", Some("population")).unwrap();
        assert_eq!(m.names, vec!["income", "rate"]);
        assert_eq!(w, vec![100.0, 50.0]);
        assert!(read_covariate_csv("unit_id,x\nu1,abc\n", "unit_id", None).is_err());
    }

    proptest! {
        #[test]
        fn transform_preserves_order(values in proptest::collection::vec(0.0f64..1e4, 3..40)) {
            let (out, _) = apply_transform(&values, &TransformPolicy::default());
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }

        #[test]
        fn standardize_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 3..40)) {
            prop_assume!(stats::sample_var(&values) > 1e-6);
            let (z, _, _) = standardize("x", &values).unwrap();
            let (zz, m, s) = standardize("x", &z).unwrap();
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((s - 1.0).abs() <= 1e-10);
            for (a, b) in z.iter().zip(&zz) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn pca_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..30).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let mut scaled = cols.clone();
            scaled[1].iter_mut().for_each(|v| *v *= scale);
            let a = pca(&matrix(cols).standardized().unwrap()).unwrap();
            let b = pca(&matrix(scaled).standardized().unwrap()).unwrap();
            for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let sa: Vec<Vec<usize>> = kaiser_select(&a, 2).into_iter().map(|c| c.covariates).collect();
            let sb: Vec<Vec<usize>> = kaiser_select(&b, 2).into_iter().map(|c| c.covariates).collect();
            prop_assert_eq!(sa, sb);
        }
    }
}
