//! Envelope (profile) Cholesky factorization for sparse symmetric positive
//! definite matrices, with reverse Cuthill-McKee ordering and Takahashi
//! selected inversion.
//!
//! Latent Gaussian models in this crate have precision matrices whose graph is
//! the areal adjacency graph plus a handful of dense rows (the fixed effects).
//! Ordering the graph by RCM and putting the dense rows last keeps the profile
//! narrow, and the profile is closed under the Takahashi recursion, so every
//! entry of the inverse inside the envelope can be recovered at the cost of one
//! extra factorization.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("entry ({row}, {col}) lies outside the envelope")]
    OutsideEnvelope { row: usize, col: usize },
    #[error("permutation of length {got} does not match dimension {expected}")]
    BadPermutation { expected: usize, got: usize },
}

/// Reverse Cuthill-McKee ordering of an undirected graph given as adjacency
/// lists. Returns `perm` with `perm[new] = old`. Each connected component is
/// started from a pseudo-peripheral node; components are visited in order of
/// their smallest member.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adjacency, &degree, seed);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            order.push(node);
            let mut next: Vec<usize> = adjacency[node]
                .iter()
                .copied()
                .filter(|&j| !visited[j])
                .collect();
            next.sort_by_key(|&j| (degree[j], j));
            next.dedup();
            for j in next {
                if !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adjacency: &[Vec<usize>], start: usize) -> Vec<(usize, usize)> {
    // (node, level) in visitation order
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(start);
    queue.push_back((start, 0));
    while let Some((node, level)) = queue.pop_front() {
        out.push((node, level));
        for &j in &adjacency[node] {
            if seen.insert(j) {
                queue.push_back((j, level + 1));
            }
        }
    }
    out
}

fn pseudo_peripheral(adjacency: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut current = seed;
    let mut eccentricity = 0;
    for _ in 0..8 {
        let levels = bfs_levels(adjacency, current);
        let depth = levels.iter().map(|&(_, l)| l).max().unwrap_or(0);
        if depth <= eccentricity && current != seed {
            break;
        }
        eccentricity = depth;
        let candidate = levels
            .iter()
            .filter(|&&(_, l)| l == depth)
            .min_by_key(|&&(node, _)| (degree[node], node))
            .map(|&(node, _)| node)
            .unwrap_or(current);
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

/// Symbolic envelope structure: permutation plus the first nonzero column of
/// every (permuted) row of the lower triangle.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    col_pattern: Vec<Vec<usize>>,
}

impl Symbolic {
    /// `pattern[i]` lists the columns `j` with a structural nonzero `A[i][j]`
    /// (either triangle, original indexing). `perm[new] = old`.
    pub fn new(pattern: &[Vec<usize>], perm: Vec<usize>) -> Result<Arc<Self>, SparseError> {
        let n = pattern.len();
        if perm.len() != n {
            return Err(SparseError::BadPermutation {
                expected: n,
                got: perm.len(),
            });
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(SparseError::BadPermutation {
                    expected: n,
                    got: perm.len(),
                });
            }
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (i_old, cols) in pattern.iter().enumerate() {
            for &j_old in cols {
                let (a, b) = (inv[i_old], inv[j_old]);
                let (row, col) = if a >= b { (a, b) } else { (b, a) };
                if col < first[row] {
                    first[row] = col;
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);

        let mut col_pattern = vec![Vec::new(); n];
        for k in 0..n {
            for col in first[k]..k {
                col_pattern[col].push(k);
            }
        }
        Ok(Arc::new(Self {
            n,
            perm,
            inv,
            first,
            start,
            col_pattern,
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored lower-triangle entries.
    pub fn envelope_size(&self) -> usize {
        self.start[self.n]
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        // permuted indices, row >= col
        if col < self.first[row] {
            None
        } else {
            Some(self.start[row] + col - self.first[row])
        }
    }

    #[inline]
    fn permuted_slot(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.inv[i], self.inv[j]);
        if a >= b {
            self.slot(a, b)
        } else {
            self.slot(b, a)
        }
    }
}

/// A symmetric matrix stored in envelope form under a fixed symbolic
/// structure. Indices passed to the public methods are original (unpermuted).
#[derive(Debug, Clone)]
pub struct EnvelopeMatrix {
    sym: Arc<Symbolic>,
    vals: Vec<f64>,
}

impl EnvelopeMatrix {
    pub fn zeros(sym: &Arc<Symbolic>) -> Self {
        Self {
            sym: Arc::clone(sym),
            vals: vec![0.0; sym.envelope_size()],
        }
    }

    pub fn dim(&self) -> usize {
        self.sym.n
    }

    pub fn clear(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `value` to entry (i, j) (and implicitly (j, i)).
    pub fn add(&mut self, i: usize, j: usize, value: f64) -> Result<(), SparseError> {
        let slot = self
            .sym
            .permuted_slot(i, j)
            .ok_or(SparseError::OutsideEnvelope { row: i, col: j })?;
        self.vals[slot] += value;
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sym
            .permuted_slot(i, j)
            .map(|s| self.vals[s])
            .unwrap_or(0.0)
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.sym;
        let mut xp = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            xp[new] = x[old];
        }
        let mut yp = vec![0.0; s.n];
        for i in 0..s.n {
            let f = s.first[i];
            let row = &self.vals[s.start[i]..s.start[i + 1]];
            for (offset, &a) in row.iter().enumerate() {
                let j = f + offset;
                yp[i] += a * xp[j];
                if j != i {
                    yp[j] += a * xp[i];
                }
            }
        }
        let mut y = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            y[old] = yp[new];
        }
        y
    }

    /// Cholesky factorization `P A Pᵀ = L Lᵀ` within the envelope.
    pub fn cholesky(&self) -> Result<Cholesky, SparseError> {
        let s = &self.sym;
        let mut l = self.vals.clone();
        for i in 0..s.n {
            let fi = s.first[i];
            let si = s.start[i];
            for j in fi..i {
                let fj = s.first[j];
                let sj = s.start[j];
                let lo = fi.max(fj);
                let mut sum = l[si + j - fi];
                let a = &l[si + lo - fi..si + j - fi];
                let b = &l[sj + lo - fj..sj + j - fj];
                sum -= dot(a, b);
                let diag = l[sj + j - fj];
                l[si + j - fi] = sum / diag;
            }
            let row = &l[si..si + i - fi];
            let d = l[si + i - fi] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(SparseError::NotPositiveDefinite { pivot: i, value: d });
            }
            l[si + i - fi] = d.sqrt();
        }
        Ok(Cholesky {
            sym: Arc::clone(s),
            l,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower Cholesky factor in envelope storage.
#[derive(Debug, Clone)]
pub struct Cholesky {
    sym: Arc<Symbolic>,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.sym.n
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.l[self.sym.start[i + 1] - 1]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.sym.n).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &self.sym;
        let mut z: Vec<f64> = s.perm.iter().map(|&old| b[old]).collect();
        // forward: L z = b
        for i in 0..s.n {
            let fi = s.first[i];
            let row = &self.l[s.start[i]..s.start[i + 1] - 1];
            let acc = dot(row, &z[fi..i]);
            z[i] = (z[i] - acc) / self.diag(i);
        }
        // backward: Lᵀ x = z
        for i in (0..s.n).rev() {
            let fi = s.first[i];
            z[i] /= self.diag(i);
            let xi = z[i];
            let row = &self.l[s.start[i]..s.start[i + 1] - 1];
            for (offset, &lij) in row.iter().enumerate() {
                z[fi + offset] -= lij * xi;
            }
        }
        let mut x = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = z[new];
        }
        x
    }

    /// Maps standard normal `z` to a draw with covariance `A⁻¹`
    /// (`x = Pᵀ L⁻ᵀ z`).
    pub fn sample_from_standard(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.sym;
        let mut w = z.to_vec();
        for i in (0..s.n).rev() {
            let fi = s.first[i];
            w[i] /= self.diag(i);
            let xi = w[i];
            let row = &self.l[s.start[i]..s.start[i + 1] - 1];
            for (offset, &lij) in row.iter().enumerate() {
                w[fi + offset] -= lij * xi;
            }
        }
        let mut x = vec![0.0; s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = w[new];
        }
        x
    }

    /// Entries of `A⁻¹` on the envelope, via the Takahashi recursion.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let s = &self.sym;
        let mut sigma = vec![0.0; self.l.len()];
        let lookup = |sigma: &[f64], a: usize, b: usize| -> f64 {
            let (r, c) = if a >= b { (a, b) } else { (b, a) };
            sigma[s.start[r] + c - s.first[r]]
        };
        let mut col_vals = Vec::new();
        for i in (0..s.n).rev() {
            let lii = self.diag(i);
            let pattern = &s.col_pattern[i];
            col_vals.clear();
            col_vals.extend(pattern.iter().map(|&k| self.l[s.start[k] + i - s.first[k]]));
            // off-diagonal entries Σ_ji for j in pattern
            let mut offdiag = Vec::with_capacity(pattern.len());
            for &j in pattern {
                let mut acc = 0.0;
                for (&k, &lki) in pattern.iter().zip(col_vals.iter()) {
                    acc += lki * lookup(&sigma, k, j);
                }
                offdiag.push(-acc / lii);
            }
            for (&j, &v) in pattern.iter().zip(offdiag.iter()) {
                sigma[s.start[j] + i - s.first[j]] = v;
            }
            let mut acc = 0.0;
            for (&lki, &v) in col_vals.iter().zip(offdiag.iter()) {
                acc += lki * v;
            }
            sigma[s.start[i] + i - s.first[i]] = 1.0 / (lii * lii) - acc / lii;
        }
        SelectedInverse {
            sym: Arc::clone(s),
            vals: sigma,
        }
    }
}

/// Envelope entries of the inverse of a factored matrix.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    sym: Arc<Symbolic>,
    vals: Vec<f64>,
}

impl SelectedInverse {
    /// Entry (i, j) of the inverse, original indexing. Errors when the entry
    /// was not computed.
    pub fn get(&self, i: usize, j: usize) -> Result<f64, SparseError> {
        self.sym
            .permuted_slot(i, j)
            .map(|s| self.vals[s])
            .ok_or(SparseError::OutsideEnvelope { row: i, col: j })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.sym.n)
            .map(|i| self.get(i, i).expect("diagonal is always in the envelope"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> (Vec<Vec<usize>>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pattern = vec![Vec::new(); n];
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < 0.15 {
                    let v = rng.random_range(-1.0..1.0);
                    dense[(i, j)] = v;
                    dense[(j, i)] = v;
                    pattern[i].push(j);
                    pattern[j].push(i);
                }
            }
        }
        for i in 0..n {
            let rowsum: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| dense[(i, j)].abs())
                .sum();
            dense[(i, i)] = rowsum + 0.5 + rng.random::<f64>();
            pattern[i].push(i);
        }
        (pattern, dense)
    }

    fn assemble(pattern: &[Vec<usize>], dense: &DMatrix<f64>, perm: Vec<usize>) -> EnvelopeMatrix {
        let sym = Symbolic::new(pattern, perm).unwrap();
        let mut m = EnvelopeMatrix::zeros(&sym);
        for (i, cols) in pattern.iter().enumerate() {
            for &j in cols {
                if j <= i {
                    m.add(i, j, dense[(i, j)]).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn rcm_is_a_permutation() {
        let (pattern, _) = random_spd(40, 3);
        let mut perm = reverse_cuthill_mckee(&pattern);
        perm.sort_unstable();
        assert_eq!(perm, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn solve_logdet_and_inverse_match_dense() {
        for seed in 0..5 {
            let (pattern, dense) = random_spd(30, seed);
            let perm = reverse_cuthill_mckee(&pattern);
            let m = assemble(&pattern, &dense, perm);
            let chol = m.cholesky().unwrap();

            let dense_chol = dense.clone().cholesky().unwrap();
            let expected_logdet = 2.0
                * dense_chol
                    .l()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            assert!((chol.log_det() - expected_logdet).abs() < 1e-10);

            let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
            let x = chol.solve(&b);
            let expected = dense_chol.solve(&nalgebra::DVector::from_vec(b.clone()));
            for i in 0..30 {
                assert!((x[i] - expected[i]).abs() < 1e-10);
            }

            let inv = dense.clone().try_inverse().unwrap();
            let sel = chol.selected_inverse();
            for (i, cols) in pattern.iter().enumerate() {
                for &j in cols {
                    assert!((sel.get(i, j).unwrap() - inv[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn mul_vec_matches_dense() {
        let (pattern, dense) = random_spd(20, 11);
        let m = assemble(&pattern, &dense, (0..20).rev().collect());
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 - 1.0).collect();
        let y = m.mul_vec(&x);
        let expected = &dense * nalgebra::DVector::from_vec(x);
        for i in 0..20 {
            assert!((y[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let pattern = vec![vec![0, 1], vec![0, 1]];
        let sym = Symbolic::new(&pattern, vec![0, 1]).unwrap();
        let mut m = EnvelopeMatrix::zeros(&sym);
        m.add(0, 0, 1.0).unwrap();
        m.add(1, 0, 2.0).unwrap();
        m.add(1, 1, 1.0).unwrap();
        assert!(matches!(
            m.cholesky(),
            Err(SparseError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn bad_permutation_is_rejected() {
        let pattern = vec![vec![0], vec![1]];
        assert!(Symbolic::new(&pattern, vec![0, 0]).is_err());
        assert!(Symbolic::new(&pattern, vec![0]).is_err());
    }
}
