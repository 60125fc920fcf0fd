use nalgebra::DMatrix;

use super::ModelError;
use crate::geounits::{components_of, AdjacencyGraph};
use crate::sparse::{reverse_cuthill_mckee, Cholesky, EnvelopeMatrix, Symbolic};

/// Intrinsic CAR structure `Q = D − W` of an adjacency graph, its connected
/// components and (once computed) the variance scaling factor.
#[derive(Debug, Clone)]
pub struct IcarStructure {
    neighbors: Vec<Vec<usize>>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
    scaling_factor: Option<f64>,
    marginal_variances: Vec<f64>,
    log_pdet: f64,
}

/// Assembles `Q` from the graph. Scaling is left unset; see
/// [`compute_scaling_factor`] and [`IcarStructure::scaled`].
pub fn icar_precision(graph: &AdjacencyGraph) -> IcarStructure {
    let neighbors = graph.adjacency_lists().to_vec();
    let components = components_of(&neighbors);
    let mut component_of = vec![0; neighbors.len()];
    for (c, members) in components.iter().enumerate() {
        for &i in members {
            component_of[i] = c;
        }
    }
    IcarStructure {
        neighbors,
        components,
        component_of,
        scaling_factor: None,
        marginal_variances: Vec::new(),
        log_pdet: f64::NAN,
    }
}

impl IcarStructure {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn adjacency_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component_of[i]
    }

    /// Units whose component has a single member; their ICAR effect is 0.
    pub fn is_singleton(&self, i: usize) -> bool {
        self.components[self.component_of[i]].len() == 1
    }

    /// `Q_ij` as an exact integer.
    pub fn q_entry(&self, i: usize, j: usize) -> i64 {
        if i == j {
            self.neighbors[i].len() as i64
        } else if self.neighbors[i].contains(&j) {
            -1
        } else {
            0
        }
    }

    pub fn dense_q(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.q_entry(i, j) as f64)
    }

    /// `(Q u)_i`.
    pub fn q_row_dot(&self, i: usize, u: &[f64]) -> f64 {
        let nb = &self.neighbors[i];
        nb.len() as f64 * u[i] - nb.iter().map(|&j| u[j]).sum::<f64>()
    }

    /// `uᵀ Q u = Σ_{i~j} (u_i − u_j)²` over undirected edges.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                if j > i {
                    acc += (u[i] - u[j]).powi(2);
                }
            }
        }
        acc
    }

    /// Rank of `Q`: units minus components.
    pub fn rank(&self) -> usize {
        self.len() - self.components.len()
    }

    pub fn scaling_factor(&self) -> Option<f64> {
        self.scaling_factor
    }

    /// Diagonal of the constrained generalized inverse of `Q` (0 for
    /// singletons). Empty until scaled.
    pub fn marginal_variances(&self) -> &[f64] {
        &self.marginal_variances
    }

    /// Log of the product of the nonzero eigenvalues of `Q`. NaN until scaled.
    pub fn log_pdet(&self) -> f64 {
        self.log_pdet
    }

    /// Computes the scaling factor, marginal variances and pseudo-determinant.
    pub fn scaled(mut self) -> Result<Self, ModelError> {
        let grounded = self.grounded_factors()?;
        let mut marg = vec![0.0; self.len()];
        let mut log_pdet = 0.0;
        let mut sum_log = 0.0;
        let mut count = 0usize;
        for (members, g) in self.components.iter().zip(&grounded) {
            let Some(g) = g else { continue };
            let m = members.len() as f64;
            log_pdet += m.ln() + g.chol.log_det();
            let sel = g.chol.selected_inverse();
            let gdiag = sel.diagonal();
            let g1 = g.chol.solve(&vec![1.0; members.len() - 1]);
            let total: f64 = g1.iter().sum();
            for (k, &unit) in members.iter().enumerate() {
                let v = if k + 1 == members.len() {
                    total / (m * m)
                } else {
                    gdiag[k] - 2.0 / m * g1[k] + total / (m * m)
                };
                marg[unit] = v;
                sum_log += v.ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(ModelError::NoSpatialStructure);
        }
        self.scaling_factor = Some((sum_log / count as f64).exp());
        self.marginal_variances = marg;
        self.log_pdet = log_pdet;
        Ok(self)
    }

    /// Cholesky factors of the reduced Laplacian of every non-singleton
    /// component, grounded at its last member.
    fn grounded_factors(&self) -> Result<Vec<Option<Grounded>>, ModelError> {
        let mut out = Vec::with_capacity(self.components.len());
        for members in &self.components {
            if members.len() < 2 {
                out.push(None);
                continue;
            }
            let m = members.len() - 1;
            let mut local = vec![usize::MAX; self.len()];
            for (k, &unit) in members.iter().enumerate().take(m) {
                local[unit] = k;
            }
            let pattern: Vec<Vec<usize>> = members[..m]
                .iter()
                .map(|&unit| {
                    self.neighbors[unit]
                        .iter()
                        .filter_map(|&j| (local[j] != usize::MAX).then_some(local[j]))
                        .collect()
                })
                .collect();
            let sym = Symbolic::new(&pattern, reverse_cuthill_mckee(&pattern))?;
            let mut mat = EnvelopeMatrix::zeros(&sym);
            for (k, &unit) in members[..m].iter().enumerate() {
                mat.add(k, k, self.degree(unit) as f64)?;
                for &j in &pattern[k] {
                    if j < k {
                        mat.add(k, j, -1.0)?;
                    }
                }
            }
            out.push(Some(Grounded {
                chol: mat.cholesky()?,
            }));
        }
        Ok(out)
    }

    /// Draws `u ~ N(0, Q⁺)` restricted to the sum-to-zero subspace of every
    /// component, given a standard-normal source.
    pub fn sample(&self, mut standard_normal: impl FnMut() -> f64) -> Result<Vec<f64>, ModelError> {
        let mut u = vec![0.0; self.len()];
        let grounded = self.grounded_factors()?;
        for (members, g) in self.components.iter().zip(&grounded) {
            let Some(g) = g else { continue };
            let z: Vec<f64> = (0..members.len() - 1).map(|_| standard_normal()).collect();
            let x = g.chol.sample_from_standard(&z);
            let mean = x.iter().sum::<f64>() / members.len() as f64;
            for (k, &unit) in members.iter().enumerate() {
                let raw = if k + 1 == members.len() { 0.0 } else { x[k] };
                u[unit] = raw - mean;
            }
        }
        Ok(u)
    }

    /// Subtracts the per-component mean; singletons are set to 0.
    pub fn center(&self, u: &mut [f64]) {
        for members in &self.components {
            let mean = members.iter().map(|&i| u[i]).sum::<f64>() / members.len() as f64;
            for &i in members {
                u[i] -= mean;
            }
        }
    }

    /// Nonzero eigenvalues of `Q`, gathered component by component.
    pub fn nonzero_eigenvalues(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for members in &self.components {
            if members.len() < 2 {
                continue;
            }
            let m = members.len();
            let q = DMatrix::from_fn(m, m, |a, b| self.q_entry(members[a], members[b]) as f64);
            let mut ev: Vec<f64> = q.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(|a, b| a.total_cmp(b));
            out.extend_from_slice(&ev[1..]);
        }
        out
    }
}

struct Grounded {
    chol: Cholesky,
}

/// Geometric mean of the constrained marginal variances of `Q`.
pub fn compute_scaling_factor(structure: &IcarStructure) -> Result<f64, ModelError> {
    match structure.scaling_factor {
        Some(s) => Ok(s),
        None => structure
            .clone()
            .scaled()
            .map(|s| s.scaling_factor.expect("set by scaled")),
    }
}
