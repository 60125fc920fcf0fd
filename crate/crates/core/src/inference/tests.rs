use super::*;
use crate::bym::{icar_precision, BymModel, Hyperparams, ModelSpec, PriorSettings, TruthSpec};
use crate::geounits::{build_queen_adjacency, lattice_units, DEFAULT_SNAP_DEG};
use nalgebra::{DMatrix, DVector};

fn lattice(rows: usize, cols: usize) -> crate::bym::IcarStructure {
    let units = lattice_units(rows, cols, [0.0, 0.0], 1.0);
    icar_precision(&build_queen_adjacency(&units, DEFAULT_SNAP_DEG).unwrap())
}

fn spec(design: Vec<Vec<f64>>, offset: Vec<f64>, spatial: bool, iid: bool) -> ModelSpec {
    let names = (0..design.len()).map(|j| format!("x{j}")).collect();
    ModelSpec::new(
        names,
        design,
        offset,
        spatial,
        iid,
        PriorSettings::default(),
    )
    .unwrap()
}

fn small_grid() -> GridConfig {
    GridConfig {
        points_per_axis: 5,
        ..GridConfig::default()
    }
}

#[test]
fn intercept_only_recovers_log_ratio() {
    let offset = vec![2.0, 3.0, 1.0, 4.0];
    let y = vec![5, 6, 1, 8];
    let model = BymModel::new(spec(vec![], offset, false, false), None, &y).unwrap();
    let fit = laplace_fit(&model, &GridConfig::default()).unwrap();
    let b0 = fit.fixed_by_name("intercept").unwrap().mean;
    assert!((b0 - 2f64.ln()).abs() < 1e-3, "{b0}");
    assert_eq!(fit.grid.len(), 1);
    assert_eq!(fit.grid[0].weight, 1.0);
}

#[test]
fn observed_equal_expected_gives_zero_intercept() {
    let offset = vec![3.0, 5.0, 7.0, 2.0, 4.0, 9.0];
    let y = vec![3, 5, 7, 2, 4, 9];
    let sp = spec(vec![], offset, true, true);
    let model = BymModel::new(sp, Some(lattice(2, 3)), &y).unwrap();
    let fit = laplace_fit(&model, &small_grid()).unwrap();
    assert!(fit.fixed_by_name("intercept").unwrap().mean.abs() < 0.05);
}

#[test]
fn grid_weights_sum_to_one() {
    let offset = vec![3.0, 5.0, 7.0, 2.0, 4.0, 9.0];
    let y = vec![1, 9, 4, 2, 8, 10];
    let model = BymModel::new(spec(vec![], offset, true, true), Some(lattice(2, 3)), &y).unwrap();
    let fit = laplace_fit(&model, &small_grid()).unwrap();
    let total: f64 = fit.grid.iter().map(|g| g.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(fit.grid.iter().all(|g| g.weight >= 0.0));
    assert_eq!(fit.grid.len(), 25);
}

#[test]
fn single_point_grid_has_unit_weight() {
    let offset = vec![3.0, 5.0, 7.0, 2.0];
    let y = vec![1, 9, 4, 2];
    let model = BymModel::new(spec(vec![], offset, false, true), None, &y).unwrap();
    let cfg = GridConfig {
        points_per_axis: 1,
        ..GridConfig::default()
    };
    let fit = laplace_fit(&model, &cfg).unwrap();
    assert_eq!(fit.grid.len(), 1);
    assert_eq!(fit.grid[0].weight, 1.0);
}

/// Independent objective for a 2×5 BYM2 model with the last `u` eliminated
/// by the sum-to-zero constraint. Free coordinates: `β0, β1, v (10), u (9)`.
struct Oracle {
    x: Vec<f64>,
    e: Vec<f64>,
    y: Vec<f64>,
    q: DMatrix<f64>,
    cv: f64,
    cu: f64,
    prec: f64,
}

impl Oracle {
    fn unpack(&self, z: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let n = self.y.len();
        let v = z[2..2 + n].to_vec();
        let mut u = z[2 + n..].to_vec();
        u.push(-u.iter().sum::<f64>());
        (z[0], z[1], v, u)
    }

    fn value(&self, z: &[f64]) -> f64 {
        let (b0, b1, v, u) = self.unpack(z);
        let uu = DVector::from_vec(u.clone());
        let mut f = -0.5 * self.prec * (b0 * b0 + b1 * b1)
            - 0.5 * v.iter().map(|a| a * a).sum::<f64>()
            - 0.5 * (uu.transpose() * &self.q * &uu)[(0, 0)];
        for i in 0..self.y.len() {
            let eta = b0 + b1 * self.x[i] + self.cv * v[i] + self.cu * u[i];
            f += self.y[i] * eta - self.e[i] * eta.exp();
        }
        f
    }

    fn grad(&self, z: &[f64]) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(z.len(), |k, _| {
            let mut a = z.to_vec();
            let mut b = z.to_vec();
            a[k] += h;
            b[k] -= h;
            (self.value(&a) - self.value(&b)) / (2.0 * h)
        })
    }

    /// Newton ascent with finite-difference derivatives.
    fn maximize(&self, dim: usize) -> Vec<f64> {
        let mut z = vec![0.0; dim];
        for _ in 0..100 {
            let g = self.grad(&z);
            if g.norm() < 1e-9 {
                break;
            }
            let h = 1e-4;
            let mut hess = DMatrix::zeros(dim, dim);
            for k in 0..dim {
                let mut a = z.clone();
                let mut b = z.clone();
                a[k] += h;
                b[k] -= h;
                let col = (self.grad(&a) - self.grad(&b)) / (2.0 * h);
                hess.set_column(k, &col);
            }
            let hess = (&hess + hess.transpose()) * -0.5;
            let step = hess.cholesky().unwrap().solve(&g);
            let mut t = 1.0;
            let f0 = self.value(&z);
            loop {
                let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                if self.value(&cand) >= f0 - 1e-12 || t < 1e-6 {
                    z = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        z
    }
}

#[test]
fn latent_mode_matches_independent_newton_oracle() {
    let (rows, cols) = (2, 5);
    let n = rows * cols;
    let x: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin()).collect();
    let e: Vec<f64> = (0..n).map(|i| 2.0 + (i % 4) as f64 * 1.5).collect();
    let y: Vec<u64> = vec![3, 0, 7, 5, 2, 9, 4, 1, 6, 8];
    let model = BymModel::new(
        spec(vec![x.clone()], e.clone(), true, true),
        Some(lattice(rows, cols)),
        &y,
    )
    .unwrap();
    let h = Hyperparams::new(4.0, 0.6).unwrap();

    // dense queen Q from grid coordinates
    let mut q = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let (ra, ca) = ((a / cols) as i64, (a % cols) as i64);
            let (rb, cb) = ((b / cols) as i64, (b % cols) as i64);
            if a != b && (ra - rb).abs() <= 1 && (ca - cb).abs() <= 1 {
                q[(a, b)] = -1.0;
                q[(a, a)] += 1.0;
            }
        }
    }
    let s = model.scaling();
    let oracle = Oracle {
        x,
        e,
        y: y.iter().map(|&k| k as f64).collect(),
        q,
        cv: (0.4f64 / 4.0).sqrt(),
        cu: (0.6 / (4.0 * s)).sqrt(),
        prec: PriorSettings::default().fixed_precision,
    };
    let z = oracle.maximize(2 + n + n - 1);
    let (b0, b1, v, u) = oracle.unpack(&z);

    let mode = find_mode(&model, &h, &GridConfig::default(), None).unwrap();
    let st = model.layout().unpack(&mode.x);
    assert!((st.beta0 - b0).abs() < 1e-6, "{} vs {b0}", st.beta0);
    assert!((st.beta[0] - b1).abs() < 1e-6);
    for i in 0..n {
        assert!((st.v[i] - v[i]).abs() < 1e-6);
        assert!((st.u[i] - u[i]).abs() < 1e-6);
    }
}

#[test]
fn rescaling_offsets_shifts_only_the_intercept() {
    let offset = vec![3.0, 5.0, 7.0, 2.0, 4.0, 9.0];
    let y = vec![1, 9, 4, 2, 8, 10];
    let x = vec![vec![-1.0, 0.5, 0.2, -0.3, 1.1, -0.5]];
    let base = spec(x, offset, true, true);
    let scaled = base.with_scaled_offset(3.0);
    let cfg = small_grid();
    let f1 = laplace_fit(&BymModel::new(base, Some(lattice(2, 3)), &y).unwrap(), &cfg).unwrap();
    let f2 = laplace_fit(
        &BymModel::new(scaled, Some(lattice(2, 3)), &y).unwrap(),
        &cfg,
    )
    .unwrap();
    let d0 = f1.fixed[0].mean - f2.fixed[0].mean;
    assert!((d0 - 3f64.ln()).abs() < 1e-3, "{d0}");
    assert!((f1.fixed[1].mean - f2.fixed[1].mean).abs() < 1e-3);
    for i in 0..6 {
        assert!((f1.area.rr[i] / f2.area.rr[i] - 3.0).abs() < 3e-3 * 3.0);
    }
}

#[test]
fn laplace_fit_is_deterministic() {
    let offset = vec![3.0, 5.0, 7.0, 2.0, 4.0, 9.0, 1.0, 2.0, 6.0];
    let y = vec![1, 9, 4, 2, 8, 10, 0, 3, 5];
    let make = || {
        BymModel::new(
            spec(vec![], offset.clone(), true, true),
            Some(lattice(3, 3)),
            &y,
        )
        .unwrap()
    };
    let a = serde_json::to_vec(&laplace_fit(&make(), &small_grid()).unwrap()).unwrap();
    let b = serde_json::to_vec(&laplace_fit(&make(), &small_grid()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn relative_risk_of_gaussian_log_effect() {
    let (s, r) = mixture_summary("x", &[1.0], &[0.0], &[0.04]);
    assert!((r.rr - 1.0202).abs() < 1e-4);
    assert!((s.q025 + 1.96 * 0.2).abs() < 1e-3);
    let (_, r) = mixture_summary("x", &[1.0], &[2f64.ln()], &[0.0]);
    assert!((r.rr - 2.0).abs() < 1e-12);
    assert!((r.lo - 2.0).abs() < 1e-12 && (r.hi - 2.0).abs() < 1e-12);
}

#[test]
fn area_estimates_from_draws() {
    let eta = EtaPosterior::Draws(vec![vec![0.0], vec![1.0], vec![-1.0], vec![0.5]]);
    let a = area_estimates(&eta);
    let rr = (1.0 + 1f64.exp() + (-1f64).exp() + 0.5f64.exp()) / 4.0;
    assert!((a.rr[0] - rr).abs() < 1e-12);
    assert!((a.exceedance[0] - 0.5).abs() < 1e-12);
}

#[test]
fn smoothing_shrinks_extreme_ratios() {
    let units = 16;
    let offset = vec![1.5; units];
    let mut y = vec![2u64; units];
    y[5] = 9;
    y[10] = 0;
    let model = BymModel::new(
        spec(vec![], offset.clone(), true, true),
        Some(lattice(4, 4)),
        &y,
    )
    .unwrap();
    let fit = laplace_fit(&model, &small_grid()).unwrap();
    let global = y.iter().sum::<u64>() as f64 / (1.5 * units as f64);
    let smr_hi = 9.0 / 1.5;
    assert!(fit.area.rr[5] < smr_hi && fit.area.rr[5] > global);
    assert!(fit.area.rr[10] > 0.0 && fit.area.rr[10] < global);
    assert!(fit.area.exceedance[5] > fit.area.exceedance[10]);
}

#[test]
fn laplace_recovers_simulated_coefficient() {
    let (rows, cols) = (8, 8);
    let n = rows * cols;
    let icar = lattice(rows, cols).scaled().unwrap();
    let x: Vec<f64> = (0..n)
        .map(|i| ((i * 37 % 64) as f64 / 63.0 - 0.5) * 3.0)
        .collect();
    let offset: Vec<f64> = (0..n).map(|i| 20.0 + (i % 7) as f64 * 5.0).collect();
    let sp = spec(vec![x], offset, true, true);
    let truth = TruthSpec {
        beta0: 0.1,
        beta: vec![0.3],
        hyper: Hyperparams::new(25.0, 0.5).unwrap(),
    };
    let sim = crate::bym::simulate_counts(&sp, Some(&icar), &truth, 11).unwrap();
    let model = BymModel::new(sp, Some(icar), &sim.y).unwrap();
    let fit = laplace_fit(&model, &small_grid()).unwrap();
    let b = fit.fixed_by_name("x0").unwrap();
    assert!(b.q025 < 0.3 && 0.3 < b.q975, "{b:?}");
}

fn quick_mcmc(seed: u64) -> McmcConfig {
    McmcConfig {
        chains: 2,
        burn_in: 500,
        iterations: 1500,
        thin: 5,
        seed,
    }
}

#[test]
fn mcmc_single_unit_intercept() {
    let model = BymModel::new(spec(vec![], vec![10.0], false, false), None, &[20]).unwrap();
    let fit = mcmc_fit(&model, &quick_mcmc(3)).unwrap();
    let b0 = fit.fixed_by_name("intercept").unwrap();
    // posterior is close to N(ln 2, 1/20)
    assert!((b0.mean - 2f64.ln()).abs() < 0.05, "{b0:?}");
    assert!((b0.sd - (1.0f64 / 20.0).sqrt()).abs() < 0.05);
    assert!(fit.diagnostics.iter().all(|d| d.rhat.is_finite()));
}

#[test]
fn mcmc_is_deterministic_for_a_seed() {
    let offset = vec![3.0, 5.0, 7.0, 2.0];
    let y = vec![1, 9, 4, 2];
    let model = BymModel::new(spec(vec![], offset, true, true), Some(lattice(2, 2)), &y).unwrap();
    let a = serde_json::to_vec(&mcmc_fit(&model, &quick_mcmc(5)).unwrap()).unwrap();
    let b = serde_json::to_vec(&mcmc_fit(&model, &quick_mcmc(5)).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mcmc_agrees_with_laplace_on_small_problem() {
    let offset = vec![3.0, 5.0, 7.0, 2.0, 4.0, 9.0, 1.0, 2.0, 6.0];
    let y = vec![1, 9, 4, 2, 8, 10, 0, 3, 5];
    let x = vec![vec![-1.0, 0.5, 0.2, -0.3, 1.1, -0.5, 0.0, 0.8, -0.9]];
    let model = BymModel::new(spec(x, offset, true, true), Some(lattice(3, 3)), &y).unwrap();
    let lap = laplace_fit(&model, &GridConfig::default()).unwrap();
    let cfg = McmcConfig {
        chains: 4,
        burn_in: 2000,
        iterations: 8000,
        thin: 4,
        seed: 9,
    };
    let mc = mcmc_fit(&model, &cfg).unwrap();
    for name in ["intercept", "x0"] {
        let a = lap.fixed_by_name(name).unwrap();
        let b = mc.fixed_by_name(name).unwrap();
        assert!(
            (a.mean - b.mean).abs() < 0.25 * a.sd.max(b.sd) + 0.02,
            "{name}: {a:?} vs {b:?}"
        );
    }
}

#[test]
fn invalid_grid_config_is_rejected() {
    let model = BymModel::new(spec(vec![], vec![1.0], false, false), None, &[1]).unwrap();
    let cfg = GridConfig {
        points_per_axis: 0,
        ..GridConfig::default()
    };
    assert!(matches!(
        laplace_fit(&model, &cfg),
        Err(InferenceError::Config(_))
    ));
}
