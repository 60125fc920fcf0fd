//! Synthetic fixtures: geometry, line list and covariate table.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use bymap::bym::{
    icar_precision, simulate_counts, Hyperparams, ModelSpec, PriorSettings, TruthSpec,
};
use bymap::cohort::{Outcome, PatientRecord, RiskFactor, RiskFactors, Sex};
use bymap::geounits::{build_queen_adjacency, lattice_units, AreaUnit, DEFAULT_SNAP_DEG};
use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SimulateConfig;
use crate::{CliError, Result};

/// Published cohort size and deaths.
pub const PUBLISHED_RECORDS: u64 = 44_148;
pub const PUBLISHED_DEATHS: u64 = 12_170;
/// Male share of hospitalizations and of deaths.
pub const PUBLISHED_MALE_HOSP_SHARE: f64 = 0.551;
pub const PUBLISHED_MALE_DEATH_SHARE: f64 = 0.564;
/// Fatality rates by age band (0-19, 20-39, 40-59, 60+), male then female.
pub const PUBLISHED_BAND_RATES: [[f64; 2]; 4] = [
    [0.045, 0.046],
    [0.083, 0.058],
    [0.153, 0.139],
    [0.443, 0.397],
];
/// Hospitalization shares of the two youngest bands, male then female. The
/// split between the two oldest bands is solved so that each sex reaches
/// its published overall rate.
const YOUNG_SHARES: [[f64; 2]; 2] = [[0.04, 0.05], [0.16, 0.16]];
const MAX_AGE: u32 = 95;

/// Number of irregular polygons and zero-case units of the merge fixture.
pub const MERGE_UNITS: usize = 1594;
pub const MERGE_ZERO_UNITS: usize = 140;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub units: Vec<AreaUnit>,
    pub records: Vec<PatientRecord>,
    /// Column names, `population` first.
    pub covariate_names: Vec<String>,
    pub covariate_columns: Vec<Vec<f64>>,
    /// True relative risk per unit (lattice mode only).
    pub truth: Option<Vec<f64>>,
}

impl Fixture {
    pub fn covariates_csv(&self) -> String {
        let mut out = format!("unit_id,{}\n", self.covariate_names.join(","));
        for (i, u) in self.units.iter().enumerate() {
            out.push_str(&u.id);
            for col in &self.covariate_columns {
                let _ = write!(out, ",{:.10}", col[i]);
            }
            out.push('\n');
        }
        out
    }

    pub fn truth_csv(&self) -> Option<String> {
        let truth = self.truth.as_ref()?;
        let mut out = String::from("unit_id,rr\n");
        for (u, r) in self.units.iter().zip(truth) {
            let _ = writeln!(out, "{},{r:.10}", u.id);
        }
        Some(out)
    }
}

/// Independent sub-streams of one stage generator.
struct Streams {
    geometry: ChaCha8Rng,
    covariates: ChaCha8Rng,
    effects: u64,
    patients: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        Self {
            geometry: ChaCha8Rng::seed_from_u64(root.random()),
            covariates: ChaCha8Rng::seed_from_u64(root.random()),
            effects: root.random(),
            patients: ChaCha8Rng::seed_from_u64(root.random()),
        }
    }
}

fn band_edges(band: usize) -> (u32, u32) {
    [(0, 19), (20, 39), (40, 59), (60, MAX_AGE)][band]
}

fn sex_index(sex: Sex) -> usize {
    match sex {
        Sex::Male => 0,
        Sex::Female => 1,
    }
}

fn draw_sex(rng: &mut ChaCha8Rng) -> Sex {
    if rng.random_bool(PUBLISHED_MALE_HOSP_SHARE) {
        Sex::Male
    } else {
        Sex::Female
    }
}

/// Hospitalization shares of the four bands for one sex, reproducing
/// `overall` as the share-weighted mean of the band rates.
fn band_shares(s: usize, overall: f64) -> [f64; 4] {
    let r = |b: usize| PUBLISHED_BAND_RATES[b][s];
    let (a, b) = (YOUNG_SHARES[0][s], YOUNG_SHARES[1][s]);
    let rest = 1.0 - a - b;
    let c = (overall - r(0) * a - r(1) * b - r(3) * rest) / (r(2) - r(3));
    [a, b, c, rest - c]
}

fn draw_band(rng: &mut ChaCha8Rng, shares: &[f64; 4]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, s) in shares.iter().enumerate() {
        acc += s;
        if u < acc {
            return k;
        }
    }
    3
}

fn draw_patient(
    rng: &mut ChaCha8Rng,
    unit: &str,
    sex: Sex,
    band: usize,
    died: bool,
    window: (NaiveDate, NaiveDate),
) -> PatientRecord {
    let (lo, hi) = band_edges(band);
    let age = rng.random_range(lo..=hi);
    let span = (window.1 - window.0).num_days().max(0) as u64;
    let hosp = window.0 + Days::new(rng.random_range(0..=span));
    let outcome_date = hosp + Days::new(rng.random_range(1..=40));
    let mut risk = RiskFactors::default();
    let p_any = if age >= 60 { 0.7 } else { 0.35 };
    if rng.random_bool(p_any) {
        for _ in 0..rng.random_range(1..=2) {
            let f = RiskFactor::ALL[rng.random_range(0..RiskFactor::ALL.len())];
            risk.insert(f);
        }
    }
    PatientRecord {
        age,
        sex,
        unit_id: unit.to_string(),
        hospitalization_date: hosp,
        outcome: if died {
            Outcome::Death
        } else {
            Outcome::Discharge
        },
        outcome_date,
        risk_factors: risk,
        private_care: rng.random_bool(0.25),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn population(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| f64::from(rng.random_range(2000u32..8000)))
        .collect()
}

/// Right-skewed positive covariate.
fn skewed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 10.0 * (0.8 * normal(rng)).exp()).collect()
}

/// Lattice fixture. Unit `i` has relative risk
/// `ρ_i = exp(β0 + Σ_j β_j x_ij + b_i)` with `b` drawn from the BYM2 prior;
/// each patient dies with probability `min(r_s ρ_i, 0.99)` where `r_s` is
/// the published rate of their stratum.
pub fn lattice_fixture(
    cfg: &SimulateConfig,
    window: (NaiveDate, NaiveDate),
    seed: u64,
) -> Result<Fixture> {
    let mut st = Streams::new(seed);
    let units = lattice_units(cfg.rows, cfg.cols, cfg.origin, cfg.cell_deg);
    let n = units.len();
    let mut names = vec!["population".to_string()];
    let mut columns = vec![population(&mut st.covariates, n)];
    let xs: Vec<Vec<f64>> = cfg
        .beta
        .iter()
        .map(|_| (0..n).map(|_| normal(&mut st.covariates)).collect())
        .collect();
    for (j, x) in xs.iter().enumerate() {
        names.push(format!("x{}", j + 1));
        columns.push(x.clone());
    }
    for j in 0..cfg.noise_covariates {
        names.push(format!("z{}", j + 1));
        columns.push(skewed(&mut st.covariates, n));
    }

    let graph = build_queen_adjacency(&units, DEFAULT_SNAP_DEG)?;
    let icar = icar_precision(&graph);
    let x_names = (1..=xs.len()).map(|j| format!("x{j}")).collect();
    let spec = ModelSpec::new(
        x_names,
        xs,
        vec![1.0; n],
        true,
        true,
        PriorSettings::default(),
    )?;
    let truth = TruthSpec {
        beta0: cfg.beta0,
        beta: cfg.beta.clone(),
        hyper: Hyperparams::new(cfg.tau_b, cfg.phi)?,
    };
    let sim = simulate_counts(&spec, Some(&icar), &truth, st.effects)?;
    let rho: Vec<f64> = sim.eta.iter().map(|e| e.exp()).collect();

    let shares = [
        band_shares(
            0,
            PUBLISHED_MALE_DEATH_SHARE * PUBLISHED_DEATHS as f64
                / (PUBLISHED_MALE_HOSP_SHARE * PUBLISHED_RECORDS as f64),
        ),
        band_shares(
            1,
            (1.0 - PUBLISHED_MALE_DEATH_SHARE) * PUBLISHED_DEATHS as f64
                / ((1.0 - PUBLISHED_MALE_HOSP_SHARE) * PUBLISHED_RECORDS as f64),
        ),
    ];
    let rng = &mut st.patients;
    let mut records = Vec::new();
    for (i, u) in units.iter().enumerate() {
        let k = rng.random_range(cfg.hosp_min..=cfg.hosp_max);
        for _ in 0..k {
            let sex = draw_sex(rng);
            let band = draw_band(rng, &shares[sex_index(sex)]);
            let p = (PUBLISHED_BAND_RATES[band][sex_index(sex)] * rho[i]).min(0.99);
            let died = rng.random_bool(p);
            records.push(draw_patient(rng, &u.id, sex, band, died, window));
        }
    }
    Ok(Fixture {
        units,
        records,
        covariate_names: names,
        covariate_columns: columns,
        truth: Some(rho),
    })
}

/// Number of hospitalizations and deaths per (band, sex) cell of the
/// published-marginal cohort, band-major, male first.
pub fn published_marginal_cells() -> Vec<(usize, Sex, u64, u64)> {
    let male_hosp = (PUBLISHED_MALE_HOSP_SHARE * PUBLISHED_RECORDS as f64).round() as u64;
    let male_deaths = (PUBLISHED_MALE_DEATH_SHARE * PUBLISHED_DEATHS as f64).round() as u64;
    let totals = [
        (Sex::Male, male_hosp, male_deaths),
        (
            Sex::Female,
            PUBLISHED_RECORDS - male_hosp,
            PUBLISHED_DEATHS - male_deaths,
        ),
    ];
    let mut cells = vec![(0, Sex::Male, 0, 0); 8];
    for (s, &(sex, hosp, deaths)) in totals.iter().enumerate() {
        let shares = band_shares(s, deaths as f64 / hosp as f64);
        let mut h_left = hosp;
        let mut d_left = deaths;
        for band in 0..4 {
            let (h, d) = if band == 3 {
                (h_left, d_left)
            } else {
                let h = (shares[band] * hosp as f64).round() as u64;
                (h, (PUBLISHED_BAND_RATES[band][s] * h as f64).round() as u64)
            };
            h_left -= h;
            d_left -= d;
            cells[band * 2 + s] = (band, sex, h, d);
        }
    }
    cells
}

/// Cohort of exactly 44,148 hospitalizations and 12,170 deaths whose sex
/// and age-band counts follow the published marginals, spread uniformly over
/// a lattice.
pub fn published_marginal_fixture(
    cfg: &SimulateConfig,
    window: (NaiveDate, NaiveDate),
    seed: u64,
) -> Result<Fixture> {
    let mut st = Streams::new(seed);
    let units = lattice_units(cfg.rows, cfg.cols, cfg.origin, cfg.cell_deg);
    let n = units.len();
    let mut records = Vec::with_capacity(PUBLISHED_RECORDS as usize);
    let rng = &mut st.patients;
    for (band, sex, hosp, deaths) in published_marginal_cells() {
        let mut died: Vec<bool> = (0..hosp).map(|k| k < deaths).collect();
        died.shuffle(rng);
        for d in died {
            let unit = &units[rng.random_range(0..n)].id;
            records.push(draw_patient(rng, unit, sex, band, d, window));
        }
    }
    records.shuffle(rng);
    let names = vec!["population".into(), "x1".into(), "z1".into()];
    let columns = vec![
        population(&mut st.covariates, n),
        (0..n).map(|_| normal(&mut st.covariates)).collect(),
        skewed(&mut st.covariates, n),
    ];
    Ok(Fixture {
        units,
        records,
        covariate_names: names,
        covariate_columns: columns,
        truth: None,
    })
}

/// 1,594 quadrilaterals on a jittered 40 × 40 vertex grid (the last six
/// cells of the top row are left out) with ids `hdu0001..`. 140 units,
/// pairwise non-adjacent, receive no records; all others receive 1 to 8.
pub fn merge_fixture(window: (NaiveDate, NaiveDate), seed: u64) -> Result<Fixture> {
    let mut st = Streams::new(seed);
    let (rows, cols) = (40usize, 40usize);
    let origin = [-46.83, -23.75];
    let cell = 0.01;
    let jitter: Vec<Vec<[f64; 2]>> = (0..=rows)
        .map(|r| {
            (0..=cols)
                .map(|c| {
                    let interior = r > 0 && r < rows && c > 0 && c < cols;
                    let mut d = [0.0, 0.0];
                    if interior {
                        d = [
                            st.geometry.random_range(-0.3..0.3),
                            st.geometry.random_range(-0.3..0.3),
                        ];
                    }
                    [
                        origin[0] + (c as f64 + d[0]) * cell,
                        origin[1] + (r as f64 + d[1]) * cell,
                    ]
                })
                .collect()
        })
        .collect();
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if r * cols + c < MERGE_UNITS {
                cells.push((r, c));
            }
        }
    }
    let units: Vec<AreaUnit> = cells
        .iter()
        .enumerate()
        .map(|(k, &(r, c))| {
            let v = |rr: usize, cc: usize| jitter[rr][cc];
            AreaUnit {
                id: format!("hdu{:04}", k + 1),
                name: None,
                polygons: vec![vec![vec![
                    v(r, c),
                    v(r, c + 1),
                    v(r + 1, c + 1),
                    v(r + 1, c),
                    v(r, c),
                ]]],
            }
        })
        .collect();

    // greedy independent set of zero-case units
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut st.geometry);
    let mut zero: BTreeSet<usize> = BTreeSet::new();
    for k in order {
        if zero.len() == MERGE_ZERO_UNITS {
            break;
        }
        let (r, c) = cells[k];
        let touches = zero.iter().any(|&z| {
            let (zr, zc) = cells[z];
            zr.abs_diff(r) <= 1 && zc.abs_diff(c) <= 1
        });
        if !touches {
            zero.insert(k);
        }
    }
    if zero.len() != MERGE_ZERO_UNITS {
        return Err(CliError::Input(
            "could not place the zero-case units".into(),
        ));
    }

    let rng = &mut st.patients;
    let shares = [band_shares(0, 0.282), band_shares(1, 0.268)];
    let mut records = Vec::new();
    for (k, u) in units.iter().enumerate() {
        if zero.contains(&k) {
            continue;
        }
        for _ in 0..rng.random_range(1..=8) {
            let sex = draw_sex(rng);
            let band = draw_band(rng, &shares[sex_index(sex)]);
            let died = rng.random_bool(PUBLISHED_BAND_RATES[band][sex_index(sex)]);
            records.push(draw_patient(rng, &u.id, sex, band, died, window));
        }
    }
    let n = units.len();
    let names = vec!["population".into(), "x1".into(), "z1".into()];
    let columns = vec![
        population(&mut st.covariates, n),
        (0..n).map(|_| normal(&mut st.covariates)).collect(),
        skewed(&mut st.covariates, n),
    ];
    Ok(Fixture {
        units,
        records,
        covariate_names: names,
        covariate_columns: columns,
        truth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> (NaiveDate, NaiveDate) {
        (
            NaiveDate::from_ymd_opt(2020, 2, 27).unwrap(),
            NaiveDate::from_ymd_opt(2020, 11, 19).unwrap(),
        )
    }

    #[test]
    fn published_cells_sum_to_published_totals() {
        let cells = published_marginal_cells();
        assert_eq!(cells.iter().map(|c| c.2).sum::<u64>(), PUBLISHED_RECORDS);
        assert_eq!(cells.iter().map(|c| c.3).sum::<u64>(), PUBLISHED_DEATHS);
        for (band, sex, h, d) in &cells {
            let rate = *d as f64 / *h as f64;
            let target = PUBLISHED_BAND_RATES[*band][sex_index(*sex)];
            assert!((rate - target).abs() < 0.002, "{band} {sex:?} {rate}");
        }
    }

    #[test]
    fn band_shares_are_a_distribution() {
        for s in 0..2 {
            let sh = band_shares(s, 0.27);
            assert!(sh.iter().all(|&x| x > 0.0));
            assert!((sh.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_fixture_is_deterministic_and_sized() {
        let cfg = SimulateConfig {
            rows: 4,
            cols: 5,
            ..SimulateConfig::default()
        };
        let a = lattice_fixture(&cfg, window(), 3).unwrap();
        let b = lattice_fixture(&cfg, window(), 3).unwrap();
        assert_eq!(a.units.len(), 20);
        assert_eq!(a.records, b.records);
        assert_eq!(a.covariates_csv(), b.covariates_csv());
        let per_unit = a.records.len() as f64 / 20.0;
        assert!((70.0..=180.0).contains(&per_unit));
        assert_eq!(a.covariate_names, vec!["population", "x1", "z1", "z2"]);
    }

    #[test]
    fn merge_fixture_has_isolated_zero_units() {
        let f = merge_fixture(window(), 5).unwrap();
        assert_eq!(f.units.len(), MERGE_UNITS);
        let with_cases: BTreeSet<&str> = f.records.iter().map(|r| r.unit_id.as_str()).collect();
        assert_eq!(MERGE_UNITS - with_cases.len(), MERGE_ZERO_UNITS);
    }
}
