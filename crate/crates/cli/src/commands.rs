//! Pipeline stages. Each `cmd_*` reads its inputs, writes its artifacts into
//! the output directory, records itself in the manifest and returns a small
//! summary for the caller.
//!
//! | command       | writes                                                        |
//! |---------------|---------------------------------------------------------------|
//! | `simulate`    | geometry, line list, covariate table (and `truth.csv`)        |
//! | `adjacency`   | `adjacency_edges.csv`, `adjacency.gal`, `merge_map.csv`, `units.geojson`, `unit_cases.csv` |
//! | `standardize` | `unit_counts.csv`, `strata.csv`, `hcfr.csv`, `unit_aggregates.csv`, `rejections.csv`, `hcfr_map.svg` |
//! | `screen`      | `covariates_prepared.csv`, `transforms.csv`, `pca.csv`, `screening.csv`, `screening.txt` |
//! | `fit`         | `summary.csv`, `rr_table.csv`, `area.csv`, `area.geojson`, `rr_map.svg`, `fit.json`, `diagnostics.json` |
//! | `report`      | the `fit` tables and maps, regenerated from `fit.json`        |

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use bymap::bym::{icar_precision, BymModel, IcarStructure, ModelSpec};
use bymap::cohort::{
    hcfr, reassign_units, records_to_csv, stratum_rates, unit_aggregate_covariates, unit_counts,
    unit_counts_from_csv, unit_counts_to_csv, unit_strata, validate_records, Grouping,
    PatientRecord, UnitCounts, ValidationOptions,
};
use bymap::covariates::{
    kaiser_select, pca, read_covariate_csv, recombine, screening_candidates_csv, CovariateMatrix,
    TransformPolicy,
};
use bymap::geounits::{
    build_queen_adjacency, load_units, merge_zero_case_units, merged_units, read_gal,
    write_edge_list_csv, write_gal, write_merge_map_csv, AdjacencyGraph, AreaUnit, MergeMap,
};
use bymap::inference::{FitResult, McmcConfig};
use bymap::mapping::{area_geojson, render_choropleth_svg, units_geojson, MapOptions};
use bymap::selection::{dic, DicResult, FitEngine, ScreeningReport};
use serde::{Deserialize, Serialize};

use crate::config::{EngineKind, RunConfig, SimulateMode};
use crate::manifest::Stage;
use crate::simulate::{lattice_fixture, merge_fixture, published_marginal_fixture};
use crate::{CliError, Result};

const UNITS_FILE: &str = "units.geojson";
const MERGE_FILE: &str = "merge_map.csv";
const GAL_FILE: &str = "adjacency.gal";
const COUNTS_FILE: &str = "unit_counts.csv";
const AGGREGATES_FILE: &str = "unit_aggregates.csv";
const SCREENING_FILE: &str = "screening.csv";
const FIT_FILE: &str = "fit.json";

fn window(cfg: &RunConfig) -> (chrono::NaiveDate, chrono::NaiveDate) {
    (cfg.study.start, cfg.study.end)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateOutcome {
    pub units: usize,
    pub records: usize,
    pub deaths: usize,
}

/// Writes a synthetic geometry, line list and covariate table to the
/// configured input paths (or into the output directory when unset).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome> {
    let mut st = Stage::new(cfg, "simulate");
    let fixture = match cfg.simulate.mode {
        SimulateMode::Lattice => lattice_fixture(&cfg.simulate, window(cfg), st.seed)?,
        SimulateMode::PublishedMarginal => published_marginal_fixture(&cfg.simulate, window(cfg), st.seed)?,
        SimulateMode::Merge => merge_fixture(window(cfg), st.seed)?,
    };
    let geo = units_geojson(
        &fixture.units,
        &cfg.geometry.id_property,
        &vec![Default::default(); fixture.units.len()],
    )?;
    st.write_to(&cfg.geometry_path(), &geo)?;
    st.write_to(&cfg.line_list_path(), &records_to_csv(&fixture.records))?;
    st.write_to(&cfg.covariates_path(), &fixture.covariates_csv())?;
    if let Some(truth) = fixture.truth_csv() {
        st.write("truth.csv", &truth)?;
    }
    let out = SimulateOutcome {
        units: fixture.units.len(),
        records: fixture.records.len(),
        deaths: fixture
            .records
            .iter()
            .filter(|r| r.outcome == bymap::cohort::Outcome::Death)
            .count(),
    };
    st.finish()?;
    Ok(out)
}

fn load_geometry(st: &mut Stage, cfg: &RunConfig) -> Result<Vec<AreaUnit>> {
    let text = st.read(&cfg.geometry_path())?;
    Ok(load_units(&text, &cfg.geometry.id_property)?)
}

fn load_records(
    st: &mut Stage,
    cfg: &RunConfig,
    known: &[String],
) -> Result<(Vec<PatientRecord>, bymap::cohort::RejectionReport)> {
    let text = st.read(&cfg.line_list_path())?;
    let opts = ValidationOptions {
        window: Some(window(cfg)),
        known_units: Some(known.to_vec()),
    };
    let (records, report) = validate_records(&text, &cfg.columns, &opts)?;
    if !report.is_empty() {
        log::warn!(
            "{} line-list rows rejected: {:?}",
            report.total(),
            report.counts()
        );
    }
    Ok((records, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjacencyOutcome {
    pub original_units: usize,
    pub surviving_units: usize,
    pub zero_case_units: usize,
    pub edges: usize,
    pub total_cases: u64,
    pub surviving_cases: u64,
}

/// Queen adjacency of the input polygons followed by merging of units
/// without hospitalizations. Without a line list no merging takes place.
pub fn cmd_adjacency(cfg: &RunConfig) -> Result<AdjacencyOutcome> {
    let mut st = Stage::new(cfg, "adjacency");
    let units = load_geometry(&mut st, cfg)?;
    let graph = build_queen_adjacency(&units, cfg.geometry.snap_deg)?;
    let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    let line_list = cfg.line_list_path();
    let cases: Vec<u64> = if line_list.exists() {
        let (records, report) = load_records(&mut st, cfg, &ids)?;
        st.write("rejections.csv", &report.to_csv())?;
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut c = vec![0u64; ids.len()];
        for r in &records {
            c[index[r.unit_id.as_str()]] += 1;
        }
        c
    } else {
        log::warn!(
            "no line list at {}; units are not merged",
            line_list.display()
        );
        vec![1; ids.len()]
    };
    let (map, merged_graph) = if cases.contains(&0) {
        merge_zero_case_units(&units, &graph, &cases)?
    } else {
        (MergeMap::identity(ids.iter().map(String::as_str)), graph)
    };
    let survivors = merged_units(&units, &map);
    let lookup = map.as_lookup();
    let mut per_survivor: BTreeMap<&str, u64> = BTreeMap::new();
    for (id, c) in ids.iter().zip(&cases) {
        *per_survivor.entry(lookup[id.as_str()]).or_insert(0) += c;
    }
    let mut cases_csv = String::from("unit_id,cases\n");
    for s in &map.survivors {
        let _ = writeln!(
            cases_csv,
            "{s},{}",
            per_survivor.get(s.as_str()).copied().unwrap_or(0)
        );
    }
    st.write("adjacency_edges.csv", &write_edge_list_csv(&merged_graph))?;
    st.write(GAL_FILE, &write_gal(&merged_graph))?;
    st.write(MERGE_FILE, &write_merge_map_csv(&map))?;
    st.write(
        UNITS_FILE,
        &units_geojson(
            &survivors,
            "unit_id",
            &vec![Default::default(); survivors.len()],
        )?,
    )?;
    st.write("unit_cases.csv", &cases_csv)?;
    let out = AdjacencyOutcome {
        original_units: units.len(),
        surviving_units: map.surviving_count(),
        zero_case_units: cases.iter().filter(|&&c| c == 0).count(),
        edges: merged_graph.edge_count(),
        total_cases: cases.iter().sum(),
        surviving_cases: per_survivor.values().sum(),
    };
    st.finish()?;
    Ok(out)
}

/// Parses `original_id,surviving_id`.
pub fn read_merge_map(text: &str) -> Result<MergeMap> {
    let mut assignments = Vec::new();
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("original_id,surviving_id") {
        return Err(CliError::Input("merge map: unexpected header".into()));
    }
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| {
            CliError::Input(format!("merge map line {}: expected two fields", k + 2))
        })?;
        assignments.push((a.trim().to_string(), b.trim().to_string()));
    }
    let survivors = assignments
        .iter()
        .filter(|(a, b)| a == b)
        .map(|(a, _)| a.clone())
        .collect();
    Ok(MergeMap {
        assignments,
        survivors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StandardizeOutcome {
    pub records: u64,
    pub deaths: u64,
    pub rejected: usize,
    pub overall_rate: Option<f64>,
    pub male_rate: Option<f64>,
    pub female_rate: Option<f64>,
    pub sum_expected: f64,
    pub sum_observed: u64,
}

fn rate_csv(rows: &[(&str, Vec<bymap::cohort::GroupRate>)]) -> String {
    let mut out = String::from("grouping,group,hospitalizations,deaths,hcfr_percent\n");
    for (grouping, rates) in rows {
        for r in rates {
            let pct = r
                .rate
                .map_or_else(|| "NA".to_string(), |v| format!("{:.4}", 100.0 * v));
            let _ = writeln!(
                out,
                "{grouping},{},{},{},{pct}",
                r.group, r.hospitalizations, r.deaths
            );
        }
    }
    out
}

/// Indirect age/sex standardization over the surviving units.
pub fn cmd_standardize(cfg: &RunConfig) -> Result<StandardizeOutcome> {
    let mut st = Stage::new(cfg, "standardize");
    let map = read_merge_map(&st.read(&cfg.output(MERGE_FILE))?)?;
    let originals: Vec<String> = map.assignments.iter().map(|(a, _)| a.clone()).collect();
    let (mut records, report) = load_records(&mut st, cfg, &originals)?;
    reassign_units(&mut records, &map.as_lookup());
    let bands = cfg.age_bands();
    let table = stratum_rates(&records, &bands);
    let strata = unit_strata(&records, &bands, &map.survivors);
    let counts = unit_counts(&strata, &table)?;

    let overall = hcfr(&records, Grouping::Overall, &bands);
    let by_sex = hcfr(&records, Grouping::BySex, &bands);
    let rates = vec![
        ("overall", overall.clone()),
        ("sex", by_sex.clone()),
        ("age_band", hcfr(&records, Grouping::ByAgeBand, &bands)),
        (
            "age_band_sex",
            hcfr(&records, Grouping::ByAgeBandAndSex, &bands),
        ),
    ];
    let aggregates = unit_aggregate_covariates(&records);
    let mut agg_csv = String::from("unit_id,risk_factor_rate,private_care_rate\n");
    for id in &map.survivors {
        if let Some(a) = aggregates.get(id) {
            let _ = writeln!(
                agg_csv,
                "{id},{:.10},{:.10}",
                a.risk_factor_rate, a.private_care_rate
            );
        }
    }
    let sum_expected = neumaier(counts.iter().map(|c| c.expected));
    let sum_observed: u64 = counts.iter().map(|c| c.deaths).sum();
    log::info!(
        "conservation: sum E = {sum_expected:.6}, sum O = {sum_observed} (relative difference {:.3e})",
        (sum_expected - sum_observed as f64).abs() / (sum_observed as f64).max(1.0)
    );

    st.write(COUNTS_FILE, &unit_counts_to_csv(&counts))?;
    st.write("strata.csv", &table.to_csv())?;
    st.write("hcfr.csv", &rate_csv(&rates))?;
    st.write(AGGREGATES_FILE, &agg_csv)?;
    st.write("rejections.csv", &report.to_csv())?;
    if cfg.output(UNITS_FILE).exists() {
        let units = load_units(&st.read(&cfg.output(UNITS_FILE))?, "unit_id")?;
        let values: Vec<f64> = counts
            .iter()
            .map(|c| {
                if c.hcfr.is_finite() {
                    100.0 * c.hcfr
                } else {
                    0.0
                }
            })
            .collect();
        let opts = MapOptions {
            classes: cfg.map.classes,
            title: "Hospital case-fatality rate (%)".into(),
            legend_label: "HCFR (%)".into(),
            width: cfg.map.width,
        };
        let overlay = load_overlay(&mut st, cfg)?;
        st.write(
            "hcfr_map.svg",
            &render_choropleth_svg(&units, &values, overlay.as_deref(), &opts)?,
        )?;
    }
    let pick = |sex: &str| by_sex.iter().find(|r| r.group == sex).and_then(|r| r.rate);
    let out = StandardizeOutcome {
        records: overall[0].hospitalizations,
        deaths: overall[0].deaths,
        rejected: report.total(),
        overall_rate: overall[0].rate,
        male_rate: pick(bymap::cohort::Sex::Male.label()),
        female_rate: pick(bymap::cohort::Sex::Female.label()),
        sum_expected,
        sum_observed,
    };
    st.finish()?;
    Ok(out)
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn load_overlay(st: &mut Stage, cfg: &RunConfig) -> Result<Option<Vec<AreaUnit>>> {
    match &cfg.paths.overlay {
        Some(p) => Ok(Some(load_units(
            &st.read(p)?,
            &cfg.geometry.overlay_id_property,
        )?)),
        None => Ok(None),
    }
}

/// Inputs shared by `screen` and `fit`, aligned to the surviving units.
struct ModelInputs {
    units: Vec<AreaUnit>,
    map: MergeMap,
    counts: Vec<UnitCounts>,
    structure: IcarStructure,
}

fn reorder_graph(graph: &AdjacencyGraph, ids: &[String]) -> Result<AdjacencyGraph> {
    let pos: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if graph.len() != ids.len() {
        return Err(CliError::Input(format!(
            "adjacency has {} units, counts have {}",
            graph.len(),
            ids.len()
        )));
    }
    let mut edges = Vec::new();
    for (i, j, w) in graph.edges() {
        let a = graph.ids()[i].as_str();
        let b = graph.ids()[j].as_str();
        let (Some(&pa), Some(&pb)) = (pos.get(a), pos.get(b)) else {
            return Err(CliError::Input(format!(
                "adjacency unit `{a}` or `{b}` has no counts"
            )));
        };
        edges.push((pa.min(pb), pa.max(pb), w));
    }
    edges.sort_by_key(|e| (e.0, e.1));
    Ok(AdjacencyGraph::from_edges(ids.to_vec(), &edges))
}

fn load_model_inputs(st: &mut Stage, cfg: &RunConfig, need_structure: bool) -> Result<ModelInputs> {
    let map = read_merge_map(&st.read(&cfg.output(MERGE_FILE))?)?;
    let counts = unit_counts_from_csv(&st.read(&cfg.output(COUNTS_FILE))?)?;
    let ids: Vec<String> = counts.iter().map(|c| c.unit_id.clone()).collect();
    if ids != map.survivors {
        return Err(CliError::Input(
            "unit counts do not match the merge map survivors".into(),
        ));
    }
    if let Some(c) = counts.iter().find(|c| !(c.expected > 0.0)) {
        return Err(CliError::Input(format!(
            "unit `{}` has no expected deaths",
            c.unit_id
        )));
    }
    let units = load_units(&st.read(&cfg.output(UNITS_FILE))?, "unit_id")?;
    let graph = read_gal(&st.read(&cfg.output(GAL_FILE))?)?;
    let graph = reorder_graph(&graph, &ids)?;
    let structure = icar_precision(&graph);
    let structure = if need_structure {
        structure.scaled()?
    } else {
        structure
    };
    Ok(ModelInputs {
        units,
        map,
        counts,
        structure,
    })
}

/// Covariate table recombined over merged units, extended with the
/// line-list aggregates, transformed and z-scored.
fn prepared_covariates(
    st: &mut Stage,
    cfg: &RunConfig,
    inputs: &ModelInputs,
) -> Result<CovariateMatrix> {
    let text = st.read(&cfg.covariates_path())?;
    let header = text.lines().next().unwrap_or("");
    let weight = cfg
        .covariates
        .weight_column
        .as_deref()
        .filter(|w| header.split(',').any(|h| h.trim() == *w));
    let (raw, weights) = read_covariate_csv(&text, &cfg.covariates.id_column, weight)?;
    let mut m = recombine(
        &raw,
        &weights,
        &inputs.map.as_lookup(),
        &inputs.map.survivors,
    )?;
    let agg_path = cfg.output(AGGREGATES_FILE);
    if cfg.covariates.line_list_aggregates && agg_path.exists() {
        let (agg, _) = read_covariate_csv(&st.read(&agg_path)?, "unit_id", None)?;
        let pos: HashMap<&str, usize> = agg
            .unit_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        for (name, col) in agg.names.iter().zip(&agg.columns) {
            let aligned: Option<Vec<f64>> = m
                .unit_ids
                .iter()
                .map(|id| pos.get(id.as_str()).map(|&i| col[i]))
                .collect();
            let aligned =
                aligned.ok_or_else(|| CliError::Input(format!("{name}: missing units")))?;
            if crate_sd(&aligned) > 0.0 {
                m.names.push(name.clone());
                m.columns.push(aligned);
                m.transforms.push(bymap::covariates::Transform::None);
                m.scaling.push(None);
            } else {
                log::warn!("aggregate `{name}` is constant and is left out");
            }
        }
    }
    let policy = TransformPolicy {
        skew_threshold: cfg.covariates.skew_threshold,
    };
    Ok(m.transformed(&policy).standardized()?)
}

fn crate_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn transforms_csv(m: &CovariateMatrix) -> String {
    let mut out = String::from("covariate,transform,mean,sd\n");
    for k in 0..m.n_columns() {
        let (mean, sd) = m.scaling[k].unwrap_or((f64::NAN, f64::NAN));
        let _ = writeln!(
            out,
            "{},{},{mean:.10},{sd:.10}",
            m.names[k],
            m.transforms[k].label()
        );
    }
    out
}

fn engine(cfg: &RunConfig, kind: EngineKind, seed: u64) -> FitEngine {
    match kind {
        EngineKind::Laplace => FitEngine::Laplace(cfg.grid.clone()),
        EngineKind::Mcmc => FitEngine::Mcmc(McmcConfig {
            seed,
            ..cfg.mcmc.clone()
        }),
    }
}

/// Principal-component screening of the covariate table followed by one
/// bivariate spatial fit per candidate.
pub fn cmd_screen(cfg: &RunConfig) -> Result<ScreeningReport> {
    let mut st = Stage::new(cfg, "screen");
    let spatial = cfg.model.screening_spatial;
    let inputs = load_model_inputs(&mut st, cfg, spatial)?;
    let matrix = prepared_covariates(&mut st, cfg, &inputs)?;
    let weight = cfg.covariates.weight_column.as_deref();
    let drop: Vec<usize> = (0..matrix.n_columns())
        .filter(|&k| Some(matrix.names[k].as_str()) != weight)
        .collect();
    let matrix = matrix.select(&drop);
    let pcs = pca(&matrix)?;
    let candidates = kaiser_select(&pcs, cfg.covariates.top_k);
    let template = ModelSpec::new(
        vec![],
        vec![],
        inputs.counts.iter().map(|c| c.expected).collect(),
        spatial,
        cfg.model.screening_unstructured,
        cfg.model.priors,
    )?;
    let y: Vec<u64> = inputs.counts.iter().map(|c| c.deaths).collect();
    let report = bymap::selection::screen_bivariate(
        &candidates,
        &matrix,
        &template,
        spatial.then_some(&inputs.structure),
        &y,
        &engine(cfg, cfg.model.engine, st.seed),
        cfg.covariates.collinearity_threshold,
    )?;
    st.write("covariates_prepared.csv", &matrix.to_csv())?;
    st.write("transforms.csv", &transforms_csv(&matrix))?;
    st.write("pca.csv", &screening_candidates_csv(&pcs, &candidates))?;
    st.write(SCREENING_FILE, &report.to_csv())?;
    st.write("screening.txt", &report.to_text())?;
    st.finish()?;
    Ok(report)
}

/// Covariates flagged as retained in a screening CSV, in row order.
pub fn retained_from_screening(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 && f[3].trim() == "true" && !out.iter().any(|n| n == f[0]) {
            out.push(f[0].to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub covariates: Vec<String>,
    pub fit: FitResult,
    pub dic: DicResult,
}

/// Final model fit and its tables and maps. Returns
/// [`CliError::NotConverged`] after writing everything when the sampler
/// diagnostics flag non-convergence.
pub fn cmd_fit(cfg: &RunConfig, engine_override: Option<EngineKind>) -> Result<FitOutcome> {
    let mut st = Stage::new(cfg, "fit");
    let inputs = load_model_inputs(&mut st, cfg, cfg.model.spatial)?;
    let names = if cfg.model.use_screened {
        retained_from_screening(&st.read(&cfg.output(SCREENING_FILE))?)
    } else {
        cfg.model.covariates.clone()
    };
    let (design, names) = if names.is_empty() {
        (vec![], vec![])
    } else {
        let matrix = prepared_covariates(&mut st, cfg, &inputs)?;
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                matrix
                    .names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| CliError::Config(format!("unknown covariate `{n}`")))
            })
            .collect::<Result<_>>()?;
        let sel = matrix.select(&idx);
        (sel.columns, sel.names)
    };
    let offset: Vec<f64> = inputs.counts.iter().map(|c| c.expected).collect();
    let y: Vec<u64> = inputs.counts.iter().map(|c| c.deaths).collect();
    let spec = ModelSpec::new(
        names.clone(),
        design,
        offset,
        cfg.model.spatial,
        cfg.model.unstructured,
        cfg.model.priors,
    )?;
    let structure = cfg.model.spatial.then(|| inputs.structure.clone());
    let model = BymModel::new(spec.clone(), structure, &y)?;
    let kind = engine_override.unwrap_or(cfg.model.engine);
    let fit = engine(cfg, kind, st.seed).fit(&model)?;
    let d = dic(&fit, &spec, &y)?;
    let outcome = FitOutcome {
        covariates: names,
        fit,
        dic: d,
    };
    st.write(
        FIT_FILE,
        &(serde_json::to_string_pretty(&outcome).expect("serializable") + "\n"),
    )?;
    write_fit_outputs(&mut st, cfg, &inputs.units, &outcome)?;
    st.finish()?;
    if !outcome.fit.converged {
        return Err(CliError::NotConverged);
    }
    Ok(outcome)
}

fn diagnostics_json(outcome: &FitOutcome) -> String {
    let v = serde_json::json!({
        "engine": outcome.fit.engine,
        "variant": outcome.fit.variant,
        "converged": outcome.fit.converged,
        "dic": outcome.dic,
        "grid": outcome.fit.grid,
        "chains": outcome.fit.diagnostics,
        "hyperparameters": outcome.fit.hyper,
    });
    serde_json::to_string_pretty(&v).expect("serializable") + "\n"
}

fn write_fit_outputs(
    st: &mut Stage,
    cfg: &RunConfig,
    units: &[AreaUnit],
    outcome: &FitOutcome,
) -> Result<()> {
    let fit = &outcome.fit;
    let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    if ids.len() != fit.area.len() {
        return Err(CliError::Input(format!(
            "{} units in geometry, {} in the fit",
            ids.len(),
            fit.area.len()
        )));
    }
    st.write("summary.csv", &fit.summary_csv())?;
    st.write("rr_table.csv", &fit.rr_table_csv())?;
    st.write("area.csv", &fit.area_csv(&ids))?;
    st.write(
        "area.geojson",
        &area_geojson(units, &fit.area, cfg.map.classes)?,
    )?;
    st.write("diagnostics.json", &diagnostics_json(outcome))?;
    let opts = MapOptions {
        classes: cfg.map.classes,
        title: cfg.map.title.clone(),
        legend_label: "RR".into(),
        width: cfg.map.width,
    };
    let overlay = load_overlay(st, cfg)?;
    st.write(
        "rr_map.svg",
        &render_choropleth_svg(units, &fit.area.rr, overlay.as_deref(), &opts)?,
    )?;
    Ok(())
}

/// Regenerates the fit tables and maps from a saved `fit.json`.
pub fn cmd_report(cfg: &RunConfig) -> Result<FitOutcome> {
    let mut st = Stage::new(cfg, "report");
    let text = st.read(&cfg.output(FIT_FILE))?;
    let outcome: FitOutcome =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{FIT_FILE}: {e}")))?;
    let units = load_units(&st.read(&cfg.output(UNITS_FILE))?, "unit_id")?;
    write_fit_outputs(&mut st, cfg, &units, &outcome)?;
    st.finish()?;
    Ok(outcome)
}
