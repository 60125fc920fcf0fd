//! Hospitalization line lists, citywide stratum rates and indirectly
//! standardized expected deaths.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("unreadable line list: {0}")]
    Csv(#[from] csv::Error),
    #[error("line list is missing required column `{0}`")]
    MissingColumn(String),
    #[error("unit strata have {got} cells but the stratum table has {expected}")]
    StratumMismatch { expected: usize, got: usize },
    #[error("invalid age bands: {0}")]
    Bands(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" | "masculino" | "1" => Some(Sex::Male),
            "f" | "female" | "feminino" | "2" => Some(Sex::Female),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Death,
    Discharge,
}

impl Outcome {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "death" | "died" | "obito" | "óbito" | "1" => Some(Outcome::Death),
            "discharge" | "cure" | "cura" | "alta" | "survived" | "0" | "2" => {
                Some(Outcome::Discharge)
            }
            _ => None,
        }
    }
}

/// The twelve medical risk factors recorded on the line list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskFactor {
    Postpartum,
    Cardiovascular,
    Hematologic,
    DownSyndrome,
    Hepatic,
    Asthma,
    Diabetes,
    Neurologic,
    Pneumopathy,
    Immunodeficiency,
    Renal,
    Obesity,
}

impl RiskFactor {
    pub const ALL: [RiskFactor; 12] = [
        RiskFactor::Postpartum,
        RiskFactor::Cardiovascular,
        RiskFactor::Hematologic,
        RiskFactor::DownSyndrome,
        RiskFactor::Hepatic,
        RiskFactor::Asthma,
        RiskFactor::Diabetes,
        RiskFactor::Neurologic,
        RiskFactor::Pneumopathy,
        RiskFactor::Immunodeficiency,
        RiskFactor::Renal,
        RiskFactor::Obesity,
    ];

    /// Default column name on the line list.
    pub fn column(self) -> &'static str {
        match self {
            RiskFactor::Postpartum => "postpartum",
            RiskFactor::Cardiovascular => "cardiovascular",
            RiskFactor::Hematologic => "hematologic",
            RiskFactor::DownSyndrome => "down_syndrome",
            RiskFactor::Hepatic => "hepatic",
            RiskFactor::Asthma => "asthma",
            RiskFactor::Diabetes => "diabetes",
            RiskFactor::Neurologic => "neurologic",
            RiskFactor::Pneumopathy => "pneumopathy",
            RiskFactor::Immunodeficiency => "immunodeficiency",
            RiskFactor::Renal => "renal",
            RiskFactor::Obesity => "obesity",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

/// Set of risk factors as a bitmask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RiskFactors(u16);

impl RiskFactors {
    pub fn insert(&mut self, f: RiskFactor) {
        self.0 |= f.bit();
    }

    pub fn contains(self, f: RiskFactor) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn any(self) -> bool {
        self.0 != 0
    }

    pub fn from_slice(list: &[RiskFactor]) -> Self {
        let mut s = Self::default();
        for &f in list {
            s.insert(f);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub age: u32,
    pub sex: Sex,
    pub unit_id: String,
    pub hospitalization_date: NaiveDate,
    pub outcome: Outcome,
    pub outcome_date: NaiveDate,
    pub risk_factors: RiskFactors,
    pub private_care: bool,
}

/// Line-list column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub age: String,
    pub sex: String,
    pub unit_id: String,
    pub hospitalization_date: String,
    pub outcome: String,
    pub outcome_date: String,
    pub private_care: String,
    /// Risk-factor columns in [`RiskFactor::ALL`] order.
    pub risk_factors: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            age: "age".into(),
            sex: "sex".into(),
            unit_id: "unit_id".into(),
            hospitalization_date: "hospitalization_date".into(),
            outcome: "outcome".into(),
            outcome_date: "outcome_date".into(),
            private_care: "private_care".into(),
            risk_factors: RiskFactor::ALL
                .iter()
                .map(|f| f.column().to_string())
                .collect(),
        }
    }
}

/// Optional filters applied while validating.
#[derive(Debug, Clone, Default)]
pub struct ValidationOptions {
    /// Inclusive hospitalization-date window.
    pub window: Option<(NaiveDate, NaiveDate)>,
    /// When set, unit ids outside this list are rejected.
    pub known_units: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    MissingAge,
    MissingSex,
    MissingUnit,
    MissingHospitalizationDate,
    MissingOutcome,
    MissingOutcomeDate,
    Unparseable,
    DateOrder,
    OutsideWindow,
    UnknownUnit,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::MissingAge => "missing age",
            RejectReason::MissingSex => "missing sex",
            RejectReason::MissingUnit => "missing unit",
            RejectReason::MissingHospitalizationDate => "missing hospitalization date",
            RejectReason::MissingOutcome => "missing outcome",
            RejectReason::MissingOutcomeDate => "missing outcome date",
            RejectReason::Unparseable => "unparseable value",
            RejectReason::DateOrder => "date order",
            RejectReason::OutsideWindow => "outside study window",
            RejectReason::UnknownUnit => "unknown unit",
        })
    }
}

/// Rejected rows with their 1-based data row number.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RejectionReport {
    pub rows: Vec<(usize, RejectReason)>,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut out = BTreeMap::new();
        for (_, r) in &self.rows {
            *out.entry(*r).or_insert(0) += 1;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,reason\n");
        for (row, reason) in &self.rows {
            let _ = writeln!(out, "{row},{reason}");
        }
        out
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "no" | "n" | "false" | "nao" | "não" | "2" => Some(false),
        "1" | "yes" | "y" | "true" | "sim" => Some(true),
        _ => None,
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Validates a CSV line list. Rows lacking age, sex, unit, hospitalization
/// date or outcome date (or failing strict parsing) are rejected and listed
/// with their reason; nothing is dropped silently. A missing header column is
/// fatal. The risk-factor and private-care columns are optional; when absent
/// they read as "no".
pub fn validate_records(
    text: &str,
    columns: &ColumnMap,
    options: &ValidationOptions,
) -> Result<(Vec<PatientRecord>, RejectionReport), CohortError> {
    let mut records = Vec::new();
    let mut report = RejectionReport::default();
    if text.trim().is_empty() {
        return Ok((records, report));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| CohortError::MissingColumn(name.into()));
    let c_age = require(&columns.age)?;
    let c_sex = require(&columns.sex)?;
    let c_unit = require(&columns.unit_id)?;
    let c_hosp = require(&columns.hospitalization_date)?;
    let c_out = require(&columns.outcome)?;
    let c_outd = require(&columns.outcome_date)?;
    let c_priv = find(&columns.private_care);
    let c_risk: Vec<(RiskFactor, Option<usize>)> = RiskFactor::ALL
        .iter()
        .zip(&columns.risk_factors)
        .map(|(&f, name)| (f, find(name)))
        .collect();
    let known: Option<std::collections::HashSet<&str>> = options
        .known_units
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());

    for (k, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = k + 1;
        let get = |c: usize| row.get(c).unwrap_or("").trim();
        let reject = |report: &mut RejectionReport, r| report.rows.push((row_no, r));

        let required = [
            (c_age, RejectReason::MissingAge),
            (c_sex, RejectReason::MissingSex),
            (c_unit, RejectReason::MissingUnit),
            (c_hosp, RejectReason::MissingHospitalizationDate),
            (c_out, RejectReason::MissingOutcome),
            (c_outd, RejectReason::MissingOutcomeDate),
        ];
        if let Some(&(_, reason)) = required.iter().find(|(c, _)| get(*c).is_empty()) {
            reject(&mut report, reason);
            continue;
        }
        let age = get(c_age).parse::<u32>().ok();
        let sex = Sex::parse(get(c_sex));
        let hosp = parse_date(get(c_hosp));
        let outcome = Outcome::parse(get(c_out));
        let outd = parse_date(get(c_outd));
        let private_care = c_priv.map(|c| parse_flag(get(c))).unwrap_or(Some(false));
        let mut risk = RiskFactors::default();
        let mut risk_ok = true;
        for &(f, col) in &c_risk {
            match col.map(|c| parse_flag(get(c))).unwrap_or(Some(false)) {
                Some(true) => risk.insert(f),
                Some(false) => {}
                None => risk_ok = false,
            }
        }
        let (Some(age), Some(sex), Some(hosp), Some(outcome), Some(outd), Some(private_care), true) =
            (age, sex, hosp, outcome, outd, private_care, risk_ok)
        else {
            reject(&mut report, RejectReason::Unparseable);
            continue;
        };
        if outd < hosp {
            reject(&mut report, RejectReason::DateOrder);
            continue;
        }
        if let Some((start, end)) = options.window {
            if hosp < start || hosp > end {
                reject(&mut report, RejectReason::OutsideWindow);
                continue;
            }
        }
        let unit_id = get(c_unit).to_string();
        if let Some(known) = &known {
            if !known.contains(unit_id.as_str()) {
                reject(&mut report, RejectReason::UnknownUnit);
                continue;
            }
        }
        records.push(PatientRecord {
            age,
            sex,
            unit_id,
            hospitalization_date: hosp,
            outcome,
            outcome_date: outd,
            risk_factors: risk,
            private_care,
        });
    }
    Ok((records, report))
}

/// Serializes records back to CSV with the default column names.
pub fn records_to_csv(records: &[PatientRecord]) -> String {
    let cols = ColumnMap::default();
    let mut out = format!(
        "{},{},{},{},{},{},{},{}\n",
        cols.age,
        cols.sex,
        cols.unit_id,
        cols.hospitalization_date,
        cols.outcome,
        cols.outcome_date,
        cols.private_care,
        cols.risk_factors.join(",")
    );
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.age,
            if r.sex == Sex::Male { "M" } else { "F" },
            r.unit_id,
            r.hospitalization_date,
            if r.outcome == Outcome::Death {
                "death"
            } else {
                "discharge"
            },
            r.outcome_date,
            u8::from(r.private_care)
        );
        for f in RiskFactor::ALL {
            let _ = write!(out, ",{}", u8::from(r.risk_factors.contains(f)));
        }
        out.push('\n');
    }
    out
}

/// Age bands given by their lower edges; the last band is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBands {
    lower_edges: Vec<u32>,
}

impl Default for AgeBands {
    fn default() -> Self {
        Self {
            lower_edges: vec![0, 20, 40, 60],
        }
    }
}

impl AgeBands {
    pub fn new(lower_edges: Vec<u32>) -> Result<Self, CohortError> {
        if lower_edges.first() != Some(&0) {
            return Err(CohortError::Bands("first edge must be 0".into()));
        }
        if lower_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CohortError::Bands("edges must increase strictly".into()));
        }
        Ok(Self { lower_edges })
    }

    pub fn len(&self) -> usize {
        self.lower_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_edges.is_empty()
    }

    pub fn band_of(&self, age: u32) -> usize {
        self.lower_edges.partition_point(|&e| e <= age) - 1
    }

    pub fn label(&self, band: usize) -> String {
        match self.lower_edges.get(band + 1) {
            Some(&next) => format!("{}-{}", self.lower_edges[band], next - 1),
            None => format!("{}+", self.lower_edges[band]),
        }
    }

    pub fn lower_edges(&self) -> &[u32] {
        &self.lower_edges
    }

    /// Stratum index of (band, sex) in the band-major (age × sex) layout.
    pub fn stratum(&self, age: u32, sex: Sex) -> usize {
        self.band_of(age) * 2 + sex as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCell {
    pub band: String,
    pub sex: Sex,
    pub hospitalizations: u64,
    pub deaths: u64,
    pub rate: f64,
    /// true when no hospitalizations fell in the stratum (rate reported as 0)
    pub empty: bool,
}

/// Citywide per-stratum fatality rates, band-major then sex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    pub bands: AgeBands,
    pub cells: Vec<StratumCell>,
}

impl StratumTable {
    pub fn rates(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.rate).collect()
    }

    pub fn rate(&self, band: usize, sex: Sex) -> f64 {
        self.cells[band * 2 + sex as usize].rate
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("age_band,sex,hospitalizations,deaths,rate,empty\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                c.band,
                c.sex.label(),
                c.hospitalizations,
                c.deaths,
                c.rate,
                c.empty
            );
        }
        out
    }
}

/// Per-stratum fatality rates over the whole study population.
pub fn stratum_rates(records: &[PatientRecord], bands: &AgeBands) -> StratumTable {
    let k = bands.len() * 2;
    let mut hosp = vec![0u64; k];
    let mut deaths = vec![0u64; k];
    for r in records {
        let s = bands.stratum(r.age, r.sex);
        hosp[s] += 1;
        if r.outcome == Outcome::Death {
            deaths[s] += 1;
        }
    }
    let cells = (0..k)
        .map(|s| StratumCell {
            band: bands.label(s / 2),
            sex: Sex::ALL[s % 2],
            hospitalizations: hosp[s],
            deaths: deaths[s],
            rate: if hosp[s] == 0 {
                0.0
            } else {
                deaths[s] as f64 / hosp[s] as f64
            },
            empty: hosp[s] == 0,
        })
        .collect();
    StratumTable {
        bands: bands.clone(),
        cells,
    }
}

/// Per-unit stratum hospitalizations and observed deaths.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStrata {
    pub unit_id: String,
    pub hospitalizations: Vec<u64>,
    pub deaths: u64,
}

/// Tabulates records per unit, in the order of `unit_ids`. Records for
/// units not in the list are ignored.
pub fn unit_strata(
    records: &[PatientRecord],
    bands: &AgeBands,
    unit_ids: &[String],
) -> Vec<UnitStrata> {
    let index: std::collections::HashMap<&str, usize> = unit_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut out: Vec<UnitStrata> = unit_ids
        .iter()
        .map(|id| UnitStrata {
            unit_id: id.clone(),
            hospitalizations: vec![0; bands.len() * 2],
            deaths: 0,
        })
        .collect();
    for r in records {
        if let Some(&i) = index.get(r.unit_id.as_str()) {
            out[i].hospitalizations[bands.stratum(r.age, r.sex)] += 1;
            if r.outcome == Outcome::Death {
                out[i].deaths += 1;
            }
        }
    }
    out
}

/// E_i = Σ_s n_{i,s} · r_s
pub fn expected_deaths(
    units: &[UnitStrata],
    table: &StratumTable,
) -> Result<Vec<f64>, CohortError> {
    let rates = table.rates();
    units
        .iter()
        .map(|u| {
            if u.hospitalizations.len() != rates.len() {
                return Err(CohortError::StratumMismatch {
                    expected: rates.len(),
                    got: u.hospitalizations.len(),
                });
            }
            Ok(u.hospitalizations
                .iter()
                .zip(&rates)
                .map(|(&n, &r)| n as f64 * r)
                .sum())
        })
        .collect()
}

/// Observed and expected deaths for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCounts {
    pub unit_id: String,
    pub hospitalizations: u64,
    pub deaths: u64,
    pub expected: f64,
    pub hcfr: f64,
}

pub fn unit_counts(
    units: &[UnitStrata],
    table: &StratumTable,
) -> Result<Vec<UnitCounts>, CohortError> {
    let expected = expected_deaths(units, table)?;
    Ok(units
        .iter()
        .zip(expected)
        .map(|(u, e)| {
            let hosp: u64 = u.hospitalizations.iter().sum();
            UnitCounts {
                unit_id: u.unit_id.clone(),
                hospitalizations: hosp,
                deaths: u.deaths,
                expected: e,
                hcfr: if hosp == 0 {
                    f64::NAN
                } else {
                    u.deaths as f64 / hosp as f64
                },
            }
        })
        .collect())
}

pub fn unit_counts_to_csv(counts: &[UnitCounts]) -> String {
    let mut out = String::from("unit_id,hosp,deaths,expected,hcfr\n");
    for c in counts {
        let _ = writeln!(
            out,
            "{},{},{},{:.10},{:.6}",
            c.unit_id, c.hospitalizations, c.deaths, c.expected, c.hcfr
        );
    }
    out
}

pub fn unit_counts_from_csv(text: &str) -> Result<Vec<UnitCounts>, CohortError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CohortError::MissingColumn(name.into()))
    };
    let (ci, ch, cd, ce) = (
        col("unit_id")?,
        col("hosp")?,
        col("deaths")?,
        col("expected")?,
    );
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let num = |c: usize| -> Result<f64, CohortError> {
            row.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| CohortError::MissingColumn(format!("numeric {}", &headers[c])))
        };
        let hosp = num(ch)? as u64;
        let deaths = num(cd)? as u64;
        out.push(UnitCounts {
            unit_id: row.get(ci).unwrap_or("").to_string(),
            hospitalizations: hosp,
            deaths,
            expected: num(ce)?,
            hcfr: if hosp == 0 {
                f64::NAN
            } else {
                deaths as f64 / hosp as f64
            },
        });
    }
    Ok(out)
}

/// Grouping for [`hcfr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Overall,
    BySex,
    ByAgeBand,
    ByAgeBandAndSex,
    ByUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRate {
    pub group: String,
    pub hospitalizations: u64,
    pub deaths: u64,
    /// `None` for an empty group
    pub rate: Option<f64>,
}

/// Hospital case-fatality rate (deaths / hospitalizations) per group.
pub fn hcfr(records: &[PatientRecord], grouping: Grouping, bands: &AgeBands) -> Vec<GroupRate> {
    let mut acc: BTreeMap<(usize, String), (u64, u64)> = BTreeMap::new();
    // keys are pre-seeded so empty groups are reported
    match grouping {
        Grouping::Overall => {
            acc.insert((0, "overall".into()), (0, 0));
        }
        Grouping::BySex => {
            for s in Sex::ALL {
                acc.insert((s as usize, s.label().into()), (0, 0));
            }
        }
        Grouping::ByAgeBand => {
            for b in 0..bands.len() {
                acc.insert((b, bands.label(b)), (0, 0));
            }
        }
        Grouping::ByAgeBandAndSex => {
            for b in 0..bands.len() {
                for s in Sex::ALL {
                    acc.insert(
                        (
                            b * 2 + s as usize,
                            format!("{} {}", bands.label(b), s.label()),
                        ),
                        (0, 0),
                    );
                }
            }
        }
        Grouping::ByUnit => {}
    }
    for r in records {
        let key = match grouping {
            Grouping::Overall => (0, "overall".to_string()),
            Grouping::BySex => (r.sex as usize, r.sex.label().to_string()),
            Grouping::ByAgeBand => {
                let b = bands.band_of(r.age);
                (b, bands.label(b))
            }
            Grouping::ByAgeBandAndSex => {
                let b = bands.band_of(r.age);
                (
                    b * 2 + r.sex as usize,
                    format!("{} {}", bands.label(b), r.sex.label()),
                )
            }
            Grouping::ByUnit => (0, r.unit_id.clone()),
        };
        let e = acc.entry(key).or_insert((0, 0));
        e.0 += 1;
        if r.outcome == Outcome::Death {
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((_, group), (h, d))| GroupRate {
            group,
            hospitalizations: h,
            deaths: d,
            rate: (h > 0).then(|| d as f64 / h as f64),
        })
        .collect()
}

/// Fractions of a unit's patients with at least one risk factor and with
/// private care.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitAggregates {
    pub risk_factor_rate: f64,
    pub private_care_rate: f64,
}

pub fn unit_aggregate_covariates(records: &[PatientRecord]) -> BTreeMap<String, UnitAggregates> {
    let mut acc: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.unit_id.clone()).or_insert((0, 0, 0));
        e.0 += 1;
        e.1 += u64::from(r.risk_factors.any());
        e.2 += u64::from(r.private_care);
    }
    acc.into_iter()
        .map(|(id, (n, risk, private))| {
            (
                id,
                UnitAggregates {
                    risk_factor_rate: risk as f64 / n as f64,
                    private_care_rate: private as f64 / n as f64,
                },
            )
        })
        .collect()
}

/// Rewrites each record's unit id through an original → survivor lookup.
/// Records whose unit is not in the lookup keep their id.
pub fn reassign_units(records: &mut [PatientRecord], lookup: &BTreeMap<&str, &str>) {
    for r in records {
        if let Some(to) = lookup.get(r.unit_id.as_str()) {
            r.unit_id = to.to_string();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn rec(age: u32, sex: Sex, unit: &str, died: bool) -> PatientRecord {
        PatientRecord {
            age,
            sex,
            unit_id: unit.into(),
            hospitalization_date: date("2020-05-01"),
            outcome: if died {
                Outcome::Death
            } else {
                Outcome::Discharge
            },
            outcome_date: date("2020-05-10"),
            risk_factors: RiskFactors::default(),
            private_care: false,
        }
    }

    const HEADER: &str =
        "age,sex,unit_id,hospitalization_date,outcome,outcome_date,private_care,diabetes\n";

    #[test]
    fn validation_rejects_and_counts() {
        let text = format!(
            "{HEADER}\
             34,M,u1,2020-04-01,death,2020-04-09,1,1\n\
             ,F,u1,2020-04-01,discharge,2020-04-09,0,0\n\
             50,F,u2,2020-04-10,discharge,2020-04-01,0,0\n\
             50,X,u2,2020-04-10,discharge,2020-04-11,0,0\n\
             61,F,u2,2020-04-10,discharge,,0,0\n"
        );
        let (recs, report) =
            validate_records(&text, &ColumnMap::default(), &ValidationOptions::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].private_care);
        assert!(recs[0].risk_factors.contains(RiskFactor::Diabetes));
        assert_eq!(
            report.rows,
            vec![
                (2, RejectReason::MissingAge),
                (3, RejectReason::DateOrder),
                (4, RejectReason::Unparseable),
                (5, RejectReason::MissingOutcomeDate)
            ]
        );
        assert_eq!(RejectReason::DateOrder.to_string(), "date order");
    }

    #[test]
    fn empty_file_and_missing_column() {
        let (recs, report) =
            validate_records("", &ColumnMap::default(), &ValidationOptions::default()).unwrap();
        assert!(recs.is_empty() && report.is_empty());
        let err = validate_records(
            "age,sex\n1,M\n",
            &ColumnMap::default(),
            &ValidationOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CohortError::MissingColumn(c) if c == "unit_id"));
    }

    #[test]
    fn window_and_unknown_units() {
        let text = format!(
            "{HEADER}\
             34,M,u1,2019-04-01,death,2019-04-09,0,0\n\
             34,M,zz,2020-04-01,death,2020-04-09,0,0\n"
        );
        let opts = ValidationOptions {
            window: Some((date("2020-02-27"), date("2020-11-19"))),
            known_units: Some(vec!["u1".into()]),
        };
        let (_, report) = validate_records(&text, &ColumnMap::default(), &opts).unwrap();
        assert_eq!(
            report.rows,
            vec![
                (1, RejectReason::OutsideWindow),
                (2, RejectReason::UnknownUnit)
            ]
        );
    }

    #[test]
    fn csv_round_trip() {
        let mut r = rec(70, Sex::Female, "u9", true);
        r.risk_factors.insert(RiskFactor::Obesity);
        r.private_care = true;
        let text = records_to_csv(&[r.clone()]);
        let (back, report) =
            validate_records(&text, &ColumnMap::default(), &ValidationOptions::default()).unwrap();
        assert!(report.is_empty());
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn bands_and_labels() {
        let b = AgeBands::default();
        assert_eq!(b.band_of(0), 0);
        assert_eq!(b.band_of(19), 0);
        assert_eq!(b.band_of(20), 1);
        assert_eq!(b.band_of(95), 3);
        assert_eq!(b.label(1), "20-39");
        assert_eq!(b.label(3), "60+");
        assert!(AgeBands::new(vec![5, 10]).is_err());
        assert!(AgeBands::new(vec![0, 10, 10]).is_err());
    }

    #[test]
    fn stratum_rate_examples() {
        let bands = AgeBands::default();
        let mut recs: Vec<PatientRecord> =
            (0..10).map(|i| rec(45, Sex::Male, "a", i < 3)).collect();
        let table = stratum_rates(&recs, &bands);
        assert!((table.rate(2, Sex::Male) - 0.3).abs() < 1e-15);
        assert!(table.cells[0].empty);
        assert_eq!(table.cells[0].rate, 0.0);

        recs.iter_mut().for_each(|r| r.outcome = Outcome::Death);
        let table = stratum_rates(&recs, &bands);
        assert_eq!(table.rate(2, Sex::Male), 1.0);
    }

    #[test]
    fn expected_death_examples() {
        let bands = AgeBands::new(vec![0]).unwrap();
        let table = StratumTable {
            bands: bands.clone(),
            cells: vec![
                StratumCell {
                    band: "0+".into(),
                    sex: Sex::Male,
                    hospitalizations: 0,
                    deaths: 0,
                    rate: 0.1,
                    empty: false,
                },
                StratumCell {
                    band: "0+".into(),
                    sex: Sex::Female,
                    hospitalizations: 0,
                    deaths: 0,
                    rate: 0.0,
                    empty: true,
                },
            ],
        };
        let units = [UnitStrata {
            unit_id: "a".into(),
            hospitalizations: vec![100, 0],
            deaths: 0,
        }];
        assert!((expected_deaths(&units, &table).unwrap()[0] - 10.0).abs() < 1e-12);

        let two = StratumTable {
            bands,
            cells: vec![
                StratumCell {
                    band: "x".into(),
                    sex: Sex::Male,
                    hospitalizations: 0,
                    deaths: 0,
                    rate: 0.044,
                    empty: false,
                },
                StratumCell {
                    band: "x".into(),
                    sex: Sex::Female,
                    hospitalizations: 0,
                    deaths: 0,
                    rate: 0.421,
                    empty: false,
                },
            ],
        };
        let units = [UnitStrata {
            unit_id: "a".into(),
            hospitalizations: vec![50, 50],
            deaths: 0,
        }];
        assert!((expected_deaths(&units, &two).unwrap()[0] - 23.25).abs() < 1e-12);

        let bad = [UnitStrata {
            unit_id: "a".into(),
            hospitalizations: vec![1, 2, 3],
            deaths: 0,
        }];
        assert!(matches!(
            expected_deaths(&bad, &two),
            Err(CohortError::StratumMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn single_unit_expected_equals_observed() {
        let bands = AgeBands::default();
        let recs: Vec<PatientRecord> = (0..50)
            .map(|i| {
                rec(
                    10 + i,
                    if i % 3 == 0 { Sex::Female } else { Sex::Male },
                    "only",
                    i % 4 == 0,
                )
            })
            .collect();
        let table = stratum_rates(&recs, &bands);
        let units = unit_strata(&recs, &bands, &["only".to_string()]);
        let e = expected_deaths(&units, &table).unwrap();
        assert!((e[0] - units[0].deaths as f64).abs() < 1e-12);
    }

    #[test]
    fn hcfr_groups() {
        let bands = AgeBands::default();
        let recs: Vec<PatientRecord> = (0..10).map(|_| rec(30, Sex::Male, "a", false)).collect();
        let by_sex = hcfr(&recs, Grouping::BySex, &bands);
        assert_eq!(by_sex[0].rate, Some(0.0));
        assert_eq!(by_sex[1].group, "female");
        assert_eq!(by_sex[1].rate, None);
        assert_eq!(hcfr(&recs, Grouping::ByUnit, &bands)[0].group, "a");
    }

    #[test]
    fn aggregate_covariate_rates() {
        let mut recs = vec![rec(30, Sex::Male, "a", false); 3];
        recs[0].risk_factors.insert(RiskFactor::Diabetes);
        recs[2].risk_factors = RiskFactors::from_slice(&[RiskFactor::Asthma, RiskFactor::Obesity]);
        recs.iter_mut().for_each(|r| r.private_care = true);
        let agg = unit_aggregate_covariates(&recs);
        assert!((agg["a"].risk_factor_rate - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(agg["a"].private_care_rate, 1.0);
    }

    fn arb_records() -> impl Strategy<Value = Vec<PatientRecord>> {
        proptest::collection::vec((0u32..100, any::<bool>(), 0usize..6, any::<bool>()), 1..200)
            .prop_map(|v| {
                v.into_iter()
                    .map(|(age, male, unit, died)| {
                        rec(
                            age,
                            if male { Sex::Male } else { Sex::Female },
                            &format!("u{unit}"),
                            died,
                        )
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn internal_standardization_conserves_deaths(recs in arb_records()) {
            let bands = AgeBands::default();
            let ids: Vec<String> = (0..6).map(|i| format!("u{i}")).collect();
            let table = stratum_rates(&recs, &bands);
            let units = unit_strata(&recs, &bands, &ids);
            let e: f64 = expected_deaths(&units, &table).unwrap().iter().sum();
            let o: u64 = units.iter().map(|u| u.deaths).sum();
            prop_assert!((e - o as f64).abs() <= 1e-12 * (o as f64).max(1.0));
        }

        #[test]
        fn partitions_and_weighted_mean(recs in arb_records()) {
            let bands = AgeBands::default();
            let total = hcfr(&recs, Grouping::Overall, &bands)[0].clone();
            for g in [Grouping::BySex, Grouping::ByAgeBand] {
                let parts = hcfr(&recs, g, &bands);
                prop_assert_eq!(parts.iter().map(|p| p.deaths).sum::<u64>(), total.deaths);
                prop_assert_eq!(parts.iter().map(|p| p.hospitalizations).sum::<u64>(), total.hospitalizations);
            }
            let by_unit = hcfr(&recs, Grouping::ByUnit, &bands);
            let weighted: f64 = by_unit.iter().map(|u| u.rate.unwrap() * u.hospitalizations as f64).sum::<f64>()
                / total.hospitalizations as f64;
            prop_assert!((weighted - total.rate.unwrap()).abs() < 1e-12);
        }

        #[test]
        fn extra_death_never_lowers_expected(recs in arb_records(), pick in 0usize..200) {
            let bands = AgeBands::default();
            let ids: Vec<String> = (0..6).map(|i| format!("u{i}")).collect();
            let units = unit_strata(&recs, &bands, &ids);
            let before = expected_deaths(&units, &stratum_rates(&recs, &bands)).unwrap();
            let mut more = recs.clone();
            let k = pick % more.len();
            if more[k].outcome == Outcome::Discharge {
                more[k].outcome = Outcome::Death;
            }
            let after = expected_deaths(&units, &stratum_rates(&more, &bands)).unwrap();
            for (a, b) in after.iter().zip(&before) {
                prop_assert!(*a >= *b - 1e-12);
            }
        }
    }
}
