//! TOML run configuration.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every section and field has a default, so a file naming only
//! `[paths] output` is valid for `simulate` followed by the other commands.

use std::path::{Path, PathBuf};

use bymap::bym::PriorSettings;
use bymap::cohort::{AgeBands, ColumnMap};
use bymap::inference::{GridConfig, McmcConfig};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; each stage derives its own generator from it.
    pub seed: u64,
    pub paths: Paths,
    pub geometry: GeometryConfig,
    pub columns: ColumnMap,
    pub study: StudyConfig,
    pub covariates: CovariateConfig,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub mcmc: McmcConfig,
    pub map: MapConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            geometry: GeometryConfig::default(),
            columns: ColumnMap::default(),
            study: StudyConfig::default(),
            covariates: CovariateConfig::default(),
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            mcmc: McmcConfig::default(),
            map: MapConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

/// Input and output locations. Unset inputs default to the files `simulate`
/// writes into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub geometry: Option<PathBuf>,
    pub line_list: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Optional boundary layer drawn over the maps.
    pub overlay: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            geometry: None,
            line_list: None,
            covariates: None,
            overlay: None,
            output: PathBuf::from("output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub id_property: String,
    pub overlay_id_property: String,
    /// Snapping grid for vertex identity, degrees.
    pub snap_deg: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            id_property: "unit_id".into(),
            overlay_id_property: "id".into(),
            snap_deg: bymap::geounits::DEFAULT_SNAP_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Lower edges of the age bands; the last band is open-ended.
    pub age_bands: Vec<u32>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 2, 27).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2020, 11, 19).expect("valid date"),
            age_bands: vec![0, 20, 40, 60],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    pub id_column: String,
    /// Column used to weight covariates when merged units are recombined.
    /// Ignored (equal weights) when the file has no such column.
    pub weight_column: Option<String>,
    pub skew_threshold: f64,
    /// Covariates taken from each retained principal component.
    pub top_k: usize,
    pub collinearity_threshold: f64,
    /// Append the per-unit risk-factor and private-care rates derived from
    /// the line list.
    pub line_list_aggregates: bool,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            id_column: "unit_id".into(),
            weight_column: Some("population".into()),
            skew_threshold: 1.0,
            top_k: 4,
            collinearity_threshold: 0.7,
            line_list_aggregates: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Laplace,
    Mcmc,
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "laplace" => Ok(EngineKind::Laplace),
            "mcmc" => Ok(EngineKind::Mcmc),
            _ => Err(format!("unknown engine `{s}` (expected laplace or mcmc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Covariates of the final model, by column name after preparation.
    pub covariates: Vec<String>,
    /// Use the covariates retained by `screen` instead of `covariates`.
    pub use_screened: bool,
    pub spatial: bool,
    pub unstructured: bool,
    pub engine: EngineKind,
    /// Random effects used in the bivariate screening fits.
    pub screening_spatial: bool,
    pub screening_unstructured: bool,
    pub priors: PriorSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            use_screened: false,
            spatial: true,
            unstructured: true,
            engine: EngineKind::Laplace,
            screening_spatial: true,
            screening_unstructured: true,
            priors: PriorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub classes: usize,
    pub title: String,
    pub width: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            title: "Posterior mean relative risk".into(),
            width: 800.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulateMode {
    /// Square lattice with a line list drawn from a known BYM2 risk surface.
    Lattice,
    /// Cohort matching the published aggregate counts and rates.
    PublishedMarginal,
    /// 1,594 irregular polygons of which 140 have no cases.
    Merge,
}

impl std::str::FromStr for SimulateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lattice" => Ok(SimulateMode::Lattice),
            "published-marginal" => Ok(SimulateMode::PublishedMarginal),
            "merge" => Ok(SimulateMode::Merge),
            _ => Err(format!(
                "unknown mode `{s}` (expected lattice, published-marginal or merge)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulateMode,
    pub rows: usize,
    pub cols: usize,
    /// Cell size in degrees.
    pub cell_deg: f64,
    pub origin: [f64; 2],
    /// Hospitalizations per unit, drawn uniformly from this range.
    pub hosp_min: u32,
    pub hosp_max: u32,
    pub beta0: f64,
    /// True log relative risks of the covariates `x1, x2, ...`.
    pub beta: Vec<f64>,
    /// Additional covariates unrelated to risk, `z1, z2, ...`.
    pub noise_covariates: usize,
    pub tau_b: f64,
    pub phi: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            mode: SimulateMode::Lattice,
            rows: 20,
            cols: 20,
            cell_deg: 0.01,
            origin: [-46.83, -23.75],
            hosp_min: 70,
            hosp_max: 180,
            beta0: 0.0,
            beta: vec![0.91f64.ln()],
            noise_covariates: 2,
            tau_b: 25.0,
            phi: 0.5,
        }
    }
}

impl RunConfig {
    /// Reads and validates a TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.paths.geometry,
            &mut self.paths.line_list,
            &mut self.paths.covariates,
            &mut self.paths.overlay,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.output);
    }

    pub fn validate(&self) -> Result<()> {
        if self.study.start > self.study.end {
            return Err(CliError::Config(format!(
                "study window starts ({}) after it ends ({})",
                self.study.start, self.study.end
            )));
        }
        AgeBands::new(self.study.age_bands.clone())?;
        if !(1..=9).contains(&self.map.classes) {
            return Err(CliError::Config(format!(
                "map.classes must be 1..=9, got {}",
                self.map.classes
            )));
        }
        if !(self.covariates.collinearity_threshold > 0.0
            && self.covariates.collinearity_threshold <= 1.0)
        {
            return Err(CliError::Config(
                "covariates.collinearity_threshold must be in (0, 1]".into(),
            ));
        }
        if self.covariates.top_k == 0 {
            return Err(CliError::Config("covariates.top_k must be positive".into()));
        }
        self.model.priors.validate()?;
        self.grid.validate()?;
        let s = &self.simulate;
        if s.rows == 0 || s.cols == 0 || s.hosp_min == 0 || s.hosp_min > s.hosp_max {
            return Err(CliError::Config(
                "simulate: rows, cols and hosp_min..=hosp_max must be positive".into(),
            ));
        }
        if !(s.tau_b > 0.0) || !(0.0..=1.0).contains(&s.phi) {
            return Err(CliError::Config(
                "simulate: tau_b > 0 and phi in [0, 1] required".into(),
            ));
        }
        if self.mcmc.chains == 0 || self.mcmc.iterations == 0 || self.mcmc.thin == 0 {
            return Err(CliError::Config(
                "mcmc: chains, iterations and thin must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn age_bands(&self) -> AgeBands {
        AgeBands::new(self.study.age_bands.clone()).expect("validated")
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.paths.output.join(name)
    }

    pub fn geometry_path(&self) -> PathBuf {
        self.paths
            .geometry
            .clone()
            .unwrap_or_else(|| self.output("geometry.geojson"))
    }

    pub fn line_list_path(&self) -> PathBuf {
        self.paths
            .line_list
            .clone()
            .unwrap_or_else(|| self.output("line_list.csv"))
    }

    pub fn covariates_path(&self) -> PathBuf {
        self.paths
            .covariates
            .clone()
            .unwrap_or_else(|| self.output("covariates.csv"))
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(json))
    }

    /// Seed of the generator owned by `stage`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
