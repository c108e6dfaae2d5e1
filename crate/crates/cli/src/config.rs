//! JSON configuration schemas. Unknown keys are rejected everywhere, and every
//! file is validated before any computation starts.

use crate::CliError;
use panel_glmm::ridge_em::{default_lambda_grid, PenaltyMask};
use panel_glmm::{FamilyLink64, FitConfig64, ModelParams64, ScConfig64};
use serde::{Deserialize, Serialize};

fn default_format_version() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

fn default_dispersion() -> f64 {
    1.0
}

/// Either an explicit list of penalties or a log-spaced specification.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum LambdaGridSpec {
    Explicit(Vec<f64>),
    LogSpaced {
        min: f64,
        max: f64,
        points: usize,
        #[serde(default = "default_true")]
        include_zero: bool,
    },
}

impl LambdaGridSpec {
    pub fn resolve(&self) -> Result<Vec<f64>, CliError> {
        match self {
            LambdaGridSpec::Explicit(values) => {
                if values.is_empty() {
                    return Err(CliError::config("lambda_grid must be nonempty"));
                }
                Ok(values.clone())
            }
            LambdaGridSpec::LogSpaced {
                min,
                max,
                points,
                include_zero,
            } => {
                if *points < 2 || !(min > &0.0) || max <= min {
                    return Err(CliError::config(
                        "log-spaced lambda grid needs 0 < min < max and points >= 2",
                    ));
                }
                let mut grid = if *include_zero { vec![0.0] } else { Vec::new() };
                let (lmin, lmax) = (min.log10(), max.log10());
                for i in 0..*points {
                    let e = lmin + (lmax - lmin) * i as f64 / (*points - 1) as f64;
                    grid.push(10f64.powf(e));
                }
                Ok(grid)
            }
        }
    }
}

/// Numeric settings of the outer loop, shared by every command.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub lambda_grid: Option<LambdaGridSpec>,
    pub max_outer_iter: usize,
    pub inner_em_iter: usize,
    pub tol: f64,
    pub rho_grid_points: usize,
    pub rho_refine_tol: f64,
    pub penalize_intercept: bool,
    /// Explicit per-coefficient penalty weights (overrides the intercept rule).
    pub penalty_mask: Option<Vec<f64>>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            max_outer_iter: 200,
            inner_em_iter: 1,
            tol: 1e-6,
            rho_grid_points: 201,
            rho_refine_tol: 1e-9,
            penalize_intercept: false,
            penalty_mask: None,
        }
    }
}

impl FitSettings {
    pub fn to_core(&self, intercept: bool) -> Result<FitConfig64, CliError> {
        let lambda_grid = match &self.lambda_grid {
            Some(spec) => spec.resolve()?,
            None => default_lambda_grid(),
        };
        let penalty = match &self.penalty_mask {
            Some(mask) => PenaltyMask::Custom(mask.clone()),
            None => {
                if intercept && !self.penalize_intercept {
                    PenaltyMask::UnpenalizedFirstColumn
                } else {
                    PenaltyMask::PenalizeAll
                }
            }
        };
        let config = FitConfig64 {
            lambda_grid,
            max_outer_iter: self.max_outer_iter,
            inner_em_iter: self.inner_em_iter,
            tol: self.tol,
            rho_grid_points: self.rho_grid_points,
            rho_refine_tol: self.rho_refine_tol,
            penalty,
        };
        config.validate().map_err(CliError::config_from)?;
        Ok(config)
    }
}

/// Supervised-component settings. Grids default to singletons of the active
/// values; more than one candidate triggers cross-validation.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScSettings {
    pub s: f64,
    pub l: f64,
    pub n_components: usize,
    pub cv_folds: usize,
    pub s_grid: Option<Vec<f64>>,
    pub l_grid: Option<Vec<f64>>,
    pub k_grid: Option<Vec<usize>>,
    pub n_restarts: usize,
    pub max_opt_iter: usize,
    pub opt_tol: f64,
}

impl Default for ScSettings {
    fn default() -> Self {
        Self {
            s: 0.5,
            l: 1.0,
            n_components: 2,
            cv_folds: 5,
            s_grid: None,
            l_grid: None,
            k_grid: None,
            n_restarts: 20,
            max_opt_iter: 300,
            opt_tol: 1e-8,
        }
    }
}

impl ScSettings {
    pub fn to_core(&self, seed: u64) -> Result<ScConfig64, CliError> {
        let config = ScConfig64 {
            s: self.s,
            l: self.l,
            n_components: self.n_components,
            cv_folds: self.cv_folds,
            s_grid: self.s_grid.clone().unwrap_or_else(|| vec![self.s]),
            l_grid: self.l_grid.clone().unwrap_or_else(|| vec![self.l]),
            k_grid: self
                .k_grid
                .clone()
                .unwrap_or_else(|| vec![self.n_components]),
            n_restarts: self.n_restarts,
            max_opt_iter: self.max_opt_iter,
            opt_tol: self.opt_tol,
            seed,
        };
        config.validate().map_err(CliError::config_from)?;
        Ok(config)
    }

    pub fn n_candidates(&self) -> usize {
        self.s_grid.as_ref().map_or(1, Vec::len)
            * self.l_grid.as_ref().map_or(1, Vec::len)
            * self.k_grid.as_ref().map_or(1, Vec::len)
    }
}

fn parse_family(family: &str, link: &str, dispersion: f64) -> Result<FamilyLink64, CliError> {
    match (family, link) {
        ("poisson", "log") => Ok(FamilyLink64::PoissonLog),
        ("gaussian", "identity") => {
            if !(dispersion > 0.0) {
                return Err(CliError::config("dispersion must be > 0"));
            }
            Ok(FamilyLink64::GaussianIdentity { dispersion })
        }
        _ => Err(CliError::config(format!(
            "unsupported family/link pair: {family}/{link} \
             (supported: poisson/log, gaussian/identity)"
        ))),
    }
}

/// Top-level configuration for `fit` and `fit-hd`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub family: String,
    pub link: String,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub sc: Option<ScSettings>,
}

impl RunConfigFile {
    pub fn family_link(&self) -> Result<FamilyLink64, CliError> {
        parse_family(&self.family, &self.link, self.dispersion)
    }
}

/// Simulation specification for `simulate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpecFile {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub n_individuals: usize,
    pub n_times: usize,
    pub family: String,
    pub link: String,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    pub beta: Vec<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub x_correlation: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpecFile {
    pub fn family_link(&self) -> Result<FamilyLink64, CliError> {
        parse_family(&self.family, &self.link, self.dispersion)
    }

    pub fn to_core(&self, seed: u64) -> Result<panel_glmm::SimSpec64, CliError> {
        let layout = panel_glmm::PanelLayout::new(self.n_individuals, self.n_times)
            .map_err(CliError::config_from)?;
        let n_features = self
            .beta
            .len()
            .checked_sub(usize::from(self.intercept))
            .ok_or_else(|| CliError::config("beta must cover the intercept"))?;
        let params = ModelParams64::new(
            ndarray::Array1::from_vec(self.beta.clone()),
            self.sigma1_sq,
            self.sigma2_sq,
            self.rho,
        )
        .map_err(CliError::config_from)?;
        let spec = panel_glmm::SimSpec64 {
            layout,
            params,
            family: self.family_link()?,
            x_gen: panel_glmm::simulate::XGenerator {
                n_features,
                intercept: self.intercept,
                pairwise_correlation: self.x_correlation,
            },
            seed,
        };
        spec.validate().map_err(CliError::config_from)?;
        Ok(spec)
    }
}

/// One study cell: panel dimensions with optional per-cell parameter overrides
/// (a ρ sweep overrides `rho`, usually together with `sigma2_sq`).
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCellFile {
    pub n_individuals: usize,
    pub n_times: usize,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub sigma1_sq: Option<f64>,
    #[serde(default)]
    pub sigma2_sq: Option<f64>,
}

/// Study specification for `study`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub flavor: String,
    pub family: String,
    pub link: String,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    pub beta: Vec<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub x_correlation: Option<f64>,
    pub cells: Vec<StudyCellFile>,
    pub n_replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub sc: Option<ScSettings>,
}

impl StudyFile {
    pub fn to_core(&self, seed: u64) -> Result<panel_glmm::StudySpec64, CliError> {
        let family = parse_family(&self.family, &self.link, self.dispersion)?;
        let flavor = match self.flavor.as_str() {
            "ridge" => panel_glmm::simulate::StudyFlavor::Ridge,
            "supervised-component" => panel_glmm::simulate::StudyFlavor::SupervisedComponent,
            other => {
                return Err(CliError::config(format!(
                    "unknown study flavor {other:?} (expected \"ridge\" or \"supervised-component\")"
                )))
            }
        };
        let n_features = self
            .beta
            .len()
            .checked_sub(usize::from(self.intercept))
            .ok_or_else(|| CliError::config("beta must cover the intercept"))?;
        let mut cells = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let layout = panel_glmm::PanelLayout::new(cell.n_individuals, cell.n_times)
                .map_err(CliError::config_from)?;
            let params = ModelParams64::new(
                ndarray::Array1::from_vec(self.beta.clone()),
                cell.sigma1_sq.unwrap_or(self.sigma1_sq),
                cell.sigma2_sq.unwrap_or(self.sigma2_sq),
                cell.rho.unwrap_or(self.rho),
            )
            .map_err(CliError::config_from)?;
            cells.push(panel_glmm::simulate::StudyCell { layout, params });
        }
        let spec = panel_glmm::StudySpec64 {
            cells,
            n_replicates: self.n_replicates,
            flavor,
            family,
            x_gen: panel_glmm::simulate::XGenerator {
                n_features,
                intercept: self.intercept,
                pairwise_correlation: self.x_correlation,
            },
            fit_config: self.fit.to_core(self.intercept)?,
            sc_config: match &self.sc {
                Some(sc) => Some(sc.to_core(seed)?),
                None => None,
            },
            master_seed: seed,
        };
        spec.validate().map_err(CliError::config_from)?;
        Ok(spec)
    }
}

/// Parses a JSON config file, mapping every failure to a config violation.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
}

pub fn check_version(format_version: u32) -> Result<(), CliError> {
    if format_version != 1 {
        return Err(CliError::config(format!(
            "unsupported format_version {format_version} (this build reads version 1)"
        )));
    }
    Ok(())
}
