//! Output document schemas. Every JSON artifact is versioned through a
//! `format_version` field and serialized with a fixed field order, so byte
//! output is deterministic for identical inputs.

use crate::config::{RunConfigFile, SimSpecFile};
use crate::data::Dataset;
use panel_glmm::sc_em::{CvSelection, HdFitResult};
use panel_glmm::simulate::PanelTruth;
use panel_glmm::{FitConfig64, FitResult64, ModelParams64};
use serde::Serialize;

#[derive(Serialize)]
pub struct FitJson {
    pub format_version: u32,
    pub command: &'static str,
    pub family: String,
    pub link: String,
    pub intercept: bool,
    pub n_individuals: usize,
    pub n_times: usize,
    pub n_rows: usize,
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    pub converged: bool,
    pub n_iter: usize,
    pub params: ModelParams64,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub lambda_path: Vec<f64>,
    pub gcv_path: Vec<f64>,
    pub gcv_curves: Vec<Vec<Option<f64>>>,
    pub trace: Vec<ModelParams64>,
    pub deviance_path: Vec<f64>,
    pub n_eta_clipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd: Option<HdJson>,
}

#[derive(Serialize)]
pub struct HdJson {
    pub s: f64,
    pub l: f64,
    pub n_components: usize,
    pub selected_by_cv: bool,
    pub alpha: f64,
    pub gammas: Vec<f64>,
    pub loadings_w: Vec<Vec<f64>>,
    pub variable_loadings: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_table: Option<Vec<CvRow>>,
}

#[derive(Serialize)]
pub struct CvRow {
    pub s: f64,
    pub l: f64,
    pub n_components: usize,
    pub fold: usize,
    pub deviance: Option<f64>,
}

pub fn fit_json(
    command: &'static str,
    file: &RunConfigFile,
    fit_config: &FitConfig64,
    dataset: &Dataset,
    result: &FitResult64,
    hd: Option<HdJson>,
) -> FitJson {
    FitJson {
        format_version: 1,
        command,
        family: file.family.clone(),
        link: file.link.clone(),
        intercept: file.intercept,
        n_individuals: dataset.layout.n_individuals(),
        n_times: dataset.layout.n_times(),
        n_rows: dataset.layout.n_rows(),
        feature_names: dataset.feature_names.clone(),
        ids: dataset.ids.clone(),
        converged: result.converged,
        n_iter: result.n_iter,
        params: result.params.clone(),
        xi1: result.xi_hat.xi1().to_vec(),
        xi2: result.xi_hat.xi2().to_vec(),
        lambda_grid: fit_config.lambda_grid.clone(),
        lambda_path: result.lambda_path.clone(),
        gcv_path: result.gcv_path.clone(),
        gcv_curves: result.gcv_curves.clone(),
        trace: result.trace.clone(),
        deviance_path: result.deviance_path.clone(),
        n_eta_clipped: result.n_eta_clipped,
        hd,
    }
}

pub fn hd_json(hd: &HdFitResult<f64>, selection: Option<CvSelection<f64>>) -> HdJson {
    HdJson {
        s: hd.components.s,
        l: hd.components.l,
        n_components: hd.components.n_components,
        selected_by_cv: selection.is_some(),
        alpha: hd.components.alpha,
        gammas: hd.components.gammas.clone(),
        loadings_w: hd.components.w.clone(),
        variable_loadings: hd.components.variable_loadings.clone(),
        warnings: hd.warnings.clone(),
        cv_table: selection.map(|sel| {
            sel.table
                .into_iter()
                .map(|r| CvRow {
                    s: r.s,
                    l: r.l,
                    n_components: r.n_components,
                    fold: r.fold,
                    deviance: r.deviance,
                })
                .collect()
        }),
    }
}

#[derive(Serialize)]
pub struct TruthJson {
    pub format_version: u32,
    pub family: String,
    pub link: String,
    pub n_individuals: usize,
    pub n_times: usize,
    pub intercept: bool,
    pub x_correlation: Option<f64>,
    pub seed: u64,
    pub params: ModelParams64,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
}

pub fn truth_json(file: &SimSpecFile, seed: u64, truth: &PanelTruth<f64>) -> TruthJson {
    TruthJson {
        format_version: 1,
        family: file.family.clone(),
        link: file.link.clone(),
        n_individuals: file.n_individuals,
        n_times: file.n_times,
        intercept: file.intercept,
        x_correlation: file.x_correlation,
        seed,
        params: truth.params.clone(),
        xi1: truth.xi.xi1().to_vec(),
        xi2: truth.xi.xi2().to_vec(),
    }
}
