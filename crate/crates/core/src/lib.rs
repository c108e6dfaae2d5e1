//! Generalized linear mixed models on balanced panel data, with an i.i.d.
//! individual random effect and an AR(1)-correlated time random effect shared
//! by all individuals.
//!
//! Two fitting strategies are provided:
//!
//! * [`ridge_em::fit`] — a ridge-penalized EM inside a linearization
//!   (Schall-style) outer loop, with the penalty re-selected each iteration by
//!   heteroscedastic generalized cross-validation;
//! * [`sc_em::fit_hd`] — a supervised-component regularized EM for
//!   high-dimensional, redundant regressor sets (p ≫ n), which replaces the
//!   ridge M-step for the fixed effects by the extraction of components that
//!   trade likelihood fit against structural relevance.
//!
//! [`simulate`] generates synthetic panels from the exact generative model and
//! runs seeded replicate studies (parameter recovery, iteration counts,
//! robustness across the AR(1) coefficient).
//!
//! All numeric code is generic over the [`Scalar`] float width; the `*64`
//! aliases below fix the common `f64` instantiations.

pub mod error;
pub mod inference;
pub mod linalg;
pub mod linearize;
pub mod model;
pub mod ridge_em;
pub mod scalar;
pub mod sc_em;
mod serde_arr;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use model::{
    ar1_covariance, build_designs, complete_loglik, linear_predictor, mean_response,
    random_effect_covariance, DesignSet, FamilyLink, ModelParams, PanelLayout, RandomEffectState,
};

pub use inference::{
    marginal_covariance, posterior_xi, ridge_gls_beta, GlsContext, HatMatrix, MarginalSolver,
    PosteriorMoments,
};

pub use linearize::{linearize, working_response, working_variance, WorkingModel};

pub use ridge_em::{fit, FitConfig, FitResult, PenaltyMask};

pub use sc_em::{build_component_basis, cv_tune, fit_hd, ComponentBasis, HdFitResult, ScConfig};

pub use simulate::{gen_ar1_path, gen_panel, run_study, SimSpec, StudyResult, StudySpec};

/// Concrete `f64` aliases for the main public types.
pub type ModelParams64 = model::ModelParams<f64>;
pub type FamilyLink64 = model::FamilyLink<f64>;
pub type DesignSet64 = model::DesignSet<f64>;
pub type RandomEffectState64 = model::RandomEffectState<f64>;
pub type WorkingModel64 = linearize::WorkingModel<f64>;
pub type FitConfig64 = ridge_em::FitConfig<f64>;
pub type FitResult64 = ridge_em::FitResult<f64>;
pub type ScConfig64 = sc_em::ScConfig<f64>;
pub type HdFitResult64 = sc_em::HdFitResult<f64>;
pub type SimSpec64 = simulate::SimSpec<f64>;
pub type StudySpec64 = simulate::StudySpec<f64>;
pub type StudyResult64 = simulate::StudyResult<f64>;
