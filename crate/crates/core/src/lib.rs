//! Constrained functional additive models for estimating individualized
//! treatment rules from functional and scalar baseline covariates.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! `*F64` aliases below fix the scalar for the common case.

pub mod basis;
pub mod cfam;
pub mod design;
pub mod error;
pub mod experiment;
pub mod itr;
pub mod lasso;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tuning;

pub use basis::{default_basis_dim, fourier4_eval, ComponentBasis, OrthoSplineBasis, SplineBasis};
pub use cfam::{
    fit, fit_warm, initial_coefficients, predict_interaction, soft_threshold_update, step1_backfit, step2_update_beta,
    CfamFit, ComponentFit, FitOptions, FunctionalComponent, IndexCoefficient, Target,
};
pub use design::{Covariates, FunctionalCovariate, Grid, TrialData};
pub use error::{CfamError, Result};
pub use experiment::{preset, run_experiment, ExperimentConfig, MetricRow, Method, Preset};
pub use itr::{value_ipw, value_monte_carlo, MonteCarloValue, OutcomeModel, Rule, ValueEstimate};
pub use scalar::Real;
pub use sim::{generate, rse, selection_metrics, InteractionKind, Scenario, Simulated, TruthBundle};
pub use tuning::{
    cross_validate, fit_cv, fit_path, fit_pipeline, lambda_path, residualize, Augmentation, CvReport, MainEffectFit,
    MainEffectKind, PipelineFit, PipelineOptions,
};

pub type GridF64 = Grid<f64>;
pub type CovariatesF64 = Covariates<f64>;
pub type TrialDataF64 = TrialData<f64>;
pub type FitOptionsF64 = FitOptions<f64>;
pub type CfamFitF64 = CfamFit<f64>;
pub type CvReportF64 = CvReport<f64>;
pub type PipelineOptionsF64 = PipelineOptions<f64>;
pub type PipelineFitF64 = PipelineFit<f64>;
pub type SimulatedF64 = Simulated<f64>;
pub type TrialDataF32 = TrialData<f32>;
pub type CfamFitF32 = CfamFit<f32>;
