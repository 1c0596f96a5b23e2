use std::path::{Path, PathBuf};

use cfam_core::{Augmentation, FitOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Settings shared by every command. Loaded from TOML; command-line flags
/// override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input directory (`outcome.csv`, `scalars.csv`, `functional_<name>.csv`).
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Model artifact read by `predict`.
    pub model: Option<PathBuf>,
    /// Fixed penalty; cross-validation when absent.
    pub lambda: Option<f64>,
    pub folds: usize,
    pub n_lambda: usize,
    /// `None` uses `round(4 + (2n)^(1/5))`.
    pub basis_dim: Option<usize>,
    pub inner_tol: f64,
    pub outer_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub objective_tol: f64,
    pub step_halvings: usize,
    /// Stop the penalty path after this many penalties without CV improvement; 0 walks the whole path.
    pub cv_patience: usize,
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    pub augment: Augmentation,
    pub linear_mode: bool,
    pub preset: Option<String>,
    /// Simulation replications; the preset's desk-scale count when absent.
    pub reps: Option<usize>,
    /// Fresh draws per Monte Carlo value.
    pub n_mc: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitOptions::<f64>::default();
        Self {
            data_dir: None,
            out_dir: PathBuf::from("cfam_out"),
            model: None,
            lambda: None,
            folds: 10,
            n_lambda: cfam_core::tuning::DEFAULT_N_LAMBDA,
            basis_dim: fit.basis_dim,
            inner_tol: fit.inner_tol,
            outer_tol: fit.outer_tol,
            max_inner: fit.max_inner,
            max_outer: fit.max_outer,
            objective_tol: fit.objective_tol,
            step_halvings: fit.step_halvings,
            cv_patience: cfam_core::tuning::CV_PATIENCE,
            seed: 0,
            threads: None,
            augment: Augmentation::None,
            linear_mode: false,
            preset: None,
            reps: None,
            n_mc: 1000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.n_lambda < 2 {
            return bad(format!("n_lambda must be at least 2, got {}", self.n_lambda));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("lambda must be finite and >= 0, got {l}"));
            }
        }
        if self.basis_dim.is_some_and(|d| d < 4) {
            return bad("basis_dim must be at least 4".into());
        }
        for (name, v) in [("inner_tol", self.inner_tol), ("outer_tol", self.outer_tol), ("objective_tol", self.objective_tol)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return bad("max_inner and max_outer must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        if self.n_mc == 0 {
            return bad("n_mc must be positive".into());
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions<f64> {
        FitOptions {
            basis_dim: self.basis_dim,
            linear_mode: self.linear_mode,
            inner_tol: self.inner_tol,
            outer_tol: self.outer_tol,
            max_inner: self.max_inner,
            max_outer: self.max_outer,
            objective_tol: self.objective_tol,
            step_halvings: self.step_halvings,
            ..Default::default()
        }
    }

    pub fn pipeline_options(&self) -> cfam_core::PipelineOptions<f64> {
        cfam_core::PipelineOptions {
            fit: self.fit_options(),
            folds: self.folds,
            n_lambda: self.n_lambda,
            augmentation: self.augment,
            lambda: self.lambda,
            cv_patience: (self.cv_patience > 0).then_some(self.cv_patience),
            seed: self.seed,
        }
    }

    pub fn require_data_dir(&self) -> CliResult<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no data directory given (--data or data_dir)".into()))
    }
}
