//! Replicated simulation experiments producing tidy metric rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfam::{FitOptions, Target};
use crate::error::{CfamError, Result};
use crate::itr::{value_monte_carlo, Rule};
use crate::rng::derive_seed;
use crate::scalar::Real;
use crate::sim::{generate, rse, selection_metrics, InteractionKind, Scenario};
use crate::tuning::{fit_pipeline, Augmentation, PipelineOptions, DEFAULT_N_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Spline components, lasso main-effect residualization.
    Cfam,
    /// Spline components, functional additive main-effect residualization.
    CfamMu,
    /// Affine components, lasso main-effect residualization.
    CfamLin,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cfam => "cfam",
            Method::CfamMu => "cfam_mu",
            Method::CfamLin => "cfam_lin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cfam" => Ok(Method::Cfam),
            "cfam_mu" => Ok(Method::CfamMu),
            "cfam_lin" => Ok(Method::CfamLin),
            other => Err(CfamError::Config(format!("unknown method {other:?}"))),
        }
    }

    fn augmentation(self) -> Augmentation {
        match self {
            Method::CfamMu => Augmentation::Fam,
            _ => Augmentation::Lasso,
        }
    }
}

/// One tidy output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub method: String,
    pub rep: usize,
    pub n: usize,
    pub delta: f64,
    pub xi: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Size of the fresh sample used to compute values.
    pub n_mc: usize,
    pub folds: usize,
    pub n_lambda: usize,
    /// Solver settings; `linear_mode` and `target` are set per method.
    pub fit: FitOptions<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            n_mc: 1000,
            folds: 10,
            n_lambda: DEFAULT_N_LAMBDA,
            fit: FitOptions::default(),
        }
    }
}

/// Named scenario grid with its method list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub reps_full: usize,
    pub reps_desk: usize,
}

pub const PRESET_NAMES: [&str; 5] = ["table1", "figure1", "figure3", "table_s2", "appendix_a5"];

fn grid_of(ns: &[usize], deltas: &[f64], xis: &[f64], kind: InteractionKind) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &xi in xis {
        for &delta in deltas {
            for &n in ns {
                out.push(Scenario::standard(n, delta, xi, kind));
            }
        }
    }
    out
}

pub fn preset(name: &str) -> Result<Preset> {
    use InteractionKind::*;
    let (scenarios, methods) = match name {
        "table1" => (grid_of(&[250, 500, 1000], &[1.0, 2.0], &[0.0], Nonlinear), vec![Method::Cfam]),
        "figure1" => (
            grid_of(&[250, 500], &[1.0, 2.0], &[0.0, 1.0], Nonlinear),
            vec![Method::Cfam, Method::CfamLin],
        ),
        "figure3" => (
            grid_of(&[50, 100, 200, 300, 400, 500, 600, 700, 800], &[1.0, 2.0], &[0.0, 1.0], Nonlinear),
            vec![Method::Cfam],
        ),
        "table_s2" => (
            grid_of(&[250, 500, 1000], &[1.0, 2.0], &[0.0], Nonlinear),
            vec![Method::Cfam, Method::CfamMu],
        ),
        "appendix_a5" => (
            grid_of(&[250, 500], &[1.0, 2.0], &[0.0, 1.0], Linear),
            vec![Method::Cfam, Method::CfamLin],
        ),
        other => {
            return Err(CfamError::Config(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        scenarios,
        methods,
        reps_full: 200,
        reps_desk: 20,
    })
}

fn pipeline_options<T: Real>(method: Method, cfg: &ExperimentConfig, seed: u64) -> PipelineOptions<T> {
    PipelineOptions {
        fit: FitOptions {
            linear_mode: method == Method::CfamLin,
            target: Target::Interaction,
            ..cfg.fit.cast()
        },
        folds: cfg.folds,
        n_lambda: cfg.n_lambda,
        augmentation: method.augmentation(),
        lambda: None,
        cv_patience: Some(crate::tuning::CV_PATIENCE),
        seed,
    }
}

/// Metrics of one method on one replication.
fn run_method<T: Real>(sim: &crate::sim::Simulated<T>, method: Method, cfg: &ExperimentConfig, fit_seed: u64, mc_seed: u64) -> Result<Vec<(String, f64)>> {
    let opts = pipeline_options::<T>(method, cfg, fit_seed);
    let pf = fit_pipeline(&sim.data, &opts)?;
    let fit = &pf.fit;
    let rule = Rule::new(fit)?;
    let mc = value_monte_carlo(&rule, &sim.model, cfg.n_mc, mc_seed)?;
    let (tpr, fpr) = selection_metrics(fit, &sim.truth);
    let grid = &sim.truth.grid;
    let mut out = vec![
        ("rse_beta1".to_string(), rse(&fit.functional[0].beta, &sim.truth.beta1, grid).to_f64_lossy()),
        ("rse_beta2".to_string(), rse(&fit.functional[1].beta, &sim.truth.beta2, grid).to_f64_lossy()),
        ("value".to_string(), mc.value.to_f64_lossy()),
        ("optimal_value".to_string(), mc.optimal_value.to_f64_lossy()),
        ("regret".to_string(), mc.regret.to_f64_lossy()),
        ("normalized_regret".to_string(), mc.normalized_regret.to_f64_lossy()),
        ("tpr".to_string(), tpr),
        ("fpr".to_string(), fpr),
        ("n_active".to_string(), fit.n_active() as f64),
        ("lambda".to_string(), fit.lambda.to_f64_lossy()),
        ("outer_iterations".to_string(), fit.outer_iterations as f64),
        ("converged".to_string(), if fit.converged { 1.0 } else { 0.0 }),
    ];
    if let Some(cv) = &pf.cv {
        out.push(("cv_chosen_index".to_string(), cv.chosen as f64));
    }
    for (j, c) in sim.truth.eta_coef.iter().enumerate() {
        for (r, v) in c.iter().enumerate() {
            out.push((format!("eta{}_c{}", j + 1, r + 1), v.to_f64_lossy()));
        }
    }
    Ok(out)
}

fn error_tag(e: &CfamError) -> &'static str {
    match e {
        CfamError::Input(_) => "input",
        CfamError::Config(_) => "config",
        CfamError::MissingArm { .. } => "missing_arm",
        CfamError::NoOverlap => "no_overlap",
        CfamError::Numerical { .. } => "numerical",
    }
}

/// Runs every (scenario, replication, method) combination and returns tidy
/// rows ordered by scenario, replication, method and metric. Replications
/// run in parallel on independent random streams, so the output depends
/// only on the inputs and `cfg.master_seed`. A failing replication yields a
/// single `error:<kind>` row with a NaN value.
pub fn run_experiment<T: Real>(scenarios: &[Scenario], reps: usize, methods: &[Method], cfg: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    for s in scenarios {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| (0..reps).map(move |r| (s, r)))
        .collect();
    let blocks: Vec<Vec<MetricRow>> = jobs
        .par_iter()
        .map(|&(si, rep)| {
            let base = &scenarios[si];
            let stream = ((si as u64) << 32) | rep as u64;
            let rep_seed = derive_seed(cfg.master_seed, stream);
            let mut scen = base.clone();
            scen.seed = derive_seed(rep_seed, 0);
            let row = |method: Method, metric: String, value: f64| MetricRow {
                scenario_id: base.id.clone(),
                method: method.name().to_string(),
                rep,
                n: base.n,
                delta: base.delta,
                xi: base.xi,
                metric,
                value,
            };
            let mut rows = Vec::new();
            let sim = generate::<T>(&scen);
            for &m in methods {
                let result = sim
                    .as_ref()
                    .map_err(Clone::clone)
                    .and_then(|s| run_method(s, m, cfg, derive_seed(rep_seed, 1), derive_seed(rep_seed, 2)));
                match result {
                    Ok(metrics) => rows.extend(metrics.into_iter().map(|(k, v)| row(m, k, v))),
                    Err(e) => {
                        log::warn!("{} rep {rep} {}: {e}", base.id, m.name());
                        rows.push(row(m, format!("error:{}", error_tag(&e)), f64::NAN));
                    }
                }
            }
            rows
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Mean of `metric` over replications for one scenario and method,
/// skipping NaN values.
pub fn mean_metric(rows: &[MetricRow], scenario_id: &str, method: Method, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.scenario_id == scenario_id && r.method == method.name() && r.metric == metric && r.value.is_finite())
        .map(|r| r.value)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert!(!p.scenarios.is_empty());
            assert_eq!(p.reps_desk, 20);
        }
        assert!(preset("nope").is_err());
    }
}
