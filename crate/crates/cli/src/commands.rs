use std::collections::BTreeMap;
use std::path::Path;

use cfam_core::experiment::preset;
use cfam_core::itr::decisions_from_scores;
use cfam_core::{fit_pipeline, run_experiment, CvReport, ExperimentConfig, MetricRow};

use crate::artifact::{ModelArtifact, SCHEMA_VERSION};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest, ingest_covariates, CovariateTable};

pub const MODEL_FILE: &str = "model.json";
pub const COMPONENTS_FILE: &str = "components.csv";
pub const GAMMA_FILE: &str = "gamma.csv";
pub const CV_FILE: &str = "cv.csv";
pub const DECISIONS_FILE: &str = "decisions.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_all<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let err = |e: csv::Error| CliError::Config(format!("cannot write {}: {e}", path.display()));
    let mut w = writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn component_names(a: &ModelArtifact) -> Vec<String> {
    a.functional_names.iter().chain(&a.scalar_names).cloned().collect()
}

fn write_cv(path: &Path, cv: &CvReport<f64>) -> CliResult<()> {
    let rows = (0..cv.lambdas.len()).map(|i| {
        vec![
            i.to_string(),
            num(cv.lambdas[i]),
            num(cv.cv_error[i]),
            num(cv.cv_se[i]),
            (i < cv.evaluated).to_string(),
            (i == cv.chosen).to_string(),
        ]
    });
    write_all(path, &["lambda_index", "lambda", "cv_error", "cv_se", "evaluated", "chosen"], rows)
}

fn write_summary(dir: &Path, a: &ModelArtifact) -> CliResult<()> {
    let names = component_names(a);
    let fit = &a.fit;
    let comps = fit.functional.iter().map(|f| (&f.component, "functional")).chain(fit.scalar.iter().map(|c| (c, "scalar")));
    let rows: Vec<Vec<String>> = comps
        .zip(&names)
        .map(|((c, kind), name)| vec![name.clone(), kind.to_string(), c.active.to_string(), num(c.shrinkage), c.basis.dim().to_string()])
        .collect();
    write_all(&dir.join(COMPONENTS_FILE), &["component", "kind", "active", "shrinkage", "basis_dim"], rows)?;
    let gamma = fit.functional.iter().zip(&a.functional_names).flat_map(|(f, name)| {
        f.beta
            .gamma
            .iter()
            .enumerate()
            .map(|(k, g)| vec![name.clone(), k.to_string(), num(*g)])
            .collect::<Vec<_>>()
    });
    write_all(&dir.join(GAMMA_FILE), &["component", "coef_index", "gamma"], gamma)
}

fn write_predictions(dir: &Path, a: &ModelArtifact, table: &CovariateTable) -> CliResult<Vec<usize>> {
    let scores = a.fit.predict_scores(&table.covariates)?;
    let decisions = decisions_from_scores(scores.view());
    write_all(
        &dir.join(DECISIONS_FILE),
        &["id", "decision"],
        table.ids.iter().zip(&decisions).map(|(id, &d)| vec![id.clone(), a.arm_labels[d - 1].clone()]),
    )?;
    let rows = table.ids.iter().enumerate().flat_map(|(i, id)| {
        a.arm_labels
            .iter()
            .enumerate()
            .map(|(k, label)| vec![id.clone(), label.clone(), num(scores[[i, k]])])
            .collect::<Vec<_>>()
    });
    write_all(&dir.join(SCORES_FILE), &["id", "arm", "score"], rows)?;
    Ok(decisions)
}

/// Fits a model and writes the artifact, component summary, CV curve (when
/// the penalty was cross-validated) and in-sample decisions.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<ModelArtifact> {
    let ing = ingest(cfg.require_data_dir()?)?;
    log::info!(
        "fitting {} subjects, {} arms, {} functional and {} scalar covariates",
        ing.data.n(),
        ing.data.n_arms(),
        ing.table.functional_names.len(),
        ing.table.scalar_names.len()
    );
    let pf = fit_pipeline(&ing.data, &cfg.pipeline_options())?;
    let artifact = ModelArtifact {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        fit: pf.fit,
        arm_labels: ing.arm_labels.clone(),
        arm_means: ing.data.arm_means.clone(),
        functional_names: ing.table.functional_names.clone(),
        scalar_names: ing.table.scalar_names.clone(),
        n_train: ing.data.n(),
        main_effect: pf.main_effect,
        cv_chosen: pf.cv.as_ref().map(|c| c.chosen),
        config: cfg.clone(),
    };
    let dir = out_dir(cfg)?;
    artifact.save(&dir.join(MODEL_FILE))?;
    write_summary(dir, &artifact)?;
    if let Some(cv) = &pf.cv {
        write_cv(&dir.join(CV_FILE), cv)?;
    }
    write_predictions(dir, &artifact, &ing.table)?;
    log::info!(
        "lambda {:.4e}, {} active components, {} outer iterations",
        artifact.fit.lambda,
        artifact.fit.n_active(),
        artifact.fit.outer_iterations
    );
    Ok(artifact)
}

/// Cross-validates the penalty path and writes the CV curve.
pub fn cmd_cv(cfg: &RunConfig) -> CliResult<CvReport<f64>> {
    let ing = ingest(cfg.require_data_dir()?)?;
    if cfg.lambda.is_some() {
        log::warn!("cv ignores the fixed lambda");
    }
    let mut opts = cfg.pipeline_options();
    opts.lambda = None;
    let pf = fit_pipeline(&ing.data, &opts)?;
    let cv = pf.cv.expect("cross-validated pipeline reports its curve");
    write_cv(&out_dir(cfg)?.join(CV_FILE), &cv)?;
    log::info!("chosen lambda {:.4e} (index {})", cv.chosen_lambda(), cv.chosen);
    Ok(cv)
}

/// Scores new subjects with a saved model.
pub fn cmd_predict(cfg: &RunConfig) -> CliResult<Vec<usize>> {
    let path = cfg
        .model
        .as_deref()
        .ok_or_else(|| CliError::Config("no model artifact given (--model or model)".into()))?;
    let artifact = ModelArtifact::load(path)?;
    let table = ingest_covariates(cfg.require_data_dir()?)?;
    if table.functional_names != artifact.functional_names || table.scalar_names != artifact.scalar_names {
        return Err(CliError::Data(format!(
            "covariates do not match the model: expected functional {:?} and scalar {:?}, found {:?} and {:?}",
            artifact.functional_names, artifact.scalar_names, table.functional_names, table.scalar_names
        )));
    }
    for (name, (f, g)) in artifact.functional_names.iter().zip(table.covariates.functional.iter().zip(&artifact.fit.grids)) {
        if f.grid != *g {
            return Err(CliError::Data(format!("functional_{name}.csv: grid differs from the training grid")));
        }
    }
    let decisions = write_predictions(out_dir(cfg)?, &artifact, &table)?;
    log::info!("scored {} subjects", decisions.len());
    Ok(decisions)
}

/// Runs a named simulation preset and writes tidy and summarized results.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Vec<MetricRow>> {
    let name = cfg
        .preset
        .as_deref()
        .ok_or_else(|| CliError::Config("no preset given (--preset or preset)".into()))?;
    let p = preset(name)?;
    let reps = cfg.reps.unwrap_or(p.reps_desk);
    let exp = ExperimentConfig {
        master_seed: cfg.seed,
        n_mc: cfg.n_mc,
        folds: cfg.folds,
        n_lambda: cfg.n_lambda,
        fit: cfg.fit_options(),
    };
    log::info!("preset {name}: {} scenarios x {reps} reps x {} methods", p.scenarios.len(), p.methods.len());
    let rows = run_experiment::<f64>(&p.scenarios, reps, &p.methods, &exp)?;
    let dir = out_dir(cfg)?;
    write_all(
        &dir.join(RESULTS_FILE),
        &["scenario_id", "method", "rep", "n", "delta", "xi", "metric", "value"],
        rows.iter().map(|r| {
            vec![
                r.scenario_id.clone(),
                r.method.clone(),
                r.rep.to_string(),
                r.n.to_string(),
                r.delta.to_string(),
                r.xi.to_string(),
                r.metric.clone(),
                num(r.value),
            ]
        }),
    )?;
    write_all(
        &dir.join(SUMMARY_FILE),
        &["scenario_id", "method", "n", "delta", "xi", "metric", "mean", "sd", "reps"],
        summarize(&rows),
    )?;
    Ok(rows)
}

/// Mean, standard deviation and count of finite values per
/// (scenario, method, metric), in first-seen order.
fn summarize(rows: &[MetricRow]) -> Vec<Vec<String>> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, String), (usize, &MetricRow, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario_id.clone(), r.method.clone(), r.metric.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (order.len(), r, Vec::new())
        });
        if r.value.is_finite() {
            entry.2.push(r.value);
        }
    }
    let mut out: Vec<(usize, Vec<String>)> = groups
        .into_values()
        .map(|(pos, r, vals)| {
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            (
                pos,
                vec![
                    r.scenario_id.clone(),
                    r.method.clone(),
                    r.n.to_string(),
                    r.delta.to_string(),
                    r.xi.to_string(),
                    r.metric.clone(),
                    num(mean),
                    num(sd),
                    vals.len().to_string(),
                ],
            )
        })
        .collect();
    out.sort_by_key(|(pos, _)| *pos);
    out.into_iter().map(|(_, r)| r).collect()
}
