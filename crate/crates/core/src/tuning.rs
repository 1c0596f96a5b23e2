//! Penalty paths, cross-validation and main-effect residualization.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfam::{fit_warm, lambda_max, CfamFit, FitOptions, Target};
use crate::design::{Covariates, TrialData};
use crate::error::{CfamError, Result};
use crate::lasso::{lasso_cv, log_grid, LassoFit, LassoOptions};
use crate::rng::{derive_seed, substream};
use crate::scalar::Real;

/// Default number of penalties on a path.
pub const DEFAULT_N_LAMBDA: usize = 20;

/// Ratio of the smallest to the largest penalty on a path.
pub const PATH_MIN_RATIO: f64 = 1e-3;

/// Cross-validation stops after this many penalties in a row fail to
/// improve on the best error so far.
pub const CV_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport<T> {
    /// Decreasing penalties.
    pub lambdas: Vec<T>,
    pub cv_error: Vec<T>,
    pub cv_se: Vec<T>,
    pub chosen: usize,
    /// Number of penalties actually evaluated; later entries are NaN.
    pub evaluated: usize,
}

impl<T: Real> CvReport<T> {
    pub fn chosen_lambda(&self) -> T {
        self.lambdas[self.chosen]
    }
}

/// Log-spaced penalties from [`lambda_max`] down to `1e-3` times it.
/// A degenerate outcome gives the single-point path `{0}`.
pub fn lambda_path<T: Real>(data: &TrialData<T>, n_lambda: usize, opts: &FitOptions<T>) -> Result<Vec<T>> {
    if n_lambda < 2 {
        return Err(CfamError::Config(format!("a penalty path needs at least 2 points, got {n_lambda}")));
    }
    let top = lambda_max(data, opts)?.to_f64_lossy();
    Ok(log_grid(top, PATH_MIN_RATIO, n_lambda)
        .into_iter()
        .map(T::lit)
        .collect())
}

/// Fits along a decreasing path, each fit warm-started from the previous.
pub fn fit_path<T: Real>(data: &TrialData<T>, path: &[T], opts: &FitOptions<T>) -> Result<Vec<CfamFit<T>>> {
    let mut fits: Vec<CfamFit<T>> = Vec::with_capacity(path.len());
    for &lam in path {
        let f = fit_warm(data, lam, opts, fits.last())?;
        fits.push(f);
    }
    Ok(fits)
}

/// Fold index of every subject; subjects of each arm are shuffled and dealt
/// round-robin so folds are balanced within arm.
pub fn stratified_folds(arms: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let n_arms = arms.iter().copied().max().unwrap_or(0);
    let mut rng = substream(seed, 0);
    let mut out = vec![0; arms.len()];
    let mut next = 0;
    for a in 1..=n_arms {
        let mut members: Vec<usize> = (0..arms.len()).filter(|&i| arms[i] == a).collect();
        members.shuffle(&mut rng);
        for i in members {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

fn column_for<T: Real>(target: Target, arm: usize) -> usize {
    match target {
        Target::Interaction => arm - 1,
        Target::MainEffect => 0,
    }
}

/// K-fold cross-validated prediction error along a decreasing `path`,
/// warm-starting each fold along the path.
///
/// Each training part is re-centered within arm; the held-out error is
/// `(y - training arm mean - predicted effect)^2` on the original outcome scale.
/// With `patience = Some(k)` the path is cut after `k` consecutive penalties
/// without improvement.
pub fn cross_validate<T: Real>(
    data: &TrialData<T>,
    folds: usize,
    path: &[T],
    opts: &FitOptions<T>,
    seed: u64,
    patience: Option<usize>,
) -> Result<CvReport<T>> {
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(CfamError::Config(format!("fold count must be in 2..={n}, got {folds}")));
    }
    if path.is_empty() {
        return Err(CfamError::Config("empty penalty path".into()));
    }
    let fold_of = stratified_folds(&data.arms, folds, seed);
    for k in 0..folds {
        for a in 1..=data.n_arms() {
            if !(0..n).any(|i| fold_of[i] != k && data.arms[i] == a) {
                return Err(CfamError::MissingArm { fold: k, arm: a });
            }
        }
    }
    let mut fold_opts = opts.clone();
    fold_opts.basis_dim = Some(opts.resolved_dim(n));
    let raw = data.raw_outcomes();

    struct FoldState<T> {
        train: TrialData<T>,
        test: Vec<usize>,
        test_cov: Covariates<T>,
        last: Option<CfamFit<T>>,
        errs: Vec<T>,
    }
    let mut states: Vec<FoldState<T>> = (0..folds)
        .map(|k| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            Ok(FoldState {
                train: data.subset(&train)?,
                test_cov: data.covariates.select(&test),
                test,
                last: None,
                errs: Vec::with_capacity(path.len()),
            })
        })
        .collect::<Result<_>>()?;

    let kf = T::from_usize_lossy(folds);
    let mut cv_error = vec![T::nan(); path.len()];
    let mut cv_se = vec![T::nan(); path.len()];
    let mut best = 0usize;
    let mut since_best = 0usize;
    for (l, &lam) in path.iter().enumerate() {
        states
            .par_iter_mut()
            .map(|st| {
                let f = fit_warm(&st.train, lam, &fold_opts, st.last.as_ref())?;
                let scores = f.predict_scores(&st.test_cov)?;
                let sse: T = st
                    .test
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        let a = data.arms[i];
                        let e = raw[i] - st.train.arm_means[a - 1] - scores[[r, column_for::<T>(f.target, a)]];
                        e * e
                    })
                    .sum();
                st.errs.push(sse / T::from_usize_lossy(st.test.len()));
                st.last = Some(f);
                Ok(())
            })
            .collect::<Result<()>>()?;
        let mean = states.iter().map(|st| st.errs[l]).sum::<T>() / kf;
        let var = states.iter().map(|st| (st.errs[l] - mean) * (st.errs[l] - mean)).sum::<T>() / (kf - T::one()).max(T::one());
        cv_error[l] = mean;
        cv_se[l] = (var / kf).sqrt();
        if mean < cv_error[best] {
            best = l;
            since_best = 0;
        } else if l > 0 {
            since_best += 1;
        }
        if patience.is_some_and(|p| since_best >= p) {
            log::debug!("cv stopped after {} of {} penalties", l + 1, path.len());
            break;
        }
    }
    let chosen = best;
    let evaluated = states[0].errs.len();
    Ok(CvReport {
        lambdas: path.to_vec(),
        cv_error,
        cv_se,
        chosen,
        evaluated,
    })
}

/// Builds the path on the full data, cross-validates it and refits at the
/// chosen penalty (warm-started along the path).
pub fn fit_cv<T: Real>(
    data: &TrialData<T>,
    folds: usize,
    n_lambda: usize,
    opts: &FitOptions<T>,
    seed: u64,
    patience: Option<usize>,
) -> Result<(CfamFit<T>, CvReport<T>)> {
    let mut opts = opts.clone();
    opts.basis_dim = Some(opts.resolved_dim(data.n()));
    let path = lambda_path(data, n_lambda, &opts)?;
    let report = cross_validate(data, folds, &path, &opts, seed, patience)?;
    let fit = fit_path(data, &path[..=report.chosen], &opts)?
        .pop()
        .expect("nonempty path");
    Ok((fit, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Lasso on curve averages and scalar covariates.
    Lasso,
    /// Sparse functional additive main-effect model.
    Fam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainEffectKind {
    LassoScalarSummary,
    FunctionalAdditive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MainEffectModel<T> {
    Lasso(LassoFit<T>),
    Additive(CfamFit<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffectFit<T> {
    pub kind: MainEffectKind,
    pub model: MainEffectModel<T>,
    pub training_mse: T,
}

/// Curve averages followed by scalar covariates.
pub fn summary_features<T: Real>(cov: &Covariates<T>) -> Array2<T> {
    let mut out = Array2::zeros((cov.n(), cov.p() + cov.q()));
    for (j, f) in cov.functional.iter().enumerate() {
        out.column_mut(j).assign(&f.grid_means());
    }
    for k in 0..cov.q() {
        out.column_mut(cov.p() + k).assign(&cov.scalars.column(k));
    }
    out
}

impl<T: Real> MainEffectFit<T> {
    pub fn predict(&self, cov: &Covariates<T>) -> Result<Array1<T>> {
        match &self.model {
            MainEffectModel::Lasso(l) => Ok(l.predict(summary_features(cov).view())),
            MainEffectModel::Additive(f) => Ok(f.predict_scores(cov)?.column(0).to_owned()),
        }
    }
}

/// Replaces `y` by residuals from a separately fitted main-effect model,
/// re-centered within arm. Arms, `pi` and covariates are untouched.
pub fn residualize<T: Real>(
    data: &TrialData<T>,
    kind: MainEffectKind,
    folds: usize,
    n_lambda: usize,
    opts: &FitOptions<T>,
    seed: u64,
) -> Result<(TrialData<T>, MainEffectFit<T>)> {
    let model = match kind {
        MainEffectKind::LassoScalarSummary => {
            let x = summary_features(&data.covariates);
            MainEffectModel::Lasso(lasso_cv(x.view(), data.y.view(), folds, seed, &LassoOptions::default())?)
        }
        MainEffectKind::FunctionalAdditive => {
            let mut me_opts = opts.clone();
            me_opts.target = Target::MainEffect;
            me_opts.linear_mode = false;
            MainEffectModel::Additive(fit_cv(data, folds, n_lambda, &me_opts, seed, Some(CV_PATIENCE))?.0)
        }
    };
    let mut fit = MainEffectFit {
        kind,
        model,
        training_mse: T::zero(),
    };
    let resid = &data.y - &fit.predict(&data.covariates)?;
    fit.training_mse = resid.iter().map(|&r| r * r).sum::<T>() / T::from_usize_lossy(data.n());
    Ok((data.with_outcome(resid)?, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions<T> {
    pub fit: FitOptions<T>,
    pub folds: usize,
    pub n_lambda: usize,
    pub augmentation: Augmentation,
    /// Fixed penalty; `None` selects it by cross-validation.
    pub lambda: Option<T>,
    /// See [`cross_validate`]; `None` evaluates the whole path.
    pub cv_patience: Option<usize>,
    pub seed: u64,
}

impl<T: Real> Default for PipelineOptions<T> {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            folds: 10,
            n_lambda: DEFAULT_N_LAMBDA,
            augmentation: Augmentation::None,
            lambda: None,
            cv_patience: Some(CV_PATIENCE),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFit<T> {
    pub fit: CfamFit<T>,
    pub cv: Option<CvReport<T>>,
    pub main_effect: Option<MainEffectFit<T>>,
}

/// Optional residualization, then a fixed-penalty or cross-validated fit.
pub fn fit_pipeline<T: Real>(data: &TrialData<T>, opts: &PipelineOptions<T>) -> Result<PipelineFit<T>> {
    let (work, main_effect) = match opts.augmentation {
        Augmentation::None => (data.clone(), None),
        Augmentation::Lasso | Augmentation::Fam => {
            let kind = if opts.augmentation == Augmentation::Lasso {
                MainEffectKind::LassoScalarSummary
            } else {
                MainEffectKind::FunctionalAdditive
            };
            let (d, m) = residualize(data, kind, opts.folds, opts.n_lambda, &opts.fit, derive_seed(opts.seed, 1))?;
            (d, Some(m))
        }
    };
    let (fit, cv) = match opts.lambda {
        Some(lam) => (crate::cfam::fit(&work, lam, &opts.fit)?, None),
        None => {
            let (f, r) = fit_cv(&work, opts.folds, opts.n_lambda, &opts.fit, derive_seed(opts.seed, 2), opts.cv_patience)?;
            (f, Some(r))
        }
    };
    Ok(PipelineFit { fit, cv, main_effect })
}
