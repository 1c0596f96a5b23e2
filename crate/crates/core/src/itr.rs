//! Treatment rules derived from a fitted model, and their values.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfam::{predict_interaction, CfamFit, Target};
use crate::design::{Covariates, TrialData};
use crate::error::{CfamError, Result};
use crate::rng::substream;
use crate::scalar::Real;

/// 1-based arm with the largest score; ties go to the lowest label.
pub fn argmax_arm<T: Real>(scores: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (a, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = a;
        }
    }
    best + 1
}

/// Row-wise [`argmax_arm`].
pub fn decisions_from_scores<T: Real>(scores: ArrayView2<'_, T>) -> Vec<usize> {
    scores.rows().into_iter().map(argmax_arm).collect()
}

/// The decision map `x, z -> argmax_a sum of fitted interaction components`.
#[derive(Debug, Clone, Copy)]
pub struct Rule<'a, T> {
    pub fit: &'a CfamFit<T>,
}

impl<'a, T: Real> Rule<'a, T> {
    pub fn new(fit: &'a CfamFit<T>) -> Result<Self> {
        if fit.target != Target::Interaction {
            return Err(CfamError::Input("a treatment rule needs an interaction model".into()));
        }
        Ok(Self { fit })
    }

    pub fn n_arms(&self) -> usize {
        self.fit.pi.len()
    }

    /// Decision for one subject.
    pub fn decide(&self, x_new: &[ArrayView1<'_, T>], z_new: ArrayView1<'_, T>) -> Result<usize> {
        let mut best = 1;
        let mut best_score = predict_interaction(self.fit, x_new, z_new, 1)?;
        for a in 2..=self.n_arms() {
            let s = predict_interaction(self.fit, x_new, z_new, a)?;
            if s > best_score {
                best = a;
                best_score = s;
            }
        }
        Ok(best)
    }

    /// Decisions for every subject of `cov`.
    pub fn decide_all(&self, cov: &Covariates<T>) -> Result<Vec<usize>> {
        Ok(decisions_from_scores(self.fit.predict_scores(cov)?.view()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    Ipw,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate<T> {
    pub value: T,
    /// Number of concordant subjects (IPW) or draws (Monte Carlo).
    pub n_effective: T,
    pub method: ValueMethod,
}

/// Mean outcome among test subjects whose assigned arm equals the decision,
/// on the uncentered outcome scale.
pub fn value_ipw_decisions<T: Real>(decisions: &[usize], test: &TrialData<T>) -> Result<ValueEstimate<T>> {
    if decisions.len() != test.n() {
        return Err(CfamError::Input("one decision per test subject is required".into()));
    }
    let raw = test.raw_outcomes();
    let mut sum = T::zero();
    let mut count = 0usize;
    for ((&d, &a), &y) in decisions.iter().zip(&test.arms).zip(raw.iter()) {
        if d == a {
            sum += y;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CfamError::NoOverlap);
    }
    let c = T::from_usize_lossy(count);
    Ok(ValueEstimate {
        value: sum / c,
        n_effective: c,
        method: ValueMethod::Ipw,
    })
}

pub fn value_ipw<T: Real>(rule: &Rule<'_, T>, test: &TrialData<T>) -> Result<ValueEstimate<T>> {
    value_ipw_decisions(&rule.decide_all(&test.covariates)?, test)
}

/// A data generator with known conditional mean outcome.
pub trait OutcomeModel<T: Real>: Sync {
    fn n_arms(&self) -> usize;

    fn draw_covariates(&self, n: usize, rng: &mut ChaCha8Rng) -> Covariates<T>;

    /// n x L matrix of `E[Y | x_i, z_i, A = a]`.
    fn conditional_means(&self, cov: &Covariates<T>) -> Array2<T>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloValue<T> {
    pub value: T,
    pub optimal_value: T,
    /// `V(rule) - V(optimal)`, never positive up to rounding.
    pub regret: T,
    /// Regret divided by the optimal value.
    pub normalized_regret: T,
    /// Monte Carlo standard error of the regret.
    pub regret_se: T,
    pub n_mc: usize,
}

impl<T: Real> MonteCarloValue<T> {
    pub fn estimate(&self) -> ValueEstimate<T> {
        ValueEstimate {
            value: self.value,
            n_effective: T::from_usize_lossy(self.n_mc),
            method: ValueMethod::MonteCarlo,
        }
    }
}

/// Value of an arbitrary decision function on `n_mc` fresh draws.
pub fn value_monte_carlo_with<T, M, F>(model: &M, decide: F, n_mc: usize, seed: u64) -> Result<MonteCarloValue<T>>
where
    T: Real,
    M: OutcomeModel<T> + ?Sized,
    F: Fn(&Covariates<T>) -> Result<Vec<usize>>,
{
    if n_mc == 0 {
        return Err(CfamError::Config("Monte Carlo sample size must be positive".into()));
    }
    let mut rng = substream(seed, 0);
    let cov = model.draw_covariates(n_mc, &mut rng);
    let means = model.conditional_means(&cov);
    let decisions = decide(&cov)?;
    if decisions.len() != n_mc || decisions.iter().any(|&d| d == 0 || d > model.n_arms()) {
        return Err(CfamError::Input("decision function returned invalid arms".into()));
    }
    let nf = T::from_usize_lossy(n_mc);
    let mut value = T::zero();
    let mut optimal = T::zero();
    let mut gaps = Vec::with_capacity(n_mc);
    for (i, &d) in decisions.iter().enumerate() {
        let row = means.row(i);
        let best = row.iter().copied().fold(T::neg_infinity(), T::max);
        value += row[d - 1];
        optimal += best;
        gaps.push(row[d - 1] - best);
    }
    value /= nf;
    optimal /= nf;
    let regret = value - optimal;
    let var = gaps.iter().map(|&g| (g - regret) * (g - regret)).sum::<T>() / (nf - T::one()).max(T::one());
    Ok(MonteCarloValue {
        value,
        optimal_value: optimal,
        regret,
        normalized_regret: regret / optimal.abs(),
        regret_se: (var / nf).sqrt(),
        n_mc,
    })
}

/// Value and regret of `rule` against a known generator.
pub fn value_monte_carlo<T: Real, M: OutcomeModel<T> + ?Sized>(rule: &Rule<'_, T>, model: &M, n_mc: usize, seed: u64) -> Result<MonteCarloValue<T>> {
    if rule.n_arms() != model.n_arms() {
        return Err(CfamError::Input("rule and generator disagree on the number of arms".into()));
    }
    value_monte_carlo_with(model, |cov| rule.decide_all(cov), n_mc, seed)
}
