//! Simulation generators with known truth, and the metrics used to score
//! fitted models against them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::fourier4_eval;
use crate::cfam::{CfamFit, IndexCoefficient};
use crate::design::{Covariates, FunctionalCovariate, Grid, TrialData};
use crate::error::{CfamError, Result};
use crate::itr::OutcomeModel;
use crate::rng::substream;
use crate::scalar::Real;

/// Number of functional and of scalar covariates entering the main effect.
pub const MAIN_EFFECT_TERMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// `sin<b1,X1> - sin<b2,X2> + cos Z1 - cos Z2 + xi {cos<X1,X2> + sin(Z1 Z2)}`.
    Nonlinear,
    /// `(<b1,X1> - <b2,X2> + Z1 - Z2 + xi {<X1,X2> + Z1 Z2}) / 1.5`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub delta: f64,
    pub xi: f64,
    pub kind: InteractionKind,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid_size() -> usize {
    50
}

fn default_noise_sd() -> f64 {
    0.5
}

impl Scenario {
    /// `p = q = 20`, 50 grid points and noise sd 0.5.
    pub fn standard(n: usize, delta: f64, xi: f64, kind: InteractionKind) -> Self {
        let tag = match kind {
            InteractionKind::Nonlinear => "nl",
            InteractionKind::Linear => "lin",
        };
        Self {
            id: format!("{tag}_n{n}_d{delta}_x{xi}"),
            n,
            p: 20,
            q: 20,
            delta,
            xi,
            kind,
            grid_size: 50,
            noise_sd: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.q < 2 {
            return Err(CfamError::Config("scenarios need p >= 2 and q >= 2".into()));
        }
        if self.n < 2 || self.grid_size < 2 {
            return Err(CfamError::Config("scenarios need n >= 2 and at least 2 grid points".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.delta.is_finite() || !self.xi.is_finite() {
            return Err(CfamError::Config("invalid noise, delta or xi".into()));
        }
        Ok(())
    }
}

/// True coefficient functions of a generated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle<T> {
    pub grid: Grid<T>,
    pub beta1: Array1<T>,
    pub beta2: Array1<T>,
    /// Fourier coefficients of the main-effect coefficient functions.
    pub eta_coef: Vec<[T; 4]>,
    /// Positions of the true effect modifiers among all covariates,
    /// functional first: `X1, X2, Z1, Z2`.
    pub true_modifiers: Vec<usize>,
    pub p: usize,
    pub q: usize,
}

/// The generator: covariate law plus conditional mean outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModel<T> {
    pub p: usize,
    pub q: usize,
    pub delta: T,
    pub xi: T,
    pub kind: InteractionKind,
    pub grid: Grid<T>,
    /// Fourier basis on the grid, `grid_size x 4`.
    pub phi: Array2<T>,
    pub beta1: Array1<T>,
    pub beta2: Array1<T>,
    pub eta: Vec<Array1<T>>,
}

pub fn beta1_coef<T: Real>() -> [T; 4] {
    [T::lit(0.5); 4]
}

pub fn beta2_coef<T: Real>() -> [T; 4] {
    let h = T::lit(0.5);
    [h, -h, h, -h]
}

fn fourier_on_grid<T: Real>(grid: &Grid<T>) -> Array2<T> {
    let mut phi = Array2::zeros((grid.len(), 4));
    for (l, &s) in grid.points().iter().enumerate() {
        for (c, v) in fourier4_eval(s).into_iter().enumerate() {
            phi[[l, c]] = v;
        }
    }
    phi
}

fn trapezoid_dot<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>, w: &[T]) -> T {
    a.iter().zip(b.iter()).zip(w).map(|((&x, &y), &w)| x * y * w).sum()
}

impl<T: Real> SimModel<T> {
    fn main_effect(&self, cov: &Covariates<T>, i: usize) -> T {
        let w = self.grid.weights();
        let mut m = T::zero();
        for (j, eta) in self.eta.iter().enumerate() {
            m += trapezoid_dot(cov.functional[j].values.row(i), eta.view(), w).sin();
        }
        for k in 0..self.q.min(MAIN_EFFECT_TERMS) {
            m += cov.scalars[[i, k]].sin();
        }
        self.delta * m
    }

    /// The bracketed interaction term multiplying `4 (A - 1.5)`.
    pub fn interaction(&self, cov: &Covariates<T>, i: usize) -> T {
        let w = self.grid.weights();
        let x1 = cov.functional[0].values.row(i);
        let x2 = cov.functional[1].values.row(i);
        let u1 = trapezoid_dot(x1, self.beta1.view(), w);
        let u2 = trapezoid_dot(x2, self.beta2.view(), w);
        let x12 = trapezoid_dot(x1, x2, w);
        let (z1, z2) = (cov.scalars[[i, 0]], cov.scalars[[i, 1]]);
        match self.kind {
            InteractionKind::Nonlinear => {
                u1.sin() - u2.sin() + z1.cos() - z2.cos() + self.xi * (x12.cos() + (z1 * z2).sin())
            }
            InteractionKind::Linear => {
                let c = T::lit(1.5);
                (u1 - u2 + z1 - z2 + self.xi * (x12 + z1 * z2)) / c
            }
        }
    }
}

impl<T: Real> OutcomeModel<T> for SimModel<T> {
    fn n_arms(&self) -> usize {
        2
    }

    fn draw_covariates(&self, n: usize, rng: &mut ChaCha8Rng) -> Covariates<T> {
        let r = self.grid.len();
        let functional = (0..self.p)
            .map(|_| {
                let coef = Array2::from_shape_fn((n, 4), |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
                FunctionalCovariate::new(coef.dot(&self.phi.t()), self.grid.clone()).expect("finite curves")
            })
            .collect::<Vec<_>>();
        debug_assert!(functional.iter().all(|f| f.values.ncols() == r));
        let rho = 0.5f64;
        let innov = (1.0 - rho * rho).sqrt();
        let mut scalars = Array2::zeros((n, self.q));
        for i in 0..n {
            let mut prev = 0.0f64;
            for k in 0..self.q {
                let e: f64 = rng.sample(StandardNormal);
                let z = if k == 0 { e } else { rho * prev + innov * e };
                scalars[[i, k]] = T::lit(z);
                prev = z;
            }
        }
        Covariates::new(functional, scalars).expect("consistent covariates")
    }

    fn conditional_means(&self, cov: &Covariates<T>) -> Array2<T> {
        let two = T::lit(2.0);
        Array2::from_shape_fn((cov.n(), 2), |(i, a)| {
            let m = self.main_effect(cov, i);
            let g = self.interaction(cov, i);
            if a == 0 {
                m - two * g
            } else {
                m + two * g
            }
        })
    }
}

/// One simulated trial with its truth.
#[derive(Debug, Clone)]
pub struct Simulated<T> {
    pub data: TrialData<T>,
    pub truth: TruthBundle<T>,
    pub model: SimModel<T>,
}

/// Draws a data set from `scenario`, fully determined by `scenario.seed`.
pub fn generate<T: Real>(scenario: &Scenario) -> Result<Simulated<T>> {
    scenario.validate()?;
    let seed = scenario.seed;
    let grid = Grid::<T>::uniform(scenario.grid_size)?;
    let phi = fourier_on_grid(&grid);

    let mut eta_rng = substream(seed, 0);
    let eta_coef: Vec<[T; 4]> = (0..scenario.p.min(MAIN_EFFECT_TERMS))
        .map(|_| {
            let v: [f64; 4] = std::array::from_fn(|_| eta_rng.sample(StandardNormal));
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.map(|x| T::lit(x / nrm))
        })
        .collect();
    let on_grid = |c: &[T; 4]| phi.dot(&Array1::from(c.to_vec()));
    let model = SimModel {
        p: scenario.p,
        q: scenario.q,
        delta: T::lit(scenario.delta),
        xi: T::lit(scenario.xi),
        kind: scenario.kind,
        beta1: on_grid(&beta1_coef()),
        beta2: on_grid(&beta2_coef()),
        eta: eta_coef.iter().map(on_grid).collect(),
        grid: grid.clone(),
        phi: phi.clone(),
    };

    let cov = model.draw_covariates(scenario.n, &mut substream(seed, 1));
    let mut arm_rng = substream(seed, 2);
    let arms: Vec<usize> = (0..scenario.n).map(|_| arm_rng.random_range(1..=2)).collect();
    let mut noise_rng = substream(seed, 3);
    let means = model.conditional_means(&cov);
    let sd = T::lit(scenario.noise_sd);
    let y = Array1::from_iter(
        arms.iter()
            .enumerate()
            .map(|(i, &a)| means[[i, a - 1]] + sd * T::lit(noise_rng.sample::<f64, _>(StandardNormal))),
    );
    if arms.iter().all(|&a| a == arms[0]) {
        return Err(CfamError::Input("simulated trial has a single arm; use a larger n".into()));
    }
    let half = T::lit(0.5);
    let data = TrialData::new(y, arms, vec![half, half], cov)?;
    let truth = TruthBundle {
        grid,
        beta1: model.beta1.clone(),
        beta2: model.beta2.clone(),
        eta_coef,
        true_modifiers: vec![0, 1, scenario.p, scenario.p + 1],
        p: scenario.p,
        q: scenario.q,
    };
    Ok(Simulated { data, truth, model })
}

/// `sqrt(int (beta_hat - beta)^2)` by the trapezoid rule on `grid`,
/// minimized over the sign of `beta_hat`.
pub fn rse_values<T: Real>(beta_hat: &Array1<T>, beta_true: &Array1<T>, grid: &Grid<T>) -> T {
    let w = grid.weights();
    let mut plus = T::zero();
    let mut minus = T::zero();
    for ((&h, &b), &wl) in beta_hat.iter().zip(beta_true.iter()).zip(w) {
        plus += wl * (h - b) * (h - b);
        minus += wl * (h + b) * (h + b);
    }
    plus.min(minus).sqrt()
}

pub fn rse<T: Real>(beta_hat: &IndexCoefficient<T>, beta_true: &Array1<T>, grid: &Grid<T>) -> T {
    rse_values(&beta_hat.values_on(grid.points()), beta_true, grid)
}

/// True and false positive rates of the fitted active set.
pub fn selection_metrics<T: Real>(fit: &CfamFit<T>, truth: &TruthBundle<T>) -> (f64, f64) {
    let active = fit.active_set();
    let total = truth.p + truth.q;
    let n_true = truth.true_modifiers.len();
    let tp = truth.true_modifiers.iter().filter(|&&i| active.get(i) == Some(&true)).count();
    let fp = (0..total)
        .filter(|i| !truth.true_modifiers.contains(i) && active.get(*i) == Some(&true))
        .count();
    (tp as f64 / n_true as f64, fp as f64 / (total - n_true).max(1) as f64)
}
