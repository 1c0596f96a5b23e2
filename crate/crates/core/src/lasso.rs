//! L1-penalized least squares by cyclic coordinate descent, used for
//! main-effect residualization.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfamError, Result};
use crate::scalar::Real;

/// Linear model on the original covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit<T> {
    pub intercept: T,
    pub coef: Array1<T>,
    pub lambda: T,
}

impl<T: Real> LassoFit<T> {
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Array1<T> {
        x.dot(&self.coef).mapv(|v| v + self.intercept)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub n_lambda: usize,
    pub min_ratio: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            n_lambda: 100,
            min_ratio: 1e-3,
            tol: 1e-9,
            max_sweeps: 10_000,
        }
    }
}

/// Centered and unit-variance design with the constants needed to map
/// coefficients back.
struct Standardized<T> {
    x: Array2<T>,
    y: Array1<T>,
    x_mean: Array1<T>,
    x_scale: Array1<T>,
    y_mean: T,
}

fn standardize<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>) -> Standardized<T> {
    let n = T::from_usize_lossy(x.nrows());
    let x_mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let mut xs = &x - &x_mean;
    let mut x_scale = Array1::zeros(x.ncols());
    for (j, mut col) in xs.columns_mut().into_iter().enumerate() {
        let sd = (col.iter().map(|&v| v * v).sum::<T>() / n).sqrt();
        if sd > T::lit(1e-12) {
            col.mapv_inplace(|v| v / sd);
            x_scale[j] = sd;
        } else {
            col.fill(T::zero());
        }
    }
    let y_mean = y.mean().unwrap_or(T::zero());
    Standardized {
        x: xs,
        y: y.mapv(|v| v - y_mean),
        x_mean,
        x_scale,
        y_mean,
    }
}

/// Smallest penalty giving the all-zero solution on the standardized scale.
pub fn lasso_lambda_max<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>) -> T {
    let s = standardize(x, y);
    max_abs_corr(&s)
}

fn max_abs_corr<T: Real>(s: &Standardized<T>) -> T {
    let n = T::from_usize_lossy(s.x.nrows());
    s.x.t().dot(&s.y).iter().fold(T::zero(), |m, &v| m.max(v.abs() / n))
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Coordinate descent for `(1/2n)||y - Xb||^2 + lambda ||b||_1` on a
/// standardized design, updating `b` and residual `r` in place.
fn descend<T: Real>(s: &Standardized<T>, lambda: T, b: &mut [f64], r: &mut [f64], opts: &LassoOptions) {
    let n = s.x.nrows();
    let nf = n as f64;
    let lam = lambda.to_f64_lossy();
    let cols: Vec<Vec<f64>> = s
        .x
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    for _ in 0..opts.max_sweeps {
        let mut max_delta = 0.0f64;
        for (j, col) in cols.iter().enumerate() {
            if s.x_scale[j] == T::zero() {
                continue;
            }
            let rho: f64 = col.iter().zip(r.iter()).map(|(x, r)| x * r).sum::<f64>() / nf + b[j];
            let new = soft(rho, lam);
            let delta = new - b[j];
            if delta != 0.0 {
                for (ri, xi) in r.iter_mut().zip(col) {
                    *ri -= delta * xi;
                }
                b[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < opts.tol {
            break;
        }
    }
}

fn unstandardize<T: Real>(s: &Standardized<T>, b: &[f64], lambda: T) -> LassoFit<T> {
    let coef = Array1::from_iter(b.iter().zip(s.x_scale.iter()).map(|(&bj, &sd)| {
        if sd > T::zero() {
            T::lit(bj) / sd
        } else {
            T::zero()
        }
    }));
    let intercept = s.y_mean - coef.dot(&s.x_mean);
    LassoFit {
        intercept,
        coef,
        lambda,
    }
}

/// Decreasing log-spaced penalties from the null-model threshold.
pub fn lasso_path<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, opts: &LassoOptions) -> Vec<T> {
    let lmax = lasso_lambda_max(x, y).to_f64_lossy();
    log_grid(lmax, opts.min_ratio, opts.n_lambda)
        .into_iter()
        .map(T::lit)
        .collect()
}

pub(crate) fn log_grid(top: f64, min_ratio: f64, count: usize) -> Vec<f64> {
    if !(top > 0.0) {
        return vec![0.0];
    }
    if count < 2 {
        return vec![top];
    }
    let step = min_ratio.ln() / (count - 1) as f64;
    (0..count).map(|i| top * (step * i as f64).exp()).collect()
}

/// Fits every penalty of `path` with warm starts.
pub fn lasso_fit_path<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, path: &[T], opts: &LassoOptions) -> Vec<LassoFit<T>> {
    let s = standardize(x, y);
    let mut b = vec![0.0; x.ncols()];
    let mut r: Vec<f64> = s.y.iter().map(|v| v.to_f64_lossy()).collect();
    path.iter()
        .map(|&lam| {
            descend(&s, lam, &mut b, &mut r, opts);
            unstandardize(&s, &b, lam)
        })
        .collect()
}

pub fn lasso_fit<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, lambda: T, opts: &LassoOptions) -> LassoFit<T> {
    lasso_fit_path(x, y, &[lambda], opts).pop().expect("one fit")
}

/// Penalty chosen by K-fold cross-validated prediction error, refit on all
/// rows.
pub fn lasso_cv<T: Real>(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, folds: usize, seed: u64, opts: &LassoOptions) -> Result<LassoFit<T>> {
    let n = x.nrows();
    if folds < 2 || folds > n {
        return Err(CfamError::Config(format!("lasso needs 2..={n} folds, got {folds}")));
    }
    let path = lasso_path(x, y, opts);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut err = vec![T::zero(); path.len()];
    for k in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
        let xt = x.select(Axis(0), &train);
        let yt = Array1::from_iter(train.iter().map(|&i| y[i]));
        let xv = x.select(Axis(0), &test);
        for (e, f) in err.iter_mut().zip(lasso_fit_path(xt.view(), yt.view(), &path, opts)) {
            let pred = f.predict(xv.view());
            *e += test
                .iter()
                .zip(pred.iter())
                .map(|(&i, &p)| (y[i] - p) * (y[i] - p))
                .sum::<T>();
        }
    }
    let best = err
        .iter()
        .enumerate()
        .fold(0, |b, (i, &e)| if e < err[b] { i } else { b });
    Ok(lasso_fit_path(x, y, &path[..=best], opts).pop().expect("nonempty path"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_problem(seed: u64, n: usize, p: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
        let y = Array1::from_iter((0..n).map(|i| 1.5 * x[[i, 0]] - x[[i, 2]] + rng.random_range(-0.5..0.5)));
        (x, y)
    }

    #[test]
    fn kkt_conditions_hold() {
        for seed in 0..5 {
            let (x, y) = random_problem(seed, 40, 6);
            let lmax = lasso_lambda_max(x.view(), y.view());
            let lam = 0.2 * lmax;
            let f = lasso_fit(x.view(), y.view(), lam, &LassoOptions::default());
            let s = standardize(x.view(), y.view());
            let b = &f.coef * &s.x_scale;
            let r = &s.y - &s.x.dot(&b);
            let grad = s.x.t().dot(&r) / 40.0;
            for j in 0..6 {
                if b[j] != 0.0 {
                    assert!((grad[j] - lam * b[j].signum()).abs() < 1e-6);
                } else {
                    assert!(grad[j].abs() <= lam + 1e-6);
                }
            }
        }
    }

    #[test]
    fn above_threshold_gives_null_model() {
        let (x, y) = random_problem(3, 30, 4);
        let lmax = lasso_lambda_max(x.view(), y.view());
        let f = lasso_fit(x.view(), y.view(), lmax * 1.01, &LassoOptions::default());
        assert!(f.coef.iter().all(|&c| c == 0.0));
        assert!((f.intercept - y.mean().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cv_recovers_support() {
        let (x, y) = random_problem(9, 200, 5);
        let f = lasso_cv(x.view(), y.view(), 10, 1, &LassoOptions::default()).unwrap();
        assert!((f.coef[0] - 1.5).abs() < 0.1);
        assert!((f.coef[2] + 1.0).abs() < 0.1);
    }

    #[test]
    fn constant_column_is_ignored() {
        let (mut x, y) = random_problem(2, 30, 3);
        x.column_mut(1).fill(4.0);
        let f = lasso_fit(x.view(), y.view(), 0.0, &LassoOptions::default());
        assert_eq!(f.coef[1], 0.0);
    }
}
