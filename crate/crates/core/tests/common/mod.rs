#![allow(dead_code)]

use cfam_core::{CfamFit, Covariates, FunctionalCovariate, Grid, Target, TrialData};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Shape of a synthetic trial.
#[derive(Debug, Clone)]
pub struct Toy {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub pi: Vec<f64>,
    pub grid_size: usize,
    pub signal: f64,
    pub noise: f64,
}

impl Default for Toy {
    fn default() -> Self {
        Self {
            n: 120,
            p: 2,
            q: 2,
            pi: vec![0.5, 0.5],
            grid_size: 15,
            signal: 1.0,
            noise: 0.3,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn draw_arm(r: &mut ChaCha8Rng, pi: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (a, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return a + 1;
        }
    }
    pi.len()
}

/// Smooth random curves with a nonzero mean, plus scalars, plus an outcome
/// whose arm contrast depends on the first index and the first scalar.
pub fn toy_data(seed: u64, toy: &Toy) -> TrialData<f64> {
    let mut r = rng(seed);
    let grid = Grid::<f64>::uniform(toy.grid_size).unwrap();
    let pts: Vec<f64> = grid.points().to_vec();
    let functional: Vec<FunctionalCovariate<f64>> = (0..toy.p)
        .map(|_| {
            let mut vals = Array2::zeros((toy.n, pts.len()));
            for i in 0..toy.n {
                let c: [f64; 4] = std::array::from_fn(|_| r.sample::<f64, _>(StandardNormal));
                for (l, &s) in pts.iter().enumerate() {
                    vals[[i, l]] = c[0] + c[1] * s + c[2] * (std::f64::consts::PI * s).sin() + c[3] * (2.0 * s - 1.0).powi(2);
                }
            }
            FunctionalCovariate::new(vals, grid.clone()).unwrap()
        })
        .collect();
    let scalars = Array2::from_shape_fn((toy.n, toy.q), |_| r.sample::<f64, _>(StandardNormal));
    let l = toy.pi.len();
    let mut arms: Vec<usize> = (0..toy.n).map(|_| draw_arm(&mut r, &toy.pi)).collect();
    // every arm at least twice
    for a in 1..=l {
        arms[2 * (a - 1)] = a;
        arms[2 * (a - 1) + 1] = a;
    }
    let y = Array1::from_iter((0..toy.n).map(|i| {
        let arm_score = arms[i] as f64 - (l as f64 + 1.0) / 2.0;
        let mut s = 0.0;
        if toy.p > 0 {
            let u: f64 = functional[0].values.row(i).iter().zip(grid.weights()).map(|(x, w)| x * w).sum();
            s += u.sin();
        }
        if toy.q > 0 {
            s += scalars[[i, 0]];
        }
        let main = if toy.q > 0 { 0.5 * scalars[[i, 0]] } else { 0.0 };
        toy.signal * arm_score * s + main + toy.noise * r.sample::<f64, _>(StandardNormal)
    }));
    let cov = Covariates::new(functional, scalars).unwrap();
    TrialData::new(y, arms, toy.pi.clone(), cov).unwrap()
}

/// Largest `|sum_a pi_a g(u, a)|` over every component at every observed
/// index value.
pub fn max_constraint_violation(fit: &CfamFit<f64>, data: &TrialData<f64>) -> f64 {
    if fit.target != Target::Interaction {
        return 0.0;
    }
    let idx = fit.indices(&data.covariates).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |comp: &cfam_core::ComponentFit<f64>, u: f64| {
        let s: f64 = fit.pi.iter().enumerate().map(|(a, &p)| p * comp.eval(u, a)).sum();
        worst = worst.max(s.abs());
    };
    for (fc, u) in fit.functional.iter().zip(&idx) {
        for &v in u.iter() {
            check(&fc.component, v);
        }
    }
    for (k, comp) in fit.scalar.iter().enumerate() {
        for &v in data.covariates.scalars.column(k).iter() {
            check(comp, v);
        }
    }
    worst
}

pub fn assert_constraint(fit: &CfamFit<f64>, data: &TrialData<f64>) {
    let v = max_constraint_violation(fit, data);
    assert!(v < 1e-8, "constraint violated by {v:e}");
}

/// `(1/n) ||r - D t||^2 + 2 lambda sqrt((1/n) ||D t||^2)`.
pub fn penalized_block_loss(d: &Array2<f64>, r: &Array1<f64>, t: &Array1<f64>, lambda: f64) -> f64 {
    let n = r.len() as f64;
    let fit = d.dot(t);
    let rss = (r - &fit).mapv(|v| v * v).sum() / n;
    rss + 2.0 * lambda * (fit.mapv(|v| v * v).sum() / n).sqrt()
}

/// Generic minimizer of [`penalized_block_loss`]: damped Newton on the
/// objective with the square root smoothed by `eps`, compared against the
/// zero candidate. Returns the minimizing coefficient vector.
pub fn convex_block_minimizer(d: &Array2<f64>, r: &Array1<f64>, lambda: f64) -> Array1<f64> {
    let n = r.len() as f64;
    let k = d.ncols();
    let g = d.t().dot(d);
    let dr = d.t().dot(r);
    let eps = 1e-12;
    let smooth = |t: &Array1<f64>| {
        let fit = d.dot(t);
        (r - &fit).mapv(|v| v * v).sum() / n + 2.0 * lambda * (fit.mapv(|v| v * v).sum() / n + eps * eps).sqrt()
    };
    // Start from ordinary least squares.
    let mut t = solve_spd(&g, &dr).unwrap_or_else(|| Array1::zeros(k));
    for _ in 0..200 {
        let gt = g.dot(&t);
        let s = (t.dot(&gt) / n + eps * eps).sqrt();
        let grad = (&gt - &dr) * (2.0 / n) + &gt * (2.0 * lambda / (n * s));
        let mut hess = &g * (2.0 / n + 2.0 * lambda / (n * s));
        for i in 0..k {
            for j in 0..k {
                hess[[i, j]] -= 2.0 * lambda * gt[i] * gt[j] / (n * n * s * s * s);
            }
        }
        let step = match solve_spd(&hess, &grad) {
            Some(s) => s,
            None => grad.clone(),
        };
        let f0 = smooth(&t);
        let mut a = 1.0;
        let mut moved = false;
        while a > 1e-12 {
            let cand = &t - &(&step * a);
            if smooth(&cand) < f0 {
                t = cand;
                moved = true;
                break;
            }
            a *= 0.5;
        }
        if !moved || grad.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-14 {
            break;
        }
    }
    let zero = Array1::zeros(k);
    if penalized_block_loss(d, r, &zero, lambda) <= penalized_block_loss(d, r, &t, lambda) {
        zero
    } else {
        t
    }
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let k = a.nrows();
    let mut l = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[[i, m]] * l[[j, m]]).sum();
            if i == j {
                let v = a[[i, i]] - s;
                if v <= 0.0 {
                    return None;
                }
                l[[i, i]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut z = Array1::<f64>::zeros(k);
    for i in 0..k {
        z[i] = (b[i] - (0..i).map(|m| l[[i, m]] * z[m]).sum::<f64>()) / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(k);
    for i in (0..k).rev() {
        x[i] = (z[i] - (i + 1..k).map(|m| l[[m, i]] * x[m]).sum::<f64>()) / l[[i, i]];
    }
    Some(x)
}
