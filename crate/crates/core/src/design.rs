//! Trial data containers, discretized functional inner products and the
//! constrained treatment-specific design matrices.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::basis::ComponentBasis;
use crate::error::{CfamError, Result};
use crate::linalg::null_space;
use crate::scalar::Real;

/// Discretization grid of a functional covariate with trapezoidal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(CfamError::Input("a grid needs at least two points".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(CfamError::Input("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CfamError::Input("grid points must be strictly increasing".into()));
        }
        let r = points.len();
        let half = T::lit(0.5);
        let weights = (0..r)
            .map(|l| {
                let left = if l > 0 { points[l] - points[l - 1] } else { T::zero() };
                let right = if l + 1 < r { points[l + 1] - points[l] } else { T::zero() };
                half * (left + right)
            })
            .collect();
        Ok(Self { points, weights })
    }

    /// `r` equally spaced points from 0 to 1 inclusive.
    pub fn uniform(r: usize) -> Result<Self> {
        if r < 2 {
            return Err(CfamError::Input("a grid needs at least two points".into()));
        }
        let last = T::from_usize_lossy(r - 1);
        Self::new((0..r).map(|l| T::from_usize_lossy(l) / last).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Riemann sum `sum_l w_l x(s_l) beta(s_l)`.
pub fn inner_product<T: Real>(x: ArrayView1<'_, T>, beta: ArrayView1<'_, T>, grid: &Grid<T>) -> Result<T> {
    if x.len() != grid.len() || beta.len() != grid.len() {
        return Err(CfamError::Input(format!(
            "inner product length mismatch: x has {}, beta has {}, grid has {}",
            x.len(),
            beta.len(),
            grid.len()
        )));
    }
    Ok(x.iter()
        .zip(beta.iter())
        .zip(grid.weights().iter())
        .map(|((&a, &b), &w)| a * b * w)
        .sum())
}

/// One functional covariate observed on a shared grid (rows are subjects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCovariate<T> {
    pub values: Array2<T>,
    pub grid: Grid<T>,
}

impl<T: Real> FunctionalCovariate<T> {
    pub fn new(values: Array2<T>, grid: Grid<T>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(CfamError::Input(format!(
                "functional covariate has {} columns but the grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if let Some(((i, l), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(CfamError::Input(format!(
                "functional covariate has a non-finite value at subject {i}, grid point {l}"
            )));
        }
        Ok(Self { values, grid })
    }

    /// Indices `<X_i, beta>` for every subject given beta on the grid.
    pub fn indices(&self, beta_on_grid: ArrayView1<'_, T>) -> Array1<T> {
        let wb: Array1<T> = beta_on_grid
            .iter()
            .zip(self.grid.weights())
            .map(|(&b, &w)| b * w)
            .collect();
        self.values.dot(&wb)
    }

    /// Scalar summaries `int X_i(s) ds`.
    pub fn means(&self) -> Array1<T> {
        self.indices(Array1::from_elem(self.grid.len(), T::one()).view())
    }

    /// Plain averages of each curve over its grid points.
    pub fn grid_means(&self) -> Array1<T> {
        self.values
            .mean_axis(Axis(1))
            .unwrap_or_else(|| Array1::zeros(self.values.nrows()))
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), rows),
            grid: self.grid.clone(),
        }
    }
}

/// Pretreatment covariates of a set of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates<T> {
    pub functional: Vec<FunctionalCovariate<T>>,
    /// n x q scalar covariates.
    pub scalars: Array2<T>,
}

impl<T: Real> Covariates<T> {
    pub fn new(functional: Vec<FunctionalCovariate<T>>, scalars: Array2<T>) -> Result<Self> {
        let n = scalars.nrows();
        for (j, f) in functional.iter().enumerate() {
            if f.values.nrows() != n {
                return Err(CfamError::Input(format!(
                    "functional covariate {j} has {} subjects, scalars have {n}",
                    f.values.nrows()
                )));
            }
        }
        if let Some(((i, k), _)) = scalars.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(CfamError::Input(format!(
                "scalar covariate {k} is non-finite for subject {i}"
            )));
        }
        Ok(Self { functional, scalars })
    }

    pub fn n(&self) -> usize {
        self.scalars.nrows()
    }

    pub fn p(&self) -> usize {
        self.functional.len()
    }

    pub fn q(&self) -> usize {
        self.scalars.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            functional: self.functional.iter().map(|f| f.select(rows)).collect(),
            scalars: self.scalars.select(Axis(0), rows),
        }
    }
}

/// Randomized trial data. Arms are labelled `1..=L`; the stored outcome is
/// centered within each arm and the removed means are kept in `arm_means`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialData<T> {
    pub y: Array1<T>,
    pub arms: Vec<usize>,
    pub pi: Vec<T>,
    pub covariates: Covariates<T>,
    pub arm_means: Vec<T>,
}

impl<T: Real> TrialData<T> {
    /// Validates inputs and centers `y_raw` within each arm. `pi` holds the
    /// known randomization probabilities of arms `1..=pi.len()`.
    pub fn new(y_raw: Array1<T>, arms: Vec<usize>, pi: Vec<T>, covariates: Covariates<T>) -> Result<Self> {
        let n = y_raw.len();
        if arms.len() != n || covariates.n() != n {
            return Err(CfamError::Input(format!(
                "row count mismatch: y has {n}, arms {}, covariates {}",
                arms.len(),
                covariates.n()
            )));
        }
        if n == 0 {
            return Err(CfamError::Input("trial data has no subjects".into()));
        }
        if let Some(i) = y_raw.iter().position(|v| !v.is_finite()) {
            return Err(CfamError::Input(format!("outcome is non-finite for subject {i}")));
        }
        validate_pi(&pi)?;
        let l = pi.len();
        if let Some(i) = arms.iter().position(|&a| a == 0 || a > l) {
            return Err(CfamError::Input(format!(
                "subject {i} has arm label {} outside 1..={l}",
                arms[i]
            )));
        }
        let mut sums = vec![T::zero(); l];
        let mut counts = vec![0usize; l];
        for (&a, &y) in arms.iter().zip(y_raw.iter()) {
            sums[a - 1] += y;
            counts[a - 1] += 1;
        }
        if let Some(a) = counts.iter().position(|&c| c == 0) {
            return Err(CfamError::Input(format!("arm {} has no subjects", a + 1)));
        }
        let arm_means: Vec<T> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| s / T::from_usize_lossy(c))
            .collect();
        let y = Array1::from_iter(y_raw.iter().zip(&arms).map(|(&v, &a)| v - arm_means[a - 1]));
        Ok(Self {
            y,
            arms,
            pi,
            covariates,
            arm_means,
        })
    }

    /// Same as [`TrialData::new`] with `pi` set to the observed arm frequencies.
    pub fn with_empirical_pi(y_raw: Array1<T>, arms: Vec<usize>, n_arms: usize, covariates: Covariates<T>) -> Result<Self> {
        let mut counts = vec![0usize; n_arms];
        for &a in &arms {
            if a == 0 || a > n_arms {
                return Err(CfamError::Input(format!("arm label {a} outside 1..={n_arms}")));
            }
            counts[a - 1] += 1;
        }
        let n = T::from_usize_lossy(arms.len().max(1));
        let pi = counts.iter().map(|&c| T::from_usize_lossy(c) / n).collect();
        Self::new(y_raw, arms, pi, covariates)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_arms(&self) -> usize {
        self.pi.len()
    }

    /// Outcomes on their original (uncentered) scale.
    pub fn raw_outcomes(&self) -> Array1<T> {
        Array1::from_iter(self.y.iter().zip(&self.arms).map(|(&v, &a)| v + self.arm_means[a - 1]))
    }

    /// Subset of subjects, re-centered within arm on the subset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let raw = self.raw_outcomes();
        let y = Array1::from_iter(rows.iter().map(|&i| raw[i]));
        let arms = rows.iter().map(|&i| self.arms[i]).collect();
        Self::new(y, arms, self.pi.clone(), self.covariates.select(rows))
    }

    /// Replaces the (centered) outcome, re-centering within arm. Arm means of
    /// the original outcome scale are kept.
    pub fn with_outcome(&self, y_centered: Array1<T>) -> Result<Self> {
        if y_centered.len() != self.n() {
            return Err(CfamError::Input("replacement outcome has the wrong length".into()));
        }
        let l = self.n_arms();
        let mut sums = vec![T::zero(); l];
        let mut counts = vec![0usize; l];
        for (&a, &v) in self.arms.iter().zip(y_centered.iter()) {
            sums[a - 1] += v;
            counts[a - 1] += 1;
        }
        let y = Array1::from_iter(
            y_centered
                .iter()
                .zip(&self.arms)
                .map(|(&v, &a)| v - sums[a - 1] / T::from_usize_lossy(counts[a - 1])),
        );
        Ok(Self { y, ..self.clone() })
    }
}

pub(crate) fn validate_pi<T: Real>(pi: &[T]) -> Result<()> {
    if pi.len() < 2 {
        return Err(CfamError::Config(format!(
            "at least two treatment arms are required, got {}",
            pi.len()
        )));
    }
    if pi.iter().any(|&p| !(p > T::zero()) || !p.is_finite()) {
        return Err(CfamError::Config("randomization probabilities must be positive".into()));
    }
    let total: T = pi.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-6) {
        return Err(CfamError::Config(format!(
            "randomization probabilities must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Orthonormal basis (dL x d(L-1)) of `{theta : sum_a pi_a theta_a = 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBasis<T> {
    pub n_mat: Array2<T>,
}

/// The `d x dL` constraint matrix `(pi_1 I_d, ..., pi_L I_d)`.
pub fn constraint_matrix<T: Real>(pi: &[T], d: usize) -> Array2<T> {
    let l = pi.len();
    let mut c = Array2::zeros((d, d * l));
    for (a, &p) in pi.iter().enumerate() {
        for r in 0..d {
            c[[r, a * d + r]] = p;
        }
    }
    c
}

pub fn null_space_basis<T: Real>(pi: &[T], d: usize) -> Result<ConstraintBasis<T>> {
    validate_pi(pi)?;
    if d == 0 {
        return Err(CfamError::Config("basis dimension must be positive".into()));
    }
    let n_mat = null_space(constraint_matrix(pi, d).view());
    debug_assert_eq!(n_mat.ncols(), d * (pi.len() - 1));
    Ok(ConstraintBasis { n_mat })
}

/// Treatment-specific design: row `i` holds the basis at `u_i` in block
/// `a_i` (arms are 1-based) and zeros elsewhere.
pub fn build_design<T: Real>(u: &[T], arms: &[usize], basis: &ComponentBasis<T>, n_arms: usize) -> Result<Array2<T>> {
    if u.len() != arms.len() {
        return Err(CfamError::Input("index and arm vectors differ in length".into()));
    }
    let d = basis.dim();
    let mut design = Array2::zeros((u.len(), d * n_arms));
    let mut buf = vec![T::zero(); d];
    for (i, (&ui, &a)) in u.iter().zip(arms).enumerate() {
        if a == 0 || a > n_arms {
            return Err(CfamError::Input(format!("arm label {a} outside 1..={n_arms}")));
        }
        basis.eval_into(ui, &mut buf);
        let off = (a - 1) * d;
        for r in 0..d {
            design[[i, off + r]] = buf[r];
        }
    }
    Ok(design)
}

/// `D N`: absorbs the linear constraint into the design.
pub fn reparametrize<T: Real>(design: ArrayView2<'_, T>, constraint: &ConstraintBasis<T>) -> Result<Array2<T>> {
    if design.ncols() != constraint.n_mat.nrows() {
        return Err(CfamError::Input(format!(
            "design has {} columns but the constraint basis has {} rows",
            design.ncols(),
            constraint.n_mat.nrows()
        )));
    }
    Ok(design.dot(&constraint.n_mat))
}
