//! Constrained functional additive model solver.
//!
//! Step 1 fits the treatment-specific component functions by block
//! coordinate descent with soft-thresholding of whole components; Step 2
//! updates each active single-index coefficient function by one linearized
//! (Taylor) least-squares solve. The driver alternates the two until the
//! index coefficients stop moving.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::basis::{default_basis_dim, ComponentBasis, OrthoSplineBasis};
use crate::design::{build_design, null_space_basis, reparametrize, Covariates, Grid, TrialData};
use crate::error::{CfamError, Result};
use crate::linalg::{column_means, default_rcond, norm, normal_equations_ridge, null_space, LeastSquares};
use crate::scalar::Real;

/// Which effect the additive model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Target {
    /// Treatment-by-covariate interaction; components satisfy
    /// `sum_a pi_a g(u, a) = 0`.
    #[default]
    Interaction,
    /// Covariate main effect with no treatment dependence; components are
    /// centered over the training sample.
    MainEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions<T> {
    /// Common dimension of component and coefficient-function bases;
    /// `None` uses `round(4 + (2n)^(1/5))`.
    pub basis_dim: Option<usize>,
    /// Affine component functions instead of cubic splines.
    pub linear_mode: bool,
    pub target: Target,
    /// Relative change of fitted component vectors that ends Step 1.
    pub inner_tol: T,
    /// Relative change of index coefficients that ends the alternation.
    pub outer_tol: T,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Relative decrease of the penalized objective over one alternation
    /// below which the alternation stops; 0 disables the rule.
    pub objective_tol: T,
    /// Halvings tried when a full linearized step does not lower the
    /// penalized objective; 0 always takes the full step.
    pub step_halvings: usize,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            basis_dim: None,
            linear_mode: false,
            target: Target::Interaction,
            inner_tol: T::lit(1e-4),
            outer_tol: T::lit(1e-4),
            max_inner: 100,
            max_outer: 50,
            step_halvings: 10,
            objective_tol: T::lit(1e-6),
        }
    }
}

impl<T: Real> FitOptions<T> {
    /// Same settings in another scalar type.
    pub fn cast<U: Real>(&self) -> FitOptions<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        FitOptions {
            basis_dim: self.basis_dim,
            linear_mode: self.linear_mode,
            target: self.target,
            inner_tol: c(self.inner_tol),
            outer_tol: c(self.outer_tol),
            max_inner: self.max_inner,
            max_outer: self.max_outer,
            objective_tol: c(self.objective_tol),
            step_halvings: self.step_halvings,
        }
    }

    pub fn resolved_dim(&self, n: usize) -> usize {
        self.basis_dim.unwrap_or_else(|| default_basis_dim(n))
    }
}

/// Unit-norm coefficient function `beta(s) = B(s)^T gamma` in an
/// L2-orthonormal cubic spline basis on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexCoefficient<T> {
    pub gamma: Array1<T>,
    pub basis: OrthoSplineBasis<T>,
    /// Entry of `gamma` kept nonnegative to fix the sign.
    pub sign_anchor: usize,
}

impl<T: Real> IndexCoefficient<T> {
    /// The constant function `beta(s) = 1`; the anchor is its largest entry.
    pub fn initial(dim: usize) -> Result<Self> {
        let basis = OrthoSplineBasis::unit_interval(dim)?;
        let gamma = basis.constant_one();
        let sign_anchor = argmax_abs(gamma.view());
        let mut out = Self {
            gamma,
            basis,
            sign_anchor,
        };
        out.normalize();
        Ok(out)
    }

    /// Rescales to unit norm and applies the sign convention.
    pub fn normalize(&mut self) {
        let nrm = norm(self.gamma.view());
        if nrm > T::zero() {
            self.gamma.mapv_inplace(|v| v / nrm);
        }
        if self.gamma[self.sign_anchor] < T::zero() {
            self.gamma.mapv_inplace(|v| -v);
        }
    }

    pub fn eval(&self, s: T) -> T {
        self.basis.eval(s).dot(&self.gamma)
    }

    /// Values of `beta` at the given points.
    pub fn values_on(&self, points: &[T]) -> Array1<T> {
        self.basis.eval_matrix(points).dot(&self.gamma)
    }

    /// Matrix mapping `gamma` to subject indices: `X diag(w) B`.
    pub fn index_map(&self, x: ArrayView2<'_, T>, grid: &Grid<T>) -> Array2<T> {
        let mut b = self.basis.eval_matrix(grid.points());
        for (mut row, &w) in b.rows_mut().into_iter().zip(grid.weights()) {
            row.mapv_inplace(|v| v * w);
        }
        x.dot(&b)
    }
}

fn argmax_abs<T: Real>(v: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// One fitted component function, `g(u, a) = Psi(u)^T theta[:, a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit<T> {
    pub basis: ComponentBasis<T>,
    /// d x L coefficients (L = 1 for a main-effect model).
    pub theta: Array2<T>,
    pub shrinkage: T,
    pub active: bool,
}

impl<T: Real> ComponentFit<T> {
    pub fn index_range(&self) -> (T, T) {
        self.basis.range()
    }

    /// Value at `u` for 0-based arm column `arm`.
    pub fn eval(&self, u: T, arm: usize) -> T {
        if !self.active {
            return T::zero();
        }
        self.basis.eval(u).dot(&self.theta.column(arm))
    }

    /// Derivative in `u` for 0-based arm column `arm`.
    pub fn deriv(&self, u: T, arm: usize) -> T {
        if !self.active {
            return T::zero();
        }
        self.basis.deriv(u).dot(&self.theta.column(arm))
    }

    fn eval_all(&self, u: T, out: &mut [T], buf: &mut Vec<T>) {
        if !self.active {
            return;
        }
        buf.resize(self.basis.dim(), T::zero());
        self.basis.eval_into(u, buf);
        for (a, o) in out.iter_mut().enumerate() {
            *o += self
                .theta
                .column(a)
                .iter()
                .zip(buf.iter())
                .map(|(&t, &b)| t * b)
                .sum::<T>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalComponent<T> {
    pub beta: IndexCoefficient<T>,
    pub component: ComponentFit<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitDiagnostics<T> {
    /// Whether every Step 1 call met its tolerance.
    pub inner_converged: bool,
    /// Functional components skipped in Step 2 because their fitted
    /// derivative vanished at every observation.
    pub flat_components: Vec<usize>,
    /// Penalized objective after each sweep of the last Step 1 call.
    pub objective_trace: Vec<T>,
    /// Largest relative index-coefficient change at the last outer step.
    pub last_gamma_change: T,
    pub stop_reason: StopReason,
}

/// Why the alternation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative change of every index coefficient fell below `outer_tol`.
    GammaTolerance,
    /// A full alternation lowered the penalized objective by less than
    /// `objective_tol` (relative).
    ObjectiveStall,
    /// No functional component was active, so there was nothing to update.
    NoActiveIndex,
    #[default]
    MaxOuter,
    /// Only Step 1 was run.
    BackfitOnly,
}

/// A fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfamFit<T> {
    pub functional: Vec<FunctionalComponent<T>>,
    pub scalar: Vec<ComponentFit<T>>,
    pub grids: Vec<Grid<T>>,
    pub pi: Vec<T>,
    pub lambda: T,
    pub outer_iterations: usize,
    pub converged: bool,
    pub linear_mode: bool,
    pub target: Target,
    pub diagnostics: FitDiagnostics<T>,
}

impl<T: Real> CfamFit<T> {
    /// Number of arm columns in the component coefficients.
    pub fn n_columns(&self) -> usize {
        match self.target {
            Target::Interaction => self.pi.len(),
            Target::MainEffect => 1,
        }
    }

    pub fn p(&self) -> usize {
        self.functional.len()
    }

    pub fn q(&self) -> usize {
        self.scalar.len()
    }

    /// Active flags, functional components first then scalar ones.
    pub fn active_set(&self) -> Vec<bool> {
        self.functional
            .iter()
            .map(|f| f.component.active)
            .chain(self.scalar.iter().map(|c| c.active))
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.active_set().iter().filter(|&&a| a).count()
    }

    fn check_covariates(&self, cov: &Covariates<T>) -> Result<()> {
        if cov.p() != self.p() || cov.q() != self.q() {
            return Err(CfamError::Input(format!(
                "model expects {} functional and {} scalar covariates, got {} and {}",
                self.p(),
                self.q(),
                cov.p(),
                cov.q()
            )));
        }
        for (j, (f, g)) in cov.functional.iter().zip(&self.grids).enumerate() {
            if f.grid.points() != g.points() {
                return Err(CfamError::Input(format!(
                    "functional covariate {j} is observed on a different grid than in training"
                )));
            }
        }
        Ok(())
    }

    /// Single indices `<X_j, beta_j>` of every subject.
    pub fn indices(&self, cov: &Covariates<T>) -> Result<Vec<Array1<T>>> {
        self.check_covariates(cov)?;
        Ok(self
            .functional
            .iter()
            .zip(&cov.functional)
            .map(|(fc, x)| x.indices(fc.beta.values_on(x.grid.points()).view()))
            .collect())
    }

    /// n x L matrix of predicted interaction effects, one column per arm.
    /// For a main-effect model the single column is the predicted main effect.
    pub fn predict_scores(&self, cov: &Covariates<T>) -> Result<Array2<T>> {
        let idx = self.indices(cov)?;
        let cols = self.n_columns();
        let mut out = Array2::zeros((cov.n(), cols));
        let mut buf = Vec::new();
        let mut row = vec![T::zero(); cols];
        for i in 0..cov.n() {
            row.iter_mut().for_each(|v| *v = T::zero());
            for (fc, u) in self.functional.iter().zip(&idx) {
                fc.component.eval_all(u[i], &mut row, &mut buf);
            }
            for (k, comp) in self.scalar.iter().enumerate() {
                comp.eval_all(cov.scalars[[i, k]], &mut row, &mut buf);
            }
            for (a, v) in row.iter().enumerate() {
                out[[i, a]] = *v;
            }
        }
        Ok(out)
    }

    /// Fitted vector of every component on the given subjects, functional
    /// components first. `arms` are 1-based (ignored for main-effect models).
    pub fn fitted_components(&self, cov: &Covariates<T>, arms: &[usize]) -> Result<Vec<Array1<T>>> {
        let idx = self.indices(cov)?;
        let col = |i: usize| match self.target {
            Target::Interaction => arms[i] - 1,
            Target::MainEffect => 0,
        };
        let mut out = Vec::with_capacity(self.p() + self.q());
        for (fc, u) in self.functional.iter().zip(&idx) {
            out.push(Array1::from_iter((0..cov.n()).map(|i| fc.component.eval(u[i], col(i)))));
        }
        for (k, comp) in self.scalar.iter().enumerate() {
            out.push(Array1::from_iter(
                (0..cov.n()).map(|i| comp.eval(cov.scalars[[i, k]], col(i))),
            ));
        }
        Ok(out)
    }
}

/// Interaction effect for a single subject and 1-based `arm`.
pub fn predict_interaction<T: Real>(fit: &CfamFit<T>, x_new: &[ArrayView1<'_, T>], z_new: ArrayView1<'_, T>, arm: usize) -> Result<T> {
    if arm == 0 || arm > fit.n_columns() {
        return Err(CfamError::Input(format!(
            "arm {arm} outside 1..={}",
            fit.n_columns()
        )));
    }
    if x_new.len() != fit.p() || z_new.len() != fit.q() {
        return Err(CfamError::Input("covariate counts do not match the model".into()));
    }
    let mut total = T::zero();
    for ((fc, x), grid) in fit.functional.iter().zip(x_new).zip(&fit.grids) {
        let beta = fc.beta.values_on(grid.points());
        let u = crate::design::inner_product(x.view(), beta.view(), grid)?;
        total += fc.component.eval(u, arm - 1);
    }
    for (comp, &z) in fit.scalar.iter().zip(z_new.iter()) {
        total += comp.eval(z, arm - 1);
    }
    Ok(total)
}

/// Result of one block soft-thresholding update.
#[derive(Debug, Clone)]
pub struct SoftThreshold<T> {
    /// Shrunken fitted vector `s * f`.
    pub fitted: Array1<T>,
    /// Shrunken reparametrized coefficients.
    pub theta_tilde: Array1<T>,
    pub shrinkage: T,
    /// Unshrunken projection `f`.
    pub projection: Array1<T>,
}

/// Projects `residual` onto the column space of `d_tilde` and applies the
/// shrinkage factor `[1 - lambda sqrt(n) / ||f||]_+`.
pub fn soft_threshold_update<T: Real>(d_tilde: ArrayView2<'_, T>, residual: ArrayView1<'_, T>, lambda: T) -> Result<SoftThreshold<T>> {
    if d_tilde.nrows() != residual.len() {
        return Err(CfamError::Input("design and residual row counts differ".into()));
    }
    if !(lambda >= T::zero()) {
        return Err(CfamError::Config("lambda must be nonnegative".into()));
    }
    let ls = LeastSquares::new(d_tilde, default_rcond());
    Ok(threshold_with(&ls, residual, lambda))
}

fn threshold_with<T: Real>(ls: &LeastSquares<T>, residual: ArrayView1<'_, T>, lambda: T) -> SoftThreshold<T> {
    let n = T::from_usize_lossy(residual.len());
    let (projection, coef) = ls.project(residual);
    let fnorm = norm(projection.view());
    let shrinkage = shrinkage_factor(fnorm, lambda, n);
    SoftThreshold {
        fitted: projection.mapv(|v| v * shrinkage),
        theta_tilde: coef.mapv(|v| v * shrinkage),
        shrinkage,
        projection,
    }
}

/// `[1 - lambda sqrt(n) / ||f||]_+`, zero when `f` vanishes.
pub fn shrinkage_factor<T: Real>(fnorm: T, lambda: T, n: T) -> T {
    if fnorm > T::zero() {
        (T::one() - lambda * n.sqrt() / fnorm).max(T::zero())
    } else {
        T::zero()
    }
}

/// `(1/n) ||y - sum g||^2 + 2 lambda sum sqrt((1/n) ||g||^2)`.
pub fn penalized_objective<T: Real>(y: ArrayView1<'_, T>, components: &[Array1<T>], lambda: T) -> T {
    let n = T::from_usize_lossy(y.len());
    let mut resid = y.to_owned();
    let mut pen = T::zero();
    for g in components {
        resid -= g;
        pen += norm(g.view()) / n.sqrt();
    }
    resid.iter().map(|&r| r * r).sum::<T>() / n + T::lit(2.0) * lambda * pen
}

/// Per-component working state during a fit.
struct Slot<T: Real> {
    name: String,
    basis: ComponentBasis<T>,
    u: Array1<T>,
    ls: LeastSquares<T>,
    n_mat: Array2<T>,
    g: Array1<T>,
    coef: Array1<T>,
    shrinkage: T,
}

impl<T: Real> Slot<T> {
    fn build(name: String, u: Array1<T>, arms: &[usize], pi: &[T], dim: usize, opts: &FitOptions<T>) -> Result<Self> {
        let basis = ComponentBasis::for_values(u.as_slice().expect("contiguous"), dim, opts.linear_mode)?;
        let d = basis.dim();
        let u_slice = u.as_slice().expect("contiguous");
        let (design, n_mat) = match opts.target {
            Target::Interaction => {
                let design = build_design(u_slice, arms, &basis, pi.len())?;
                let cb = null_space_basis(pi, d)?;
                (reparametrize(design.view(), &cb)?, cb.n_mat)
            }
            Target::MainEffect => {
                let ones = vec![1usize; u.len()];
                let design = build_design(u_slice, &ones, &basis, 1)?;
                let means = column_means(design.view());
                let n_mat = null_space(means.view().insert_axis(ndarray::Axis(0)));
                (design.dot(&n_mat), n_mat)
            }
        };
        let ls = LeastSquares::new(design.view(), default_rcond());
        let ncoef = n_mat.ncols();
        let n = u.len();
        Ok(Self {
            name,
            basis,
            u,
            ls,
            n_mat,
            g: Array1::zeros(n),
            coef: Array1::zeros(ncoef),
            shrinkage: T::zero(),
        })
    }

    fn component(&self, columns: usize) -> ComponentFit<T> {
        let d = self.basis.dim();
        let theta_vec = self.n_mat.dot(&self.coef);
        let theta = Array2::from_shape_fn((d, columns), |(r, a)| theta_vec[a * d + r]);
        ComponentFit {
            basis: self.basis.clone(),
            theta,
            shrinkage: self.shrinkage,
            active: self.shrinkage > T::zero(),
        }
    }
}

/// Outcome of a Step 1 call.
#[derive(Debug, Clone)]
pub struct Step1Report<T> {
    pub sweeps: usize,
    pub converged: bool,
    pub objective_trace: Vec<T>,
}

fn check_finite<T: Real>(v: &Array1<T>, name: &str, iteration: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CfamError::Numerical {
            component: name.to_string(),
            iteration,
            detail: format!("non-finite {what}"),
        })
    }
}

fn run_step1<T: Real>(slots: &mut [Slot<T>], y: ArrayView1<'_, T>, lambda: T, opts: &FitOptions<T>, iteration: usize) -> Result<Step1Report<T>> {
    let n = y.len();
    let mut trace = Vec::new();
    let mut converged = slots.is_empty();
    let mut sweeps = 0;
    let mut residual = Array1::<T>::zeros(n);
    for _ in 0..opts.max_inner.max(1) {
        sweeps += 1;
        let mut total = Array1::<T>::zeros(n);
        for s in slots.iter() {
            total += &s.g;
        }
        let mut max_rel = T::zero();
        for slot in slots.iter_mut() {
            residual.assign(&y);
            residual -= &total;
            residual += &slot.g;
            let upd = threshold_with(&slot.ls, residual.view(), lambda);
            check_finite(&upd.fitted, &slot.name, iteration, "fitted component")?;
            let delta = norm((&upd.fitted - &slot.g).view());
            let scale = norm(upd.fitted.view()).max(norm(slot.g.view()));
            if scale > T::zero() {
                max_rel = max_rel.max(delta / scale);
            }
            total -= &slot.g;
            total += &upd.fitted;
            slot.g = upd.fitted;
            slot.coef = upd.theta_tilde;
            slot.shrinkage = upd.shrinkage;
        }
        let comps: Vec<Array1<T>> = slots.iter().map(|s| s.g.clone()).collect();
        trace.push(penalized_objective(y, &comps, lambda));
        if max_rel < opts.inner_tol {
            converged = true;
            break;
        }
    }
    Ok(Step1Report {
        sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Result of a Step 2 update for one coefficient function.
#[derive(Debug, Clone)]
pub struct BetaUpdate<T> {
    pub beta: IndexCoefficient<T>,
    /// The fitted derivative vanished everywhere; `beta` is unchanged.
    pub flat: bool,
}

/// One linearized least-squares update of a coefficient function.
///
/// `index_map` is `X diag(w) B` (n x m), `u` the current indices, `partial`
/// the partial residual excluding this component, `g` the component's
/// current fitted vector and `columns` the 0-based arm column per subject.
fn taylor_update<T: Real>(
    index_map: &Array2<T>,
    u: &Array1<T>,
    columns: &[usize],
    partial: &Array1<T>,
    g: &Array1<T>,
    component: &ComponentFit<T>,
    beta: &IndexCoefficient<T>,
) -> BetaUpdate<T> {
    let n = u.len();
    let d = component.basis.dim();
    let mut buf = vec![T::zero(); d];
    let mut gdot = Array1::<T>::zeros(n);
    for i in 0..n {
        component.basis.deriv_into(u[i], &mut buf);
        let col = component.theta.column(columns[i]);
        gdot[i] = buf.iter().zip(col.iter()).map(|(&b, &t)| b * t).sum();
    }
    if gdot.iter().all(|&v| v == T::zero()) {
        return BetaUpdate {
            beta: beta.clone(),
            flat: true,
        };
    }
    let rstar = Array1::from_iter((0..n).map(|i| partial[i] - g[i] + gdot[i] * u[i]));
    let mut ustar = index_map.clone();
    for (mut row, &gd) in ustar.rows_mut().into_iter().zip(gdot.iter()) {
        row.mapv_inplace(|v| v * gd);
    }
    let (gamma, _) = normal_equations_ridge(ustar.view(), rstar.view());
    if norm(gamma.view()) == T::zero() || gamma.iter().any(|v| !v.is_finite()) {
        return BetaUpdate {
            beta: beta.clone(),
            flat: true,
        };
    }
    let mut out = IndexCoefficient {
        gamma,
        basis: beta.basis.clone(),
        sign_anchor: beta.sign_anchor,
    };
    out.normalize();
    BetaUpdate { beta: out, flat: false }
}

/// Penalized loss of one component evaluated at the indices of `gamma`,
/// with the component function held fixed.
fn component_loss<T: Real>(map: &Array2<T>, gamma: &Array1<T>, columns: &[usize], partial: &Array1<T>, comp: &ComponentFit<T>, lambda: T) -> (T, Array1<T>) {
    let u = map.dot(gamma);
    let g = Array1::from_iter(u.iter().zip(columns).map(|(&ui, &c)| comp.eval(ui, c)));
    let n = T::from_usize_lossy(g.len());
    let rss = partial.iter().zip(g.iter()).map(|(&r, &v)| (r - v) * (r - v)).sum::<T>();
    (rss / n + T::lit(2.0) * lambda * norm(g.view()) / n.sqrt(), g)
}

/// Moves from `current` toward the linearized solution `proposal`, halving
/// the step until the penalized loss does not increase. Returns the accepted
/// coefficient function with the component's values at its indices, or
/// `None` when no tried step helps.
#[allow(clippy::too_many_arguments)]
fn damped_step<T: Real>(
    map: &Array2<T>,
    columns: &[usize],
    partial: &Array1<T>,
    comp: &ComponentFit<T>,
    current: &IndexCoefficient<T>,
    proposal: IndexCoefficient<T>,
    lambda: T,
    halvings: usize,
) -> Option<(IndexCoefficient<T>, Array1<T>)> {
    if halvings == 0 {
        let (_, g) = component_loss(map, &proposal.gamma, columns, partial, comp, lambda);
        return Some((proposal, g));
    }
    let (base, _) = component_loss(map, &current.gamma, columns, partial, comp, lambda);
    let mut step = T::one();
    for _ in 0..=halvings {
        let mut cand = current.clone();
        cand.gamma = &current.gamma + &((&proposal.gamma - &current.gamma) * step);
        cand.normalize();
        let (loss, g) = component_loss(map, &cand.gamma, columns, partial, comp, lambda);
        if loss <= base {
            return Some((cand, g));
        }
        step = step * T::lit(0.5);
    }
    None
}

fn arm_columns<T: Real>(data: &TrialData<T>, target: Target) -> Vec<usize> {
    match target {
        Target::Interaction => data.arms.iter().map(|&a| a - 1).collect(),
        Target::MainEffect => vec![0; data.n()],
    }
}

fn validate_fit_inputs<T: Real>(data: &TrialData<T>, lambda: T, opts: &FitOptions<T>) -> Result<()> {
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(CfamError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if opts.basis_dim.is_some_and(|d| d < 4) && !opts.linear_mode {
        return Err(CfamError::Config("basis dimension must be at least 4".into()));
    }
    if opts.target == Target::Interaction {
        crate::design::validate_pi(&data.pi)?;
    }
    // Coefficient functions are expanded on [0, 1].
    let tol = T::lit(1e-12);
    for (j, f) in data.covariates.functional.iter().enumerate() {
        let pts = f.grid.points();
        if pts[0] < -tol || pts[pts.len() - 1] > T::one() + tol {
            return Err(CfamError::Input(format!("grid of functional covariate {} must lie in [0, 1]", j + 1)));
        }
    }
    Ok(())
}

fn relative_gamma_change<T: Real>(old: &Array1<T>, new: &Array1<T>) -> T {
    let floor = T::lit(1e-8);
    old.iter()
        .zip(new.iter())
        .filter(|(_, &nw)| nw.abs() >= floor)
        .map(|(&o, &nw)| ((nw - o) / nw).abs())
        .fold(T::zero(), |m, v| m.max(v))
}

/// Fits the model at a fixed `lambda`, starting from `beta_j(s) = 1`.
pub fn fit<T: Real>(data: &TrialData<T>, lambda: T, opts: &FitOptions<T>) -> Result<CfamFit<T>> {
    fit_warm(data, lambda, opts, None)
}

/// Fits the model, optionally warm-starting coefficient functions and
/// fitted component vectors from `warm` (typically the fit at the previous
/// point of a lambda path).
pub fn fit_warm<T: Real>(data: &TrialData<T>, lambda: T, opts: &FitOptions<T>, warm: Option<&CfamFit<T>>) -> Result<CfamFit<T>> {
    validate_fit_inputs(data, lambda, opts)?;
    let n = data.n();
    let dim = opts.resolved_dim(n);
    let cov = &data.covariates;
    let columns = arm_columns(data, opts.target);
    let (p, q) = (cov.p(), cov.q());

    let mut betas: Vec<IndexCoefficient<T>> = match warm {
        Some(w) if w.p() == p => w.functional.iter().map(|f| f.beta.clone()).collect(),
        _ => initial_coefficients(data, dim, opts.target)?,
    };
    let index_maps: Vec<Array2<T>> = betas
        .iter()
        .zip(&cov.functional)
        .map(|(b, x)| b.index_map(x.values.view(), &x.grid))
        .collect();

    let mut slots = Vec::with_capacity(p + q);
    for (j, (b, m)) in betas.iter().zip(&index_maps).enumerate() {
        slots.push(Slot::build(format!("X{}", j + 1), m.dot(&b.gamma), &data.arms, &data.pi, dim, opts)?);
    }
    for k in 0..q {
        slots.push(Slot::build(
            format!("Z{}", k + 1),
            cov.scalars.column(k).to_owned(),
            &data.arms,
            &data.pi,
            dim,
            opts,
        )?);
    }
    if let Some(w) = warm {
        if w.p() == p && w.q() == q {
            for (slot, g) in slots.iter_mut().zip(w.fitted_components(cov, &data.arms)?) {
                slot.g = g;
            }
        }
    }

    let mut stale = vec![false; p];
    let mut diagnostics = FitDiagnostics {
        inner_converged: true,
        ..Default::default()
    };
    let mut converged = false;
    let mut previous_objective: Option<T> = None;
    let mut outer = 0;
    let y = data.y.view();
    while outer < opts.max_outer.max(1) {
        outer += 1;
        rebuild_stale(&mut slots, &mut stale, &betas, &index_maps, data, dim, opts)?;
        let report = run_step1(&mut slots, y, lambda, opts, outer)?;
        diagnostics.inner_converged &= report.converged;
        diagnostics.objective_trace = report.objective_trace;
        let objective = *diagnostics.objective_trace.last().expect("at least one sweep");
        if let Some(prev) = previous_objective {
            if prev - objective <= opts.objective_tol * objective.abs() {
                converged = true;
                diagnostics.stop_reason = StopReason::ObjectiveStall;
                break;
            }
        }
        previous_objective = Some(objective);

        let active: Vec<usize> = (0..p).filter(|&j| slots[j].shrinkage > T::zero()).collect();
        if active.is_empty() {
            converged = true;
            diagnostics.last_gamma_change = T::zero();
            diagnostics.stop_reason = StopReason::NoActiveIndex;
            break;
        }
        let mut change = T::zero();
        let mut total = Array1::<T>::zeros(n);
        for s in &slots {
            total += &s.g;
        }
        for &j in &active {
            let partial = &y - &total + &slots[j].g;
            let comp = slots[j].component(data_columns(data, opts.target));
            let upd = taylor_update(&index_maps[j], &slots[j].u, &columns, &partial, &slots[j].g, &comp, &betas[j]);
            if upd.flat {
                if !diagnostics.flat_components.contains(&j) {
                    diagnostics.flat_components.push(j);
                }
                continue;
            }
            check_finite(&upd.beta.gamma, &slots[j].name, outer, "index coefficients")?;
            let Some((beta, g_new)) = damped_step(&index_maps[j], &columns, &partial, &comp, &betas[j], upd.beta, lambda, opts.step_halvings) else {
                continue;
            };
            change = change.max(relative_gamma_change(&betas[j].gamma, &beta.gamma));
            betas[j] = beta;
            // Fresh partial residuals for the next coefficient function.
            total -= &slots[j].g;
            total += &g_new;
            slots[j].g = g_new;
            stale[j] = true;
        }
        diagnostics.last_gamma_change = change;
        if change < opts.outer_tol {
            converged = true;
            diagnostics.stop_reason = StopReason::GammaTolerance;
            break;
        }
    }
    if stale.iter().any(|&s| s) {
        rebuild_stale(&mut slots, &mut stale, &betas, &index_maps, data, dim, opts)?;
        let report = run_step1(&mut slots, y, lambda, opts, outer)?;
        diagnostics.inner_converged &= report.converged;
        diagnostics.objective_trace = report.objective_trace;
    }

    let cols = data_columns(data, opts.target);
    let functional = betas
        .into_iter()
        .zip(&slots[..p])
        .map(|(beta, slot)| FunctionalComponent {
            beta,
            component: slot.component(cols),
        })
        .collect();
    let scalar = slots[p..].iter().map(|s| s.component(cols)).collect();
    Ok(CfamFit {
        functional,
        scalar,
        grids: cov.functional.iter().map(|f| f.grid.clone()).collect(),
        pi: data.pi.clone(),
        lambda,
        outer_iterations: outer,
        converged,
        linear_mode: opts.linear_mode,
        target: opts.target,
        diagnostics,
    })
}

fn data_columns<T: Real>(data: &TrialData<T>, target: Target) -> usize {
    match target {
        Target::Interaction => data.n_arms(),
        Target::MainEffect => 1,
    }
}

fn rebuild_stale<T: Real>(
    slots: &mut [Slot<T>],
    stale: &mut [bool],
    betas: &[IndexCoefficient<T>],
    index_maps: &[Array2<T>],
    data: &TrialData<T>,
    dim: usize,
    opts: &FitOptions<T>,
) -> Result<()> {
    for j in 0..stale.len() {
        if !stale[j] {
            continue;
        }
        let u = index_maps[j].dot(&betas[j].gamma);
        let g = std::mem::take(&mut slots[j].g);
        let name = std::mem::take(&mut slots[j].name);
        slots[j] = Slot::build(name, u, &data.arms, &data.pi, dim, opts)?;
        slots[j].g = g;
        stale[j] = false;
    }
    Ok(())
}

/// Relative spread below which an index is treated as constant.
const DEGENERATE_INDEX: f64 = 1e-6;

/// Starting coefficient functions: `beta_j(s) = 1`, unless the resulting
/// index `int X_j` is (numerically) the same for every subject, as for
/// curves that integrate to zero. Such covariates start from the leading
/// direction of a constrained functional linear fit of `y` instead.
pub fn initial_coefficients<T: Real>(data: &TrialData<T>, dim: usize, target: Target) -> Result<Vec<IndexCoefficient<T>>> {
    let one = IndexCoefficient::initial(dim)?;
    let n = T::from_usize_lossy(data.n());
    let mut out = Vec::with_capacity(data.covariates.p());
    for x in &data.covariates.functional {
        let map = one.index_map(x.values.view(), &x.grid);
        let u = map.dot(&one.gamma);
        let mean = u.sum() / n;
        let spread = (u.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt();
        let w = x.grid.weights();
        let scale = (x
            .values
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(w).map(|(&v, &wl)| wl * v * v).sum::<T>())
            .sum::<T>()
            / n)
            .sqrt();
        let tiny = T::lit(DEGENERATE_INDEX) * scale;
        if spread > tiny || scale == T::zero() {
            out.push(one.clone());
        } else if let Some(b) = grid_mean_direction(&x.grid_means(), &map, &one, tiny) {
            out.push(b);
        } else {
            out.push(linear_direction(data, &map, &one, target));
        }
    }
    Ok(out)
}

/// Coefficient whose index best reproduces the plain average of each curve
/// over its grid points. `None` if that average is itself degenerate.
fn grid_mean_direction<T: Real>(target: &Array1<T>, map: &Array2<T>, one: &IndexCoefficient<T>, tiny: T) -> Option<IndexCoefficient<T>> {
    let n = T::from_usize_lossy(target.len());
    let mean = target.sum() / n;
    let spread = (target.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt();
    if spread <= tiny {
        return None;
    }
    let gamma = LeastSquares::new(map.view(), default_rcond()).solve(target.view());
    if norm(gamma.view()) == T::zero() || gamma.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = IndexCoefficient {
        sign_anchor: argmax_abs(gamma.view()),
        gamma,
        basis: one.basis.clone(),
    };
    out.normalize();
    Some(out)
}

/// Leading direction of the constrained per-arm linear fit
/// `y ~ <X, beta_a>` with `sum_a pi_a beta_a = 0` (or a single linear fit
/// for a main-effect model).
fn linear_direction<T: Real>(data: &TrialData<T>, map: &Array2<T>, one: &IndexCoefficient<T>, target: Target) -> IndexCoefficient<T> {
    let m = map.ncols();
    let direction = match target {
        Target::MainEffect => LeastSquares::new(map.view(), default_rcond()).solve(data.y.view()),
        Target::Interaction => {
            let l = data.n_arms();
            let mut design = Array2::<T>::zeros((data.n(), m * l));
            for (i, &a) in data.arms.iter().enumerate() {
                design
                    .slice_mut(ndarray::s![i, (a - 1) * m..a * m])
                    .assign(&map.row(i));
            }
            let Ok(cb) = null_space_basis(&data.pi, m) else {
                return one.clone();
            };
            let coef = LeastSquares::new(design.dot(&cb.n_mat).view(), default_rcond()).solve(data.y.view());
            let theta_vec = cb.n_mat.dot(&coef);
            let theta = Array2::from_shape_fn((m, l), |(r, a)| theta_vec[a * m + r]);
            crate::linalg::jacobi_svd(theta.view()).leading_left()
        }
    };
    if norm(direction.view()) == T::zero() || direction.iter().any(|v| !v.is_finite()) {
        return one.clone();
    }
    let mut out = IndexCoefficient {
        sign_anchor: argmax_abs(direction.view()),
        gamma: direction,
        basis: one.basis.clone(),
    };
    out.normalize();
    out
}

/// `max_j ||P_j y|| / sqrt(n)` under the initial coefficient functions: the
/// smallest penalty at which a first sweep from zero leaves every component
/// inactive.
pub fn lambda_max<T: Real>(data: &TrialData<T>, opts: &FitOptions<T>) -> Result<T> {
    let dim = opts.resolved_dim(data.n());
    let inits = initial_coefficients(data, dim, opts.target)?;
    let cov = &data.covariates;
    let sqrt_n = T::from_usize_lossy(data.n()).sqrt();
    let mut best = T::zero();
    let mut consider = |u: Array1<T>| -> Result<()> {
        let slot = Slot::build(String::new(), u, &data.arms, &data.pi, dim, opts)?;
        let (f, _) = slot.ls.project(data.y.view());
        best = best.max(norm(f.view()) / sqrt_n);
        Ok(())
    };
    for (x, init) in cov.functional.iter().zip(&inits) {
        consider(init.index_map(x.values.view(), &x.grid).dot(&init.gamma))?;
    }
    for k in 0..cov.q() {
        consider(cov.scalars.column(k).to_owned())?;
    }
    Ok(best)
}

/// Step 1 alone: sparse backfitting for fixed coefficient functions,
/// starting from all-zero components.
pub fn step1_backfit<T: Real>(data: &TrialData<T>, betas: &[IndexCoefficient<T>], lambda: T, opts: &FitOptions<T>) -> Result<(CfamFit<T>, Step1Report<T>)> {
    validate_fit_inputs(data, lambda, opts)?;
    let cov = &data.covariates;
    if betas.len() != cov.p() {
        return Err(CfamError::Input("one coefficient function per functional covariate is required".into()));
    }
    let dim = opts.resolved_dim(data.n());
    let mut slots = Vec::new();
    for (j, (b, x)) in betas.iter().zip(&cov.functional).enumerate() {
        let u = b.index_map(x.values.view(), &x.grid).dot(&b.gamma);
        slots.push(Slot::build(format!("X{}", j + 1), u, &data.arms, &data.pi, dim, opts)?);
    }
    for k in 0..cov.q() {
        slots.push(Slot::build(
            format!("Z{}", k + 1),
            cov.scalars.column(k).to_owned(),
            &data.arms,
            &data.pi,
            dim,
            opts,
        )?);
    }
    let report = run_step1(&mut slots, data.y.view(), lambda, opts, 0)?;
    let cols = data_columns(data, opts.target);
    let p = cov.p();
    let fit = CfamFit {
        functional: betas
            .iter()
            .cloned()
            .zip(&slots[..p])
            .map(|(beta, s)| FunctionalComponent {
                beta,
                component: s.component(cols),
            })
            .collect(),
        scalar: slots[p..].iter().map(|s| s.component(cols)).collect(),
        grids: cov.functional.iter().map(|f| f.grid.clone()).collect(),
        pi: data.pi.clone(),
        lambda,
        outer_iterations: 0,
        converged: report.converged,
        linear_mode: opts.linear_mode,
        target: opts.target,
        diagnostics: FitDiagnostics {
            inner_converged: report.converged,
            objective_trace: report.objective_trace.clone(),
            stop_reason: StopReason::BackfitOnly,
            ..Default::default()
        },
    };
    Ok((fit, report))
}

/// Step 2 alone: one linearized update of coefficient function `j` given a
/// fitted model. Inactive components are returned unchanged.
pub fn step2_update_beta<T: Real>(data: &TrialData<T>, j: usize, fit: &CfamFit<T>) -> Result<BetaUpdate<T>> {
    if j >= fit.p() {
        return Err(CfamError::Input(format!("no functional component {j}")));
    }
    let fc = &fit.functional[j];
    if !fc.component.active {
        return Ok(BetaUpdate {
            beta: fc.beta.clone(),
            flat: false,
        });
    }
    let cov = &data.covariates;
    let comps = fit.fitted_components(cov, &data.arms)?;
    let mut partial = data.y.clone();
    for (i, g) in comps.iter().enumerate() {
        if i != j {
            partial -= g;
        }
    }
    let x = &cov.functional[j];
    let index_map = fc.beta.index_map(x.values.view(), &x.grid);
    let u = index_map.dot(&fc.beta.gamma);
    let columns = arm_columns(data, fit.target);
    Ok(taylor_update(&index_map, &u, &columns, &partial, &comps[j], &fc.component, &fc.beta))
}
