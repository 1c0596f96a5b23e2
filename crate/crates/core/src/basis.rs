//! Cubic B-spline and Fourier bases.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{CfamError, Result};
use crate::linalg::{cholesky, upper_triangular_inverse};
use crate::scalar::Real;

const DEGREE: usize = 3;

/// Default basis dimension for a training sample of size `n`:
/// `round(4 + (2n)^(1/5))`.
pub fn default_basis_dim(n: usize) -> usize {
    (4.0 + (2.0 * n as f64).powf(0.2)).round() as usize
}

/// Clamped cubic B-spline basis with evenly spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis<T> {
    lo: T,
    hi: T,
    knots: Vec<T>,
}

impl<T: Real> SplineBasis<T> {
    /// Basis of dimension `interior_knots + 4` on `[lo, hi]`.
    pub fn new(lo: T, hi: T, interior_knots: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || !(hi > lo) {
            return Err(CfamError::Input(format!(
                "spline range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let mut knots = Vec::with_capacity(interior_knots + 2 * (DEGREE + 1));
        knots.extend(std::iter::repeat(lo).take(DEGREE + 1));
        let segments = T::from_usize_lossy(interior_knots + 1);
        for k in 1..=interior_knots {
            knots.push(lo + (hi - lo) * T::from_usize_lossy(k) / segments);
        }
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        Ok(Self { lo, hi, knots })
    }

    /// Basis with `dim` functions; `dim` must be at least 4.
    pub fn with_dim(lo: T, hi: T, dim: usize) -> Result<Self> {
        if dim < DEGREE + 1 {
            return Err(CfamError::Input(format!(
                "cubic spline basis needs dim >= 4, got {dim}"
            )));
        }
        Self::new(lo, hi, dim - (DEGREE + 1))
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn interior_knot_count(&self) -> usize {
        self.dim() - DEGREE - 1
    }

    pub fn degree(&self) -> usize {
        DEGREE
    }

    pub fn range(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn clamp(&self, s: T) -> T {
        s.max(self.lo).min(self.hi)
    }

    fn span(&self, s: T) -> usize {
        let last = self.dim() - 1;
        if s >= self.hi {
            return last;
        }
        let (mut low, mut high) = (DEGREE, last + 1);
        // Invariant: knots[low] <= s < knots[high].
        while high - low > 1 {
            let mid = (low + high) / 2;
            if s < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
        }
        low
    }

    /// Nonzero basis functions of degree `p` at span `i`: B_{i-p..=i, p}(s).
    fn local_values(&self, span: usize, s: T, p: usize) -> [T; DEGREE + 1] {
        let t = &self.knots;
        let mut out = [T::zero(); DEGREE + 1];
        let mut left = [T::zero(); DEGREE + 1];
        let mut right = [T::zero(); DEGREE + 1];
        out[0] = T::one();
        for j in 1..=p {
            left[j] = s - t[span + 1 - j];
            right[j] = t[span + j] - s;
            let mut saved = T::zero();
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == T::zero() { T::zero() } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        out
    }

    /// Values of all basis functions at `s` (clamped to the basis range).
    pub fn eval(&self, s: T) -> Array1<T> {
        let mut out = Array1::zeros(self.dim());
        self.eval_into(s, out.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn eval_into(&self, s: T, out: &mut [T]) {
        let s = self.clamp(s);
        out.iter_mut().for_each(|v| *v = T::zero());
        let span = self.span(s);
        let local = self.local_values(span, s, DEGREE);
        for (r, v) in local.iter().enumerate() {
            out[span - DEGREE + r] = *v;
        }
    }

    /// First derivatives of all basis functions at `s` (clamped).
    pub fn deriv(&self, s: T) -> Array1<T> {
        let mut out = Array1::zeros(self.dim());
        self.deriv_into(s, out.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn deriv_into(&self, s: T, out: &mut [T]) {
        let s = self.clamp(s);
        out.iter_mut().for_each(|v| *v = T::zero());
        let t = &self.knots;
        let span = self.span(s);
        // Quadratic pieces B_{span-2..=span, 2}.
        let quad = self.local_values(span, s, DEGREE - 1);
        let quad_at = |i: usize| -> T {
            if i + 2 >= span && i <= span {
                quad[i + 2 - span]
            } else {
                T::zero()
            }
        };
        let p = T::from_usize_lossy(DEGREE);
        for i in (span - DEGREE)..=span {
            let d1 = t[i + DEGREE] - t[i];
            let d2 = t[i + DEGREE + 1] - t[i + 1];
            let a = if d1 > T::zero() { quad_at(i) / d1 } else { T::zero() };
            let b = if d2 > T::zero() { quad_at(i + 1) / d2 } else { T::zero() };
            out[i] = p * (a - b);
        }
    }

    /// Gram matrix of the basis over its range, exact up to rounding
    /// (4-point Gauss-Legendre on each knot interval integrates the
    /// degree-6 products exactly).
    pub fn gram(&self) -> Array2<T> {
        const NODES: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const WEIGHTS: [f64; 4] = [
            0.347_854_845_137_453_9,
            0.652_145_154_862_546_1,
            0.652_145_154_862_546_1,
            0.347_854_845_137_453_9,
        ];
        let d = self.dim();
        let mut g = Array2::zeros((d, d));
        let mut vals = vec![T::zero(); d];
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !(b > a) {
                continue;
            }
            let half = (b - a) / T::lit(2.0);
            let mid = (a + b) / T::lit(2.0);
            for (x, wt) in NODES.iter().zip(WEIGHTS.iter()) {
                let s = mid + half * T::lit(*x);
                self.eval_into(s, &mut vals);
                let scale = half * T::lit(*wt);
                for i in 0..d {
                    if vals[i] == T::zero() {
                        continue;
                    }
                    for j in 0..d {
                        g[[i, j]] += scale * vals[i] * vals[j];
                    }
                }
            }
        }
        g
    }
}

/// The 4-dimensional Fourier system
/// `(sqrt2 sin 2 pi s, sqrt2 cos 2 pi s, sqrt2 sin 4 pi s, sqrt2 cos 4 pi s)`.
pub fn fourier4_eval<T: Real>(s: T) -> [T; 4] {
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    let r2 = T::lit(std::f64::consts::SQRT_2);
    [
        r2 * (two_pi * s).sin(),
        r2 * (two_pi * s).cos(),
        r2 * (T::lit(2.0) * two_pi * s).sin(),
        r2 * (T::lit(2.0) * two_pi * s).cos(),
    ]
}

/// Cubic B-spline basis on `[0, 1]` re-expressed in L2-orthonormal
/// coordinates, so that a coefficient vector's Euclidean norm equals the L2
/// norm of the function it represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoSplineBasis<T> {
    spline: SplineBasis<T>,
    /// Maps orthonormal coordinates to raw B-spline coefficients.
    transform: Array2<T>,
}

impl<T: Real> OrthoSplineBasis<T> {
    pub fn unit_interval(dim: usize) -> Result<Self> {
        let spline = SplineBasis::with_dim(T::zero(), T::one(), dim)?;
        let gram = spline.gram();
        let lower = cholesky(gram.view())
            .ok_or_else(|| CfamError::Input("spline Gram matrix is not positive definite".into()))?;
        let upper = lower.t().to_owned();
        let transform = upper_triangular_inverse(&upper);
        Ok(Self { spline, transform })
    }

    pub fn dim(&self) -> usize {
        self.spline.dim()
    }

    pub fn spline(&self) -> &SplineBasis<T> {
        &self.spline
    }

    pub fn transform(&self) -> &Array2<T> {
        &self.transform
    }

    /// Values of the orthonormal basis functions at `s`.
    pub fn eval(&self, s: T) -> Array1<T> {
        self.transform.t().dot(&self.spline.eval(s))
    }

    /// Matrix with one row per point holding the orthonormal basis values.
    pub fn eval_matrix(&self, points: &[T]) -> Array2<T> {
        let mut raw = Array2::zeros((points.len(), self.dim()));
        for (i, &s) in points.iter().enumerate() {
            raw.row_mut(i).assign(&self.spline.eval(s));
        }
        raw.dot(&self.transform)
    }

    /// Coordinates of the constant function 1.
    pub fn constant_one(&self) -> Array1<T> {
        // transform * gamma = ones  =>  gamma = transform^{-1} * ones.
        let upper = upper_triangular_inverse(&self.transform);
        upper.dot(&Array1::from_elem(self.dim(), T::one()))
    }
}

/// Basis used for a treatment-specific component function of one index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ComponentBasis<T> {
    /// Cubic regression spline; arguments are clamped to the training range.
    Spline(SplineBasis<T>),
    /// Affine functions `(1, (u - lo) / (hi - lo))`, no clamping.
    Affine { lo: T, hi: T },
}

impl<T: Real> ComponentBasis<T> {
    /// Builds a basis over the observed range of `values`. Degenerate ranges
    /// are widened by one half on each side.
    pub fn for_values(values: &[T], dim: usize, affine: bool) -> Result<Self> {
        let (mut lo, mut hi) = values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(CfamError::Input("index values must be finite and nonempty".into()));
        }
        let scale = T::one().max(lo.abs()).max(hi.abs());
        if hi - lo <= T::lit(1e-10) * scale {
            lo -= T::lit(0.5);
            hi += T::lit(0.5);
        }
        if affine {
            Ok(Self::Affine { lo, hi })
        } else {
            Ok(Self::Spline(SplineBasis::with_dim(lo, hi, dim)?))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Spline(b) => b.dim(),
            Self::Affine { .. } => 2,
        }
    }

    pub fn range(&self) -> (T, T) {
        match self {
            Self::Spline(b) => b.range(),
            Self::Affine { lo, hi } => (*lo, *hi),
        }
    }

    pub fn eval_into(&self, u: T, out: &mut [T]) {
        match self {
            Self::Spline(b) => b.eval_into(u, out),
            Self::Affine { lo, hi } => {
                out[0] = T::one();
                out[1] = (u - *lo) / (*hi - *lo);
            }
        }
    }

    pub fn deriv_into(&self, u: T, out: &mut [T]) {
        match self {
            Self::Spline(b) => b.deriv_into(u, out),
            Self::Affine { lo, hi } => {
                out[0] = T::zero();
                out[1] = T::one() / (*hi - *lo);
            }
        }
    }

    pub fn eval(&self, u: T) -> Array1<T> {
        let mut out = Array1::zeros(self.dim());
        self.eval_into(u, out.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn deriv(&self, u: T) -> Array1<T> {
        let mut out = Array1::zeros(self.dim());
        self.deriv_into(u, out.as_slice_mut().expect("contiguous"));
        out
    }
}
