//! Small dense linear-algebra kernels.
//!
//! The matrices handled here are tall and thin (n subjects by at most a few
//! dozen basis columns), so plain Householder QR followed by a one-sided
//! Jacobi SVD of the triangular factor is both accurate and cheap. All
//! routines are generic over [`Real`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Real;

/// Householder QR factorization of an `n x k` matrix with `n >= k`.
#[derive(Debug, Clone)]
pub struct HouseholderQr<T: Real> {
    /// Reflector vectors stored below the diagonal, R on and above.
    packed: Array2<T>,
    /// Scalar factors of the reflectors.
    tau: Vec<T>,
}

impl<T: Real> HouseholderQr<T> {
    pub fn new(a: ArrayView2<'_, T>) -> Self {
        let (n, k) = a.dim();
        assert!(n >= k, "HouseholderQr needs at least as many rows as columns");
        let mut packed = a.to_owned();
        let mut tau = vec![T::zero(); k];
        for j in 0..k {
            let norm_x = packed
                .slice(s![j.., j])
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt();
            if norm_x == T::zero() {
                continue;
            }
            let x0 = packed[[j, j]];
            let alpha = if x0 >= T::zero() { -norm_x } else { norm_x };
            // v = x - alpha e1, normalized so that v[0] = 1.
            let v0 = x0 - alpha;
            for i in (j + 1)..n {
                packed[[i, j]] = packed[[i, j]] / v0;
            }
            tau[j] = (alpha - x0) / alpha;
            packed[[j, j]] = alpha;
            for c in (j + 1)..k {
                let mut dot = packed[[j, c]];
                for i in (j + 1)..n {
                    dot += packed[[i, j]] * packed[[i, c]];
                }
                let f = tau[j] * dot;
                packed[[j, c]] -= f;
                for i in (j + 1)..n {
                    let vij = packed[[i, j]];
                    packed[[i, c]] -= f * vij;
                }
            }
        }
        Self { packed, tau }
    }

    /// Upper triangular factor (k x k).
    pub fn r(&self) -> Array2<T> {
        let k = self.packed.ncols();
        let mut r = Array2::zeros((k, k));
        for i in 0..k {
            for j in i..k {
                r[[i, j]] = self.packed[[i, j]];
            }
        }
        r
    }

    /// Applies Q to the columns of `m` (n x c), in place.
    fn apply_q(&self, m: &mut Array2<T>) {
        let (n, k) = self.packed.dim();
        for j in (0..k).rev() {
            if self.tau[j] == T::zero() {
                continue;
            }
            for c in 0..m.ncols() {
                let mut dot = m[[j, c]];
                for i in (j + 1)..n {
                    dot += self.packed[[i, j]] * m[[i, c]];
                }
                let f = self.tau[j] * dot;
                m[[j, c]] -= f;
                for i in (j + 1)..n {
                    m[[i, c]] -= f * self.packed[[i, j]];
                }
            }
        }
    }

    /// Thin orthonormal factor (n x k).
    pub fn q_thin(&self) -> Array2<T> {
        let (n, k) = self.packed.dim();
        let mut q = Array2::zeros((n, k));
        for i in 0..k {
            q[[i, i]] = T::one();
        }
        self.apply_q(&mut q);
        q
    }

    /// Full orthogonal factor (n x n).
    pub fn q_full(&self) -> Array2<T> {
        let n = self.packed.nrows();
        let mut q = Array2::eye(n);
        self.apply_q(&mut q);
        q
    }
}

/// Thin singular value decomposition `a = u diag(s) v^T` computed by
/// one-sided (Hestenes) Jacobi rotations. Singular values are unsorted.
#[derive(Debug, Clone)]
pub struct Svd<T: Real> {
    pub u: Array2<T>,
    pub s: Array1<T>,
    pub v: Array2<T>,
}

impl<T: Real> Svd<T> {
    /// Left singular vector of the largest singular value.
    pub fn leading_left(&self) -> Array1<T> {
        let mut best = 0;
        for (j, &v) in self.s.iter().enumerate() {
            if v > self.s[best] {
                best = j;
            }
        }
        self.u.column(best).to_owned()
    }
}

pub fn jacobi_svd<T: Real>(a: ArrayView2<'_, T>) -> Svd<T> {
    let (n, k) = a.dim();
    let mut w = a.to_owned();
    let mut v = Array2::<T>::eye(k);
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..n {
                    let (wp, wq) = (w[[i, p]], w[[i, q]]);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = c * t;
                for i in 0..n {
                    let (wp, wq) = (w[[i, p]], w[[i, q]]);
                    w[[i, p]] = c * wp - sn * wq;
                    w[[i, q]] = sn * wp + c * wq;
                }
                for i in 0..k {
                    let (vp, vq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vp - sn * vq;
                    v[[i, q]] = sn * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s = Array1::zeros(k);
    let mut u = Array2::zeros((n, k));
    for j in 0..k {
        let norm = w.column(j).iter().map(|&x| x * x).sum::<T>().sqrt();
        s[j] = norm;
        if norm > T::zero() {
            for i in 0..n {
                u[[i, j]] = w[[i, j]] / norm;
            }
        }
    }
    Svd { u, s, v }
}

/// Default relative singular-value cutoff for rank decisions.
pub fn default_rcond<T: Real>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(16.0))
}

/// Minimum-norm least-squares solver for a fixed design matrix.
///
/// Stores an orthonormal basis of the column space (restricted to singular
/// values above `rcond * s_max`) so projections cost O(n r).
#[derive(Debug, Clone)]
pub struct LeastSquares<T: Real> {
    /// n x r orthonormal basis of the retained column space.
    basis: Array2<T>,
    /// k x r map from basis coordinates to coefficients (V_r diag(1/s_r)).
    coef_map: Array2<T>,
}

impl<T: Real> LeastSquares<T> {
    pub fn new(a: ArrayView2<'_, T>, rcond: T) -> Self {
        let (n, k) = a.dim();
        let (u, svd) = if n >= k && k > 0 {
            let qr = HouseholderQr::new(a);
            let svd = jacobi_svd(qr.r().view());
            (qr.q_thin().dot(&svd.u), svd)
        } else {
            let svd = jacobi_svd(a);
            (svd.u.clone(), svd)
        };
        let smax = svd.s.iter().fold(T::zero(), |m, &x| m.max(x));
        let keep: Vec<usize> = (0..k)
            .filter(|&j| smax > T::zero() && svd.s[j] > rcond * smax)
            .collect();
        let r = keep.len();
        let mut basis = Array2::zeros((n, r));
        let mut coef_map = Array2::zeros((k, r));
        for (c, &j) in keep.iter().enumerate() {
            basis.column_mut(c).assign(&u.column(j));
            let inv = T::one() / svd.s[j];
            for i in 0..k {
                coef_map[[i, c]] = svd.v[[i, j]] * inv;
            }
        }
        Self { basis, coef_map }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_coef(&self) -> usize {
        self.coef_map.nrows()
    }

    /// Orthonormal basis of the column space.
    pub fn basis(&self) -> &Array2<T> {
        &self.basis
    }

    /// Returns the orthogonal projection of `y` onto the column space and
    /// the minimum-norm coefficient vector producing it.
    pub fn project(&self, y: ArrayView1<'_, T>) -> (Array1<T>, Array1<T>) {
        let coords = self.basis.t().dot(&y);
        (self.basis.dot(&coords), self.coef_map.dot(&coords))
    }

    /// Minimum-norm least-squares coefficients only.
    pub fn solve(&self, y: ArrayView1<'_, T>) -> Array1<T> {
        self.coef_map.dot(&self.basis.t().dot(&y))
    }
}

/// Orthonormal basis (as columns) of the null space of `c`, i.e. all `x`
/// with `c x = 0`. Computed from a full QR factorization of `c^T`.
pub fn null_space<T: Real>(c: ArrayView2<'_, T>) -> Array2<T> {
    let (rows, cols) = c.dim();
    if rows == 0 {
        return Array2::eye(cols);
    }
    if cols < rows {
        // More constraints than unknowns: null space from right singular vectors.
        let svd = jacobi_svd(c);
        let smax = svd.s.iter().fold(T::zero(), |m, &x| m.max(x));
        let null: Vec<usize> = (0..cols)
            .filter(|&j| svd.s[j] <= default_rcond::<T>() * smax)
            .collect();
        let mut out = Array2::zeros((cols, null.len()));
        for (c_out, &j) in null.iter().enumerate() {
            out.column_mut(c_out).assign(&svd.v.column(j));
        }
        return out;
    }
    let ct = c.t().to_owned();
    let qr = HouseholderQr::new(ct.view());
    let r = qr.r();
    let scale = (0..rows.min(cols))
        .map(|i| r[[i, i]].abs())
        .fold(T::zero(), |m, x| m.max(x));
    let rank = (0..rows.min(cols))
        .filter(|&i| r[[i, i]].abs() > default_rcond::<T>() * scale)
        .count();
    let q = qr.q_full();
    q.slice(s![.., rank..]).to_owned()
}

/// Lower Cholesky factor of a symmetric positive definite matrix, or `None`
/// if a non-positive pivot is met.
pub fn cholesky<T: Real>(a: ArrayView2<'_, T>) -> Option<Array2<T>> {
    let n = a.nrows();
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / djj;
        }
    }
    Some(l)
}

/// Solves `l l^T x = b` for lower triangular `l`.
pub fn cholesky_solve<T: Real>(l: &Array2<T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut v = y[i];
        for k in 0..i {
            v -= l[[i, k]] * y[k];
        }
        y[i] = v / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * y[k];
        }
        y[i] = v / l[[i, i]];
    }
    y
}

/// Inverse of an upper triangular matrix.
pub fn upper_triangular_inverse<T: Real>(r: &Array2<T>) -> Array2<T> {
    let n = r.nrows();
    let mut inv = Array2::<T>::zeros((n, n));
    for c in 0..n {
        inv[[c, c]] = T::one() / r[[c, c]];
        for i in (0..c).rev() {
            let mut v = T::zero();
            for k in (i + 1)..=c {
                v += r[[i, k]] * inv[[k, c]];
            }
            inv[[i, c]] = -v / r[[i, i]];
        }
    }
    inv
}

/// Solves the normal equations `a^T a x = a^T y`, adding a small ridge
/// (`1e-8` times the mean diagonal) when the Gram matrix is not numerically
/// positive definite. Returns the solution and whether the ridge was used.
pub fn normal_equations_ridge<T: Real>(a: ArrayView2<'_, T>, y: ArrayView1<'_, T>) -> (Array1<T>, bool) {
    let gram = a.t().dot(&a);
    let rhs = a.t().dot(&y);
    let k = gram.nrows();
    let mean_diag = gram.diag().sum() / T::from_usize_lossy(k.max(1));
    let cond_ok = |l: &Array2<T>| {
        let d = l.diag();
        let (mn, mx) = d
            .iter()
            .fold((T::infinity(), T::zero()), |(a, b), &x| (a.min(x), b.max(x)));
        mn > mx * T::lit(1e-7).max(T::epsilon().sqrt())
    };
    if let Some(l) = cholesky(gram.view()) {
        if cond_ok(&l) {
            return (cholesky_solve(&l, rhs.view()), false);
        }
    }
    let mut ridged = gram;
    let ridge = T::lit(1e-8) * if mean_diag > T::zero() { mean_diag } else { T::one() };
    for i in 0..k {
        ridged[[i, i]] += ridge;
    }
    match cholesky(ridged.view()) {
        Some(l) => (cholesky_solve(&l, rhs.view()), true),
        None => (Array1::zeros(k), true),
    }
}

/// Euclidean norm.
pub fn norm<T: Real>(x: ArrayView1<'_, T>) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Column means of a matrix.
pub fn column_means<T: Real>(a: ArrayView2<'_, T>) -> Array1<T> {
    let n = T::from_usize_lossy(a.nrows().max(1));
    a.sum_axis(Axis(0)).mapv(|v| v / n)
}
