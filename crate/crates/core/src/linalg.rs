//! Small dense linear algebra kernels, generic over [`Scalar`].
//!
//! The problems this engine solves are tiny by linear-algebra standards
//! (tens of variables), so everything here is a straightforward dense
//! textbook implementation: Cholesky for SPD systems, partially pivoted LU
//! for general and KKT systems, and Householder QR for orthonormal bases
//! of working-set null spaces.

use ndarray::{Array1, Array2, ArrayView1, s};

use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Returns `None` when a pivot falls below a scale-relative tolerance, which
/// is how callers detect directions of (numerically) zero curvature.
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut scale = T::zero();
    for i in 0..n {
        scale = scale.max(a[[i, i]].abs());
    }
    let tol = scale * T::epsilon() * T::of(n.max(1) as f64);
    let mut l = Array2::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d = d - l[[j, k]] * l[[j, k]];
        }
        if d <= tol {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v = v - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / dj;
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let c = l[[i, k]] * y[k];
            y[i] -= c;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let c = l[[k, i]] * y[k];
            y[i] -= c;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Solve a dense linear system by LU with partial pivoting.
///
/// Handles the symmetric indefinite KKT systems as well; returns `None`
/// when the matrix is singular to working precision.
pub fn solve<T: Scalar>(a: &Array2<T>, b: &Array1<T>) -> Option<Array1<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut scale = T::zero();
    for v in lu.iter() {
        scale = scale.max(v.abs());
    }
    let tol = scale * T::epsilon() * T::of(n.max(1) as f64);
    for col in 0..n {
        let mut p = col;
        for row in (col + 1)..n {
            if lu[[row, col]].abs() > lu[[p, col]].abs() {
                p = row;
            }
        }
        if lu[[p, col]].abs() <= tol {
            return None;
        }
        if p != col {
            for k in 0..n {
                let t = lu[[p, k]];
                lu[[p, k]] = lu[[col, k]];
                lu[[col, k]] = t;
            }
            x.swap(p, col);
        }
        let piv = lu[[col, col]];
        for row in (col + 1)..n {
            let f = lu[[row, col]] / piv;
            lu[[row, col]] = f;
            for k in (col + 1)..n {
                let c = f * lu[[col, k]];
                lu[[row, k]] -= c;
            }
            let c = f * x[col];
            x[row] -= c;
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let c = lu[[i, k]] * x[k];
            x[i] -= c;
        }
        x[i] /= lu[[i, i]];
    }
    Some(x)
}

/// Full Householder QR of an `n x k` matrix with `n >= k`.
///
/// `q` is `n x n` orthogonal, `r` is `n x k` upper trapezoidal.
pub struct Qr<T> {
    pub q: Array2<T>,
    pub r: Array2<T>,
}

pub fn qr<T: Scalar>(a: &Array2<T>) -> Qr<T> {
    let n = a.nrows();
    let k = a.ncols();
    debug_assert!(n >= k);
    let mut r = a.clone();
    let mut q = Array2::eye(n);
    for j in 0..k {
        let mut norm = T::zero();
        for i in j..n {
            norm = norm + r[[i, j]] * r[[i, j]];
        }
        norm = norm.sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if r[[j, j]] >= T::zero() { -norm } else { norm };
        let mut v: Array1<T> = Array1::zeros(n);
        v[j] = r[[j, j]] - alpha;
        for i in (j + 1)..n {
            v[i] = r[[i, j]];
        }
        let vtv: T = v.iter().map(|x| *x * *x).sum();
        if vtv == T::zero() {
            continue;
        }
        let two = T::of(2.0);
        // r <- (I - 2 v v^T / v^T v) r, applied to the trailing columns
        for c in j..k {
            let mut dot = T::zero();
            for i in j..n {
                dot = dot + v[i] * r[[i, c]];
            }
            let f = two * dot / vtv;
            for i in j..n {
                let upd = f * v[i];
                r[[i, c]] -= upd;
            }
        }
        // accumulate q <- q (I - 2 v v^T / v^T v)
        for row in 0..n {
            let mut dot = T::zero();
            for i in j..n {
                dot = dot + q[[row, i]] * v[i];
            }
            let f = two * dot / vtv;
            for i in j..n {
                let upd = f * v[i];
                q[[row, i]] -= upd;
            }
        }
    }
    Qr { q, r }
}

impl<T: Scalar> Qr<T> {
    /// Orthonormal basis for the null space of `A^T` (the last `n - k`
    /// columns of `Q`).
    pub fn null_basis(&self) -> Array2<T> {
        let k = self.r.ncols();
        self.q.slice(s![.., k..]).to_owned()
    }

    /// First column whose `R` diagonal is negligible relative to the others,
    /// i.e. evidence that the factored columns were linearly dependent.
    pub fn deficient_col(&self) -> Option<usize> {
        let k = self.r.ncols();
        let mut scale = T::zero();
        for j in 0..k {
            scale = scale.max(self.r[[j, j]].abs());
        }
        let tol = scale * T::epsilon() * T::of(64.0);
        (0..k).find(|&j| self.r[[j, j]].abs() <= tol)
    }

    /// Least-squares solve `A x = b` through the stored factors.
    ///
    /// Only valid when `A` had full column rank.
    pub fn solve(&self, b: &Array1<T>) -> Array1<T> {
        let k = self.r.ncols();
        let qtb = self.q.t().dot(b);
        let mut x = Array1::zeros(k);
        for i in (0..k).rev() {
            let mut v = qtb[i];
            for j in (i + 1)..k {
                v = v - self.r[[i, j]] * x[j];
            }
            x[i] = v / self.r[[i, i]];
        }
        x
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns the values in ascending order. Used for PSD validation where a
/// Cholesky attempt is not enough (singular but valid matrices must pass).
pub fn sym_eigenvalues<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut scale = T::zero();
    for v in m.iter() {
        scale = scale.max(v.abs());
    }
    let tol = scale * T::epsilon() * T::of(n.max(1) as f64);
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (T::of(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| m[[i, i]]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Array1::from_vec(eig)
}

/// Rank-one outer product `u v^T`.
pub fn outer<T: Scalar>(u: ArrayView1<T>, v: ArrayView1<T>) -> Array2<T> {
    let mut m = Array2::zeros((u.len(), v.len()));
    for i in 0..u.len() {
        for j in 0..v.len() {
            m[[i, j]] = u[i] * v[j];
        }
    }
    m
}

/// Max absolute deviation from symmetry.
pub fn asymmetry<T: Scalar>(a: &Array2<T>) -> T {
    let n = a.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Max absolute entry.
pub fn inf_norm_vec<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_roundtrip() {
        let a: Array2<f64> = array![[4.0, 2.0, 0.5], [2.0, 5.0, 1.0], [0.5, 1.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let b: Array1<f64> = array![1.0, -2.0, 0.25];
        let x = cholesky_solve(&l, &b);
        let r = a.dot(&x) - &b;
        assert!(inf_norm_vec(&r) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_semidefinite() {
        let a: Array2<f64> = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky(&a).is_none());
        let z: Array2<f64> = array![[0.0, 0.0], [0.0, 0.0]];
        assert!(cholesky(&z).is_none());
    }

    #[test]
    fn lu_solves_indefinite_kkt_layout() {
        let a: Array2<f64> = array![
            [2.0, 0.0, 1.0],
            [0.0, 2.0, 1.0],
            [1.0, 1.0, 0.0]
        ];
        let b: Array1<f64> = array![1.0, 3.0, 1.0];
        let x = solve(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(inf_norm_vec(&r) < 1e-12);
    }

    #[test]
    fn lu_detects_singular() {
        let a: Array2<f64> = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(solve(&a, &array![1.0, 1.0]).is_none());
    }

    #[test]
    fn qr_null_basis_is_orthonormal_complement() {
        let a: Array2<f64> = array![[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [3.0, -1.0]];
        let f = qr(&a);
        // Q orthogonal
        let qtq = f.q.t().dot(&f.q);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - want).abs() < 1e-12);
            }
        }
        // A = Q R
        let back = f.q.dot(&f.r);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // null basis annihilates A^T
        let z = f.null_basis();
        let atz = a.t().dot(&z);
        for v in atz.iter() {
            assert!(v.abs() < 1e-12);
        }
        assert!(f.deficient_col().is_none());
    }

    #[test]
    fn qr_flags_dependent_columns() {
        let a: Array2<f64> = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let f = qr(&a);
        assert_eq!(f.deficient_col(), Some(1));
    }

    #[test]
    fn jacobi_eigenvalues_match_hand_values() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let a: Array2<f64> = array![[2.0, 1.0], [1.0, 2.0]];
        let e = sym_eigenvalues(&a);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 3.0).abs() < 1e-12);
        // singular PSD matrix keeps a zero eigenvalue
        let b: Array2<f64> = array![[1.0, 1.0], [1.0, 1.0]];
        let e = sym_eigenvalues(&b);
        assert!(e[0].abs() < 1e-12);
        assert!((e[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn qr_least_squares_matches_normal_equations() {
        let a: Array2<f64> = array![[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let b: Array1<f64> = array![1.0, 2.0, 2.0];
        let f = qr(&a);
        let x = f.solve(&b);
        // normal equations solved independently: A^T A x = A^T b
        let ata = a.t().dot(&a);
        let atb = a.t().dot(&b);
        let want = solve(&ata, &atb).unwrap();
        assert!((x[0] - want[0]).abs() < 1e-12);
        assert!((x[1] - want[1]).abs() < 1e-12);
    }
}
