//! Dense decompositions: one-sided Jacobi SVD and cyclic Jacobi
//! eigendecomposition for symmetric matrices.
//!
//! Both routines are deterministic: fixed sweep order, stable descending
//! sort, and a fixed sign convention (the largest-magnitude entry of each
//! left singular vector / eigenvector is made positive, earliest index
//! winning ties).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Thin SVD `m = U diag(S) V^T` with `k = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

fn sweep_tolerance<T: Scalar>() -> T {
    T::epsilon() * T::of(64.0)
}

/// One-sided Jacobi on the columns of a tall matrix (rows >= cols).
///
/// Returns (column-orthogonal B = U*diag(s), accumulated right rotations V).
fn one_sided_jacobi<T: Scalar>(a: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);
    let mut b = a.clone();
    let mut v = Matrix::identity(n);
    let tol = sweep_tolerance::<T>();
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                // Column dot products.
                let mut app = T::zero();
                let mut aqq = T::zero();
                let mut apq = T::zero();
                for r in 0..m {
                    let bp = b.data()[r * n + p];
                    let bq = b.data()[r * n + q];
                    app = app + bp * bp;
                    aqq = aqq + bq * bq;
                    apq = apq + bp * bq;
                }
                let denom = (app * aqq).sqrt();
                if denom == T::zero() || apq.abs() <= tol * denom {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (p,q) entry of B^T B.
                let tau = (aqq - app) / (T::of(2.0) * apq);
                let t = {
                    let sign = if tau >= T::zero() { T::one() } else { -T::one() };
                    sign / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let bp = b.data()[r * n + p];
                    let bq = b.data()[r * n + q];
                    b.data_mut()[r * n + p] = c * bp - s * bq;
                    b.data_mut()[r * n + q] = s * bp + c * bq;
                }
                for r in 0..n {
                    let vp = v.data()[r * n + p];
                    let vq = v.data()[r * n + q];
                    v.data_mut()[r * n + p] = c * vp - s * vq;
                    v.data_mut()[r * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (b, v)
}

/// Deterministic orthonormal completion for a zero column: the first
/// canonical basis vector with residual norm above 1/2 after projecting out
/// the existing columns, Gram-Schmidt normalized.
fn complete_column<T: Scalar>(u: &Matrix<T>, filled: &[usize], target: usize) -> Vec<T> {
    let m = u.rows();
    for e in 0..m {
        let mut cand = vec![T::zero(); m];
        cand[e] = T::one();
        for &j in filled {
            let mut dot = T::zero();
            for r in 0..m {
                dot = dot + cand[r] * u.get(r, j);
            }
            for r in 0..m {
                cand[r] = cand[r] - dot * u.get(r, j);
            }
        }
        let norm = cand.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        if norm > T::of(0.5) {
            for x in cand.iter_mut() {
                *x = *x / norm;
            }
            let _ = target;
            return cand;
        }
    }
    // Unreachable for m >= filled.len() + 1; keep a defined fallback.
    let mut cand = vec![T::zero(); m];
    cand[0] = T::one();
    cand
}

/// Thin SVD with the contract: `S` non-negative and non-increasing, `U`/`V`
/// orthonormal columns, and the largest-magnitude entry of each left
/// singular vector positive.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<Svd<T>> {
    if !m.is_finite() {
        return Err(Error::invalid("svd input contains NaN or Inf"));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::invalid("svd input is empty"));
    }
    if m.rows() < m.cols() {
        // Work on the transpose and swap the roles of U and V.
        let t = svd(&m.transpose())?;
        return Ok(apply_sign_convention(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        }));
    }
    let rows = m.rows();
    let k = m.cols();
    let (b, v_acc) = one_sided_jacobi(m);
    // Singular values = column norms of B; left vectors = normalized columns.
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<T> = b.column_norms();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(rows, k);
    let mut v = Matrix::zeros(k, k);
    let mut s = vec![T::zero(); k];
    let scale = m.frobenius_norm();
    let tiny = T::epsilon() * scale * T::of(16.0);
    let mut filled: Vec<usize> = Vec::new();
    let mut zero_cols: Vec<usize> = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        for r in 0..k {
            v.set(r, dst, v_acc.get(r, src));
        }
        if norms[src] > tiny && norms[src] > T::zero() {
            for r in 0..rows {
                u.set(r, dst, b.get(r, src) / norms[src]);
            }
            filled.push(dst);
        } else {
            zero_cols.push(dst);
        }
    }
    for dst in zero_cols {
        let col = complete_column(&u, &filled, dst);
        for r in 0..rows {
            u.set(r, dst, col[r]);
        }
        filled.push(dst);
    }
    Ok(apply_sign_convention(Svd { u, s, v }))
}

fn apply_sign_convention<T: Scalar>(mut svd: Svd<T>) -> Svd<T> {
    let rows = svd.u.rows();
    let k = svd.s.len();
    for j in 0..k {
        let mut best = T::zero();
        let mut flip = false;
        for r in 0..rows {
            let val = svd.u.get(r, j);
            if val.abs() > best {
                best = val.abs();
                flip = val < T::zero();
            }
        }
        if flip {
            for r in 0..rows {
                let v = svd.u.get(r, j);
                svd.u.set(r, j, -v);
            }
            for r in 0..svd.v.rows() {
                let v = svd.v.get(r, j);
                svd.v.set(r, j, -v);
            }
        }
    }
    svd
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns, with the same sign convention as [`svd`].
/// Householder tridiagonalization followed by implicit-shift QL; the
/// cyclic-Jacobi route ([`sym_eigen_jacobi`]) is kept as the reference the
/// test suite cross-checks against.
pub fn sym_eigen_desc<T: Scalar>(g: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    if g.rows() != g.cols() {
        return Err(Error::shape("square matrix", format!("{}x{}", g.rows(), g.cols())));
    }
    if !g.is_finite() {
        return Err(Error::invalid("eigen input contains NaN or Inf"));
    }
    let n = g.rows();
    let mut z = g.data().to_vec();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(&mut z, n, &mut d, &mut e);
    tqli(&mut d, &mut e, n, &mut z)?;
    // Columns of z are now eigenvectors for d; sort descending and fix signs.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap().then(i.cmp(&j)));
    let mut vals = vec![T::zero(); n];
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = d[src];
        let mut best = T::zero();
        let mut flip = false;
        for r in 0..n {
            let x = z[r * n + src];
            if x.abs() > best {
                best = x.abs();
                flip = x < T::zero();
            }
        }
        for r in 0..n {
            let x = z[r * n + src];
            vecs.set(r, dst, if flip { -x } else { x });
        }
    }
    Ok((vals, vecs))
}

/// Householder reduction of a symmetric matrix (flat row-major `z`) to
/// tridiagonal form, accumulating the transform in `z`. On exit `d` holds
/// the diagonal and `e` the subdiagonal (e[0] = 0).
fn tred2<T: Scalar>(z: &mut [T], n: usize, d: &mut [T], e: &mut [T]) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = T::zero();
        if l > 0 {
            let mut scale = T::zero();
            for k in 0..=l {
                scale += z[i * n + k].abs();
            }
            if scale == T::zero() {
                e[i] = z[i * n + l];
            } else {
                for k in 0..=l {
                    z[i * n + k] = z[i * n + k] / scale;
                    h += z[i * n + k] * z[i * n + k];
                }
                let f = z[i * n + l];
                let gsign = if f >= T::zero() { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * gsign;
                h -= f * gsign;
                z[i * n + l] = f - gsign;
                let mut f_acc = T::zero();
                for j in 0..=l {
                    z[j * n + i] = z[i * n + j] / h;
                    let mut gsum = T::zero();
                    for k in 0..=j {
                        gsum += z[j * n + k] * z[i * n + k];
                    }
                    for k in (j + 1)..=l {
                        gsum += z[k * n + j] * z[i * n + k];
                    }
                    e[j] = gsum / h;
                    f_acc += e[j] * z[i * n + j];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = z[i * n + j];
                    let gval = e[j] - hh * f;
                    e[j] = gval;
                    for k in 0..=j {
                        z[j * n + k] = z[j * n + k] - f * e[k] - gval * z[i * n + k];
                    }
                }
            }
        } else {
            e[i] = z[i * n + l];
        }
        d[i] = h;
    }
    d[0] = T::zero();
    e[0] = T::zero();
    for i in 0..n {
        let l = i;
        if d[i] != T::zero() {
            for j in 0..l {
                let mut gsum = T::zero();
                for k in 0..l {
                    gsum += z[i * n + k] * z[k * n + j];
                }
                for k in 0..l {
                    z[k * n + j] = z[k * n + j] - gsum * z[k * n + i];
                }
            }
        }
        d[i] = z[i * n + i];
        z[i * n + i] = T::one();
        for j in 0..l {
            z[j * n + i] = T::zero();
            z[i * n + j] = T::zero();
        }
    }
}

/// Implicit-shift QL on a tridiagonal matrix with eigenvector accumulation.
fn tqli<T: Scalar>(d: &mut [T], e: &mut [T], n: usize, z: &mut [T]) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= T::epsilon() * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::invalid("eigensolver failed to converge"));
            }
            let mut gval = (d[l + 1] - d[l]) / (T::of(2.0) * e[l]);
            let mut r = (gval * gval + T::one()).sqrt();
            let sign_r = if gval >= T::zero() { r } else { -r };
            gval = d[m] - d[l] + e[l] / (gval + sign_r);
            let mut s = T::one();
            let mut c = T::one();
            let mut p = T::zero();
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = (f * f + gval * gval).sqrt();
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] = d[i + 1] - p;
                    e[m] = T::zero();
                    break;
                }
                s = f / r;
                c = gval / r;
                gval = d[i + 1] - p;
                r = (d[i] - gval) * s + T::of(2.0) * c * b;
                p = s * r;
                d[i + 1] = gval + p;
                gval = c * r - b;
                for k in 0..n {
                    f = z[k * n + i + 1];
                    z[k * n + i + 1] = s * z[k * n + i] + c * f;
                    z[k * n + i] = c * z[k * n + i] - s * f;
                }
            }
            if r == T::zero() && m > l {
                continue;
            }
            d[l] = d[l] - p;
            e[l] = gval;
            e[m] = T::zero();
        }
    }
    Ok(())
}

/// Cyclic-Jacobi eigendecomposition; reference implementation cross-checked
/// against [`sym_eigen_desc`].
pub fn sym_eigen_jacobi<T: Scalar>(g: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    if g.rows() != g.cols() {
        return Err(Error::shape("square matrix", format!("{}x{}", g.rows(), g.cols())));
    }
    if !g.is_finite() {
        return Err(Error::invalid("eigen input contains NaN or Inf"));
    }
    let n = g.rows();
    let mut a = g.data().to_vec();
    let mut vt = vec![T::zero(); n * n];
    for i in 0..n {
        vt[i * n + i] = T::one();
    }
    let tol = sweep_tolerance::<T>() * g.frobenius_norm().max(T::min_positive_value());
    let skip = tol;
    let max_sweeps = 64;
    let mut rowp = vec![T::zero(); n];
    let mut rowq = vec![T::zero(); n];
    for _ in 0..max_sweeps {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= skip {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (T::of(2.0) * apq);
                let t = {
                    let sign = if tau >= T::zero() { T::one() } else { -T::one() };
                    sign / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                // New rows p and q of the symmetric matrix.
                rowp.copy_from_slice(&a[p * n..(p + 1) * n]);
                rowq.copy_from_slice(&a[q * n..(q + 1) * n]);
                {
                    let (dp, dq) = if p < q {
                        let (lo, hi) = a.split_at_mut(q * n);
                        (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
                    } else {
                        unreachable!("p < q by construction")
                    };
                    for ((dpv, dqv), (&rp, &rq)) in
                        dp.iter_mut().zip(dq.iter_mut()).zip(rowp.iter().zip(&rowq))
                    {
                        *dpv = c * rp - s * rq;
                        *dqv = s * rp + c * rq;
                    }
                }
                // Diagonal block gets the exact two-sided values.
                let two = T::of(2.0);
                a[p * n + p] = c * c * app - two * s * c * apq + s * s * aqq;
                a[q * n + q] = s * s * app + two * s * c * apq + c * c * aqq;
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                // Mirror the two affected columns from the updated rows.
                for r in 0..n {
                    if r != p && r != q {
                        a[r * n + p] = a[p * n + r];
                        a[r * n + q] = a[q * n + r];
                    }
                }
                // Accumulate the rotation on the transposed eigenvectors.
                let (vp, vq) = {
                    let (lo, hi) = vt.split_at_mut(q * n);
                    (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
                };
                for (vpv, vqv) in vp.iter_mut().zip(vq.iter_mut()) {
                    let rp = *vpv;
                    let rq = *vqv;
                    *vpv = c * rp - s * rq;
                    *vqv = s * rp + c * rq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<T> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));
    let mut vals = vec![T::zero(); n];
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = diag[src];
        let row = &vt[src * n..(src + 1) * n];
        // Sign convention per eigenvector.
        let mut best = T::zero();
        let mut flip = false;
        for &x in row {
            if x.abs() > best {
                best = x.abs();
                flip = x < T::zero();
            }
        }
        for (r, &x) in row.iter().enumerate() {
            vecs.set(r, dst, if flip { -x } else { x });
        }
    }
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_gaussian, Dims4, RngSeed};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let data = sample_gaussian::<f64>(Dims4::new(1, 1, rows, cols), RngSeed(seed))
            .unwrap()
            .into_data();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn reconstruction_residual(m: &Matrix<f64>, svd: &Svd<f64>) -> f64 {
        let k = svd.s.len();
        let mut rec = Matrix::<f64>::zeros(m.rows(), m.cols());
        for j in 0..k {
            for r in 0..m.rows() {
                let us = svd.u.get(r, j) * svd.s[j];
                for c in 0..m.cols() {
                    let v = rec.get(r, c) + us * svd.v.get(c, j);
                    rec.set(r, c, v);
                }
            }
        }
        let mut diff = 0.0;
        for (a, b) in rec.data().iter().zip(m.data()) {
            diff += (a - b) * (a - b);
        }
        diff.sqrt() / m.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    fn orthonormality_residual(u: &Matrix<f64>) -> f64 {
        let k = u.cols();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let mut dot = 0.0;
                for r in 0..u.rows() {
                    dot += u.get(r, i) * u.get(r, j);
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn svd_identity() {
        let m = Matrix::<f64>::identity(5);
        let d = svd(&m).unwrap();
        for s in &d.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let uv = d.u.matmul(&d.v.transpose()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((uv.get(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn svd_rank_one() {
        let u = [1.0, -2.0, 3.0];
        let v = [4.0, 0.5];
        let mut m = Matrix::<f64>::zeros(3, 2);
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                m.set(i, j, ui * vj);
            }
        }
        let d = svd(&m).unwrap();
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d.s[0] - nu * nv).abs() < 1e-10);
        assert!(d.s[1].abs() < 1e-10);
        assert!(orthonormality_residual(&d.u) < 1e-10);
    }

    #[test]
    fn svd_wide_random() {
        let m = random_matrix(64, 200, 21);
        let d = svd(&m).unwrap();
        assert!(reconstruction_residual(&m, &d) <= 1e-10);
        assert!(orthonormality_residual(&d.u) <= 1e-10);
        assert!(orthonormality_residual(&d.v) <= 1e-10);
        for w in d.s.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(d.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn svd_deterministic_and_signed() {
        let m = random_matrix(16, 40, 22);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.s, b.s);
        // Largest-magnitude entry of each left vector is positive.
        for j in 0..a.s.len() {
            let mut best = 0.0f64;
            let mut val = 0.0f64;
            for r in 0..a.u.rows() {
                if a.u.get(r, j).abs() > best {
                    best = a.u.get(r, j).abs();
                    val = a.u.get(r, j);
                }
            }
            assert!(val >= 0.0);
        }
    }

    #[test]
    fn svd_nan_rejected() {
        let mut m = Matrix::<f64>::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(svd(&m).is_err());
    }

    #[test]
    fn ql_matches_jacobi_reference() {
        for (n, seed) in [(3usize, 71u64), (16, 72), (64, 73), (5, 74)] {
            let m = random_matrix(n, 3 * n + 1, seed);
            let g = m.matmul(&m.transpose()).unwrap();
            let (va, ua) = sym_eigen_desc(&g).unwrap();
            let (vb, ub) = sym_eigen_jacobi(&g).unwrap();
            let scale = va[0].abs().max(1.0);
            for (a, b) in va.iter().zip(&vb) {
                assert!((a - b).abs() <= 1e-9 * scale, "eigenvalue {a} vs {b}");
            }
            assert!(orthonormality_residual(&ua) < 1e-10);
            // Compare the projector onto each eigenvector (sign-free) where
            // the spectrum is simple.
            for j in 0..n {
                let gap_ok = (j == 0 || (va[j - 1] - va[j]).abs() > 1e-6 * scale)
                    && (j + 1 == n || (va[j] - va[j + 1]).abs() > 1e-6 * scale);
                if !gap_ok {
                    continue;
                }
                let mut dot = 0.0;
                for r in 0..n {
                    dot += ua.get(r, j) * ub.get(r, j);
                }
                assert!(
                    (dot.abs() - 1.0).abs() < 1e-7,
                    "eigenvector {j} misaligned: |dot| = {}",
                    dot.abs()
                );
            }
        }
        // Degenerate spectrum: identity.
        let eye = Matrix::<f64>::identity(8);
        let (vals, vecs) = sym_eigen_desc(&eye).unwrap();
        for v in vals {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(orthonormality_residual(&vecs) < 1e-12);
        // Zero matrix.
        let zero = Matrix::<f64>::zeros(6, 6);
        let (vals, vecs) = sym_eigen_desc(&zero).unwrap();
        assert!(vals.iter().all(|v| v.abs() < 1e-14));
        assert!(orthonormality_residual(&vecs) < 1e-12);
    }

    #[test]
    fn eigen_matches_svd_on_gram() {
        let m = random_matrix(6, 30, 23);
        let g = m.matmul(&m.transpose()).unwrap();
        let (vals, vecs) = sym_eigen_desc(&g).unwrap();
        let d = svd(&m).unwrap();
        for j in 0..6 {
            assert!((vals[j].max(0.0).sqrt() - d.s[j]).abs() < 1e-8, "sigma {j}");
        }
        assert!(orthonormality_residual(&vecs) < 1e-12);
    }
}
