//! Per-sample Tucker factorization (HOSVD) with fixed truncation ranks.
//!
//! Factors are the leading left singular vectors of each mode unfolding,
//! obtained from the spectral decomposition of the mode Gram matrix (the
//! unfoldings are short and very wide, so the Gram route is far cheaper than
//! a full SVD and yields the same subspaces). One pass, no alternating
//! refinement; the decomposition is deterministic given the sign convention
//! shared with [`crate::linalg`].

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::scalar::Scalar;
use crate::tensor::{mode_product, Dims4, LatentTensor, Matrix};

/// Truncation ranks `(R_c, R_t, R_h, R_w)`. Default `(4, 8, 32, 32)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TuckerRanks {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TuckerRanks {
    pub const fn new(c: usize, t: usize, h: usize, w: usize) -> Self {
        TuckerRanks { c, t, h, w }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.c, self.t, self.h, self.w]
    }

    pub fn rank(&self, mode: usize) -> usize {
        self.as_array()[mode - 1]
    }

    pub fn core_dims(&self) -> Dims4 {
        Dims4::new(self.c, self.t, self.h, self.w)
    }

    pub fn product(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    pub fn validate_for(&self, dims: Dims4) -> Result<()> {
        let r = self.as_array();
        let d = dims.as_array();
        for m in 0..4 {
            if r[m] == 0 || r[m] > d[m] {
                return Err(Error::invalid(format!(
                    "rank {} invalid for dimension {} of mode {}",
                    r[m],
                    d[m],
                    m + 1
                )));
            }
        }
        Ok(())
    }
}

impl Default for TuckerRanks {
    fn default() -> Self {
        TuckerRanks::new(4, 8, 32, 32)
    }
}

impl std::fmt::Display for TuckerRanks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.t, self.h, self.w)
    }
}

/// Core tensor plus the four column-orthonormal factor matrices.
#[derive(Debug, Clone)]
pub struct TuckerFactorization<T> {
    pub core: LatentTensor<T>,
    /// `factors[m]` has shape `dims[m] x ranks[m]` for mode `m + 1`.
    pub factors: [Matrix<T>; 4],
}

impl<T: Scalar> TuckerFactorization<T> {
    /// Dims of the tensor this factorization reconstructs to.
    pub fn outer_dims(&self) -> Dims4 {
        Dims4::new(
            self.factors[0].rows(),
            self.factors[1].rows(),
            self.factors[2].rows(),
            self.factors[3].rows(),
        )
    }

    pub fn ranks(&self) -> TuckerRanks {
        TuckerRanks::new(
            self.factors[0].cols(),
            self.factors[1].cols(),
            self.factors[2].cols(),
            self.factors[3].cols(),
        )
    }
}

/// Gram matrix of the mode-`mode` unfolding, computed from the tensor
/// without materializing the unfolding. The mode splits the flat layout
/// into (outer, mode, inner) with contiguous inner blocks, so entries
/// accumulate from contiguous dot products (modes 1..3) or per-row rank-1
/// updates (mode 4, inner length 1).
/// Unrolled dot product; the plain `fold` forms a sequential dependency
/// chain that blocks vectorization.
#[inline]
pub(crate) fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (ra, rb) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
        + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

pub(crate) fn mode_gram<T: Scalar>(x: &LatentTensor<T>, mode: usize) -> Matrix<T> {
    let d = x.dims().as_array();
    let n = d[mode - 1];
    let inner: usize = d[mode..].iter().product();
    let outer: usize = d[..mode - 1].iter().product();
    let data = x.data();
    let mut g = Matrix::zeros(n, n);
    if inner >= 8 {
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let bi = &data[base + i * inner..base + (i + 1) * inner];
                for j in i..n {
                    let bj = &data[base + j * inner..base + (j + 1) * inner];
                    let v = g.get(i, j) + dot4(bi, bj);
                    g.set(i, j, v);
                }
            }
        }
    } else if inner == 1 {
        // Mode 4: accumulate symmetric outer products of contiguous rows.
        let gd = g.data_mut();
        for row in data.chunks_exact(n) {
            for (i, &xi) in row.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let grow = &mut gd[i * n + i..(i + 1) * n];
                for (gv, &xj) in grow.iter_mut().zip(&row[i..]) {
                    *gv += xi * xj;
                }
            }
        }
    } else {
        let gd = g.data_mut();
        for row in data.chunks_exact(n * inner) {
            for t in 0..inner {
                for i in 0..n {
                    let xi = row[i * inner + t];
                    if xi == T::zero() {
                        continue;
                    }
                    let grow = &mut gd[i * n..(i + 1) * n];
                    for j in i..n {
                        grow[j] += xi * row[j * inner + t];
                    }
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = g.get(j, i);
            g.set(i, j, v);
        }
    }
    g
}

/// Leading left singular vectors of the mode-`mode` unfolding, via the mode
/// Gram matrix. Also returns the full singular-value vector of the mode.
fn mode_basis<T: Scalar>(
    x: &LatentTensor<T>,
    mode: usize,
    rank: usize,
) -> Result<(Matrix<T>, Vec<T>)> {
    let g = mode_gram(x, mode);
    let (vals, vecs) = sym_eigen_desc(&g)?;
    let spectrum: Vec<T> = vals.iter().map(|&v| v.max(T::zero()).sqrt()).collect();
    Ok((vecs.truncate_cols(rank), spectrum))
}

fn canonical_factors<T: Scalar>(dims: Dims4, ranks: TuckerRanks) -> [Matrix<T>; 4] {
    let make = |d: usize, r: usize| {
        let mut m = Matrix::zeros(d, r);
        for j in 0..r {
            m.set(j, j, T::one());
        }
        m
    };
    [
        make(dims.c, ranks.c),
        make(dims.t, ranks.t),
        make(dims.h, ranks.h),
        make(dims.w, ranks.w),
    ]
}

/// Truncated HOSVD of `x` at the given ranks.
///
/// An all-zero input falls back to the first `R_i` canonical basis vectors
/// with a zero core, keeping the pipeline total.
pub fn hosvd<T: Scalar>(x: &LatentTensor<T>, ranks: TuckerRanks) -> Result<TuckerFactorization<T>> {
    ranks.validate_for(x.dims())?;
    if x.frobenius_norm() == T::zero() {
        return Ok(TuckerFactorization {
            core: LatentTensor::zeros(ranks.core_dims()),
            factors: canonical_factors(x.dims(), ranks),
        });
    }
    let mut factors: Vec<Matrix<T>> = Vec::with_capacity(4);
    for mode in 1..=4 {
        let (basis, _) = mode_basis(x, mode, ranks.rank(mode))?;
        factors.push(basis);
    }
    let factors: [Matrix<T>; 4] = factors.try_into().expect("four modes");
    let mut core = x.clone();
    for (m, f) in factors.iter().enumerate() {
        core = mode_product(&core, &f.transpose(), m + 1)?;
    }
    Ok(TuckerFactorization { core, factors })
}

/// Per-mode singular-value spectra of `x` (full length per mode).
pub fn mode_spectra<T: Scalar>(x: &LatentTensor<T>) -> Result<[Vec<T>; 4]> {
    let mut out: Vec<Vec<T>> = Vec::with_capacity(4);
    for mode in 1..=4 {
        let (_, spectrum) = mode_basis(x, mode, 1)?;
        out.push(spectrum);
    }
    Ok(out.try_into().expect("four modes"))
}

/// Expand a factorization back to the full tensor:
/// core contracted with each factor in ascending mode order.
pub fn reconstruct<T: Scalar>(f: &TuckerFactorization<T>) -> Result<LatentTensor<T>> {
    let mut x = f.core.clone();
    for (m, u) in f.factors.iter().enumerate() {
        if u.cols() != x.dims().dim(m + 1) {
            return Err(Error::shape(
                format!("factor with {} columns for mode {}", x.dims().dim(m + 1), m + 1),
                format!("{}x{}", u.rows(), u.cols()),
            ));
        }
        x = mode_product(&x, u, m + 1)?;
    }
    Ok(x)
}

/// `||x - y||_F / ||x||_F`.
pub fn relative_error<T: Scalar>(x: &LatentTensor<T>, y: &LatentTensor<T>) -> Result<T> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims().to_string(), y.dims().to_string()));
    }
    let norm = x.frobenius_norm();
    if norm == T::zero() {
        return Err(Error::invalid("relative_error reference has zero norm"));
    }
    Ok(x.sub(y)?.frobenius_norm() / norm)
}

/// Element count of the dense tensor over the element count of the Tucker
/// representation, counting the core and all four factor matrices.
pub fn compression_ratio(dims: Dims4, ranks: TuckerRanks) -> Result<f64> {
    ranks.validate_for(dims)?;
    let dense = dims.count() as f64;
    let stored = (ranks.product()
        + dims.c * ranks.c
        + dims.t * ranks.t
        + dims.h * ranks.h
        + dims.w * ranks.w) as f64;
    Ok(dense / stored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_gaussian, RngSeed};

    type L = LatentTensor<f64>;

    fn random_tensor(dims: Dims4, seed: u64) -> L {
        sample_gaussian(dims, RngSeed(seed)).unwrap()
    }

    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let m = Matrix::from_vec(
            rows,
            cols,
            random_tensor(Dims4::new(1, 1, rows, cols), seed).into_data(),
        )
        .unwrap();
        crate::linalg::svd(&m).unwrap().u.truncate_cols(cols)
    }

    fn orthonormality_residual(u: &Matrix<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..u.cols() {
            for j in 0..u.cols() {
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
    fn full_rank_recovers_input() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 31);
        let f = hosvd(&x, TuckerRanks::new(2, 3, 4, 5)).unwrap();
        let back = reconstruct(&f).unwrap();
        assert!(relative_error(&x, &back).unwrap() <= 1e-10);
        for u in &f.factors {
            assert!(orthonormality_residual(u) <= 1e-6);
        }
    }

    #[test]
    fn planted_tucker_recovered() {
        // Exact Tucker product of a random (2,2,2,2) core with random
        // orthonormal factors on a (3,4,5,6) grid.
        let core = random_tensor(Dims4::new(2, 2, 2, 2), 32);
        let factors = [
            random_orthonormal(3, 2, 33),
            random_orthonormal(4, 2, 34),
            random_orthonormal(5, 2, 35),
            random_orthonormal(6, 2, 36),
        ];
        let x = reconstruct(&TuckerFactorization {
            core,
            factors: factors.clone(),
        })
        .unwrap();
        let f = hosvd(&x, TuckerRanks::new(2, 2, 2, 2)).unwrap();
        let back = reconstruct(&f).unwrap();
        assert!(relative_error(&x, &back).unwrap() <= 1e-8);
    }

    #[test]
    fn paper_scale_core_size() {
        // Latent (4,16,64,64) at ranks (4,8,32,32) has a 32768-value core.
        let ranks = TuckerRanks::default();
        assert_eq!(ranks.product(), 32_768);
        let dims = Dims4::new(4, 16, 64, 64);
        assert!(ranks.validate_for(dims).is_ok());
    }

    #[test]
    fn rank_exceeding_dim_rejected() {
        let x = random_tensor(Dims4::new(2, 3, 4, 5), 37);
        assert!(hosvd(&x, TuckerRanks::new(3, 3, 4, 5)).is_err());
    }

    #[test]
    fn zero_core_reconstructs_zero() {
        let f = TuckerFactorization::<f64> {
            core: L::zeros(Dims4::new(2, 2, 2, 2)),
            factors: [
                random_orthonormal(3, 2, 38),
                random_orthonormal(4, 2, 39),
                random_orthonormal(5, 2, 40),
                random_orthonormal(6, 2, 41),
            ],
        };
        let x = reconstruct(&f).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_tensor_fallback() {
        let x = L::zeros(Dims4::new(3, 4, 5, 6));
        let f = hosvd(&x, TuckerRanks::new(2, 2, 2, 2)).unwrap();
        assert!(f.core.data().iter().all(|&v| v == 0.0));
        for u in &f.factors {
            assert!(orthonormality_residual(u) <= 1e-12);
        }
        let back = reconstruct(&f).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncation_error_bounded_by_tail_energy() {
        // HOSVD quasi-optimality: squared truncation error is at most the
        // sum of the discarded squared singular values over all modes.
        let dims = Dims4::new(6, 6, 6, 6);
        for seed in 50..54 {
            let x = random_tensor(dims, seed);
            let spectra = mode_spectra(&x).unwrap();
            let ranks = TuckerRanks::new(3, 4, 5, 2);
            let f = hosvd(&x, ranks).unwrap();
            let err = x.sub(&reconstruct(&f).unwrap()).unwrap().frobenius_norm();
            let mut bound_sq = 0.0;
            for (m, spec) in spectra.iter().enumerate() {
                for &s in spec.iter().skip(ranks.as_array()[m]) {
                    bound_sq += s * s;
                }
            }
            assert!(
                err * err <= bound_sq * (1.0 + 1e-8),
                "err^2 {} > bound {}",
                err * err,
                bound_sq
            );
        }
    }

    #[test]
    fn reconstruction_error_monotone_in_each_rank() {
        let dims = Dims4::new(6, 6, 6, 6);
        let x = random_tensor(dims, 60);
        let base = TuckerRanks::new(3, 3, 3, 3);
        for mode in 1..=4 {
            let mut prev = f64::INFINITY;
            for r in 1..=6 {
                let mut arr = base.as_array();
                arr[mode - 1] = r;
                let ranks = TuckerRanks::new(arr[0], arr[1], arr[2], arr[3]);
                let f = hosvd(&x, ranks).unwrap();
                let err = relative_error(&x, &reconstruct(&f).unwrap()).unwrap();
                assert!(
                    err <= prev + 1e-10,
                    "mode {mode} rank {r}: {err} > {prev}"
                );
                prev = err;
            }
        }
    }

    #[test]
    fn hosvd_deterministic() {
        let x = random_tensor(Dims4::new(5, 5, 5, 5), 61);
        let a = hosvd(&x, TuckerRanks::new(2, 3, 4, 5)).unwrap();
        let b = hosvd(&x, TuckerRanks::new(2, 3, 4, 5)).unwrap();
        assert_eq!(a.core.data(), b.core.data());
        for (fa, fb) in a.factors.iter().zip(&b.factors) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn energy_compaction_with_planted_structure() {
        // Planted exact rank-(2,2,2,2) signal plus noise of amplitude sigma:
        // truncated reconstruction error stays within the empirical bound
        // 2*sigma*sqrt(discarded fraction * element count).
        let dims = Dims4::new(6, 6, 6, 6);
        let sigma = 0.05;
        let core = random_tensor(Dims4::new(2, 2, 2, 2), 62).scale(3.0);
        let clean = reconstruct(&TuckerFactorization {
            core,
            factors: [
                random_orthonormal(6, 2, 63),
                random_orthonormal(6, 2, 64),
                random_orthonormal(6, 2, 65),
                random_orthonormal(6, 2, 66),
            ],
        })
        .unwrap();
        let noise = random_tensor(dims, 67).scale(sigma);
        let x = clean.add(&noise).unwrap();
        let ranks = TuckerRanks::new(2, 2, 2, 2);
        let f = hosvd(&x, ranks).unwrap();
        let err = x.sub(&reconstruct(&f).unwrap()).unwrap().frobenius_norm();
        let n = dims.count() as f64;
        let kept = (ranks.product() + 4 * 6 * 2) as f64;
        let discarded_fraction = 1.0 - kept / n;
        let bound = 2.0 * sigma * (discarded_fraction * n).sqrt();
        assert!(err <= bound, "err {err} > bound {bound}");
    }

    #[test]
    fn relative_error_identities() {
        let x = random_tensor(Dims4::new(2, 3, 4, 5), 70);
        assert_eq!(relative_error(&x, &x).unwrap(), 0.0);
        let zero = L::zeros(x.dims());
        assert!((relative_error(&x, &zero).unwrap() - 1.0).abs() < 1e-12);
        let double = x.scale(2.0);
        assert!((relative_error(&x, &double).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_error(&zero, &x).is_err());
    }

    #[test]
    fn compression_ratio_paper_configuration() {
        let ratio = compression_ratio(Dims4::new(4, 16, 64, 64), TuckerRanks::default()).unwrap();
        assert!((ratio - 262_144.0 / 37_008.0).abs() < 1e-12);
        // Factor-inclusive accounting, not core-only (which would be 8).
        assert!((ratio - 7.08).abs() <= 0.01);
        assert!((ratio - 8.0).abs() > 0.5);
    }

    #[test]
    fn compression_ratio_full_rank_expands() {
        let dims = Dims4::new(2, 2, 2, 2);
        let ratio = compression_ratio(dims, TuckerRanks::new(2, 2, 2, 2)).unwrap();
        assert!(ratio < 1.0);
    }
}

#[doc(hidden)]
pub fn mode_gram_public<T: Scalar>(x: &LatentTensor<T>, mode: usize) -> Matrix<T> {
    mode_gram(x, mode)
}
