//! Dense rank-4 tensors, dense matrices, and seeded Gaussian sampling.
//!
//! [`LatentTensor`] is the substrate of the whole crate: a dense rank-4 real
//! tensor with dims `(C, T, H, W)`, stored row-major with `W` fastest. The
//! same container also houses Tucker cores (any rank-4 dims). Mode indices
//! throughout are 1-based: mode 1 = C, 2 = T, 3 = H, 4 = W.
//!
//! Gaussian sampling is pinned to a named stream: a ChaCha8 generator
//! (`rand_chacha`) seeded with the 64-bit seed, feeding the
//! `rand_distr::StandardNormal` ziggurat. The `f32` and `f64` streams differ
//! (they consume different numbers of random bits per variate); both are
//! reproducible given the seed, and the test suite pins a golden prefix for
//! seed 42.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rank-4 dimensions `(C, T, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims4 {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(c: usize, t: usize, h: usize, w: usize) -> Self {
        Dims4 { c, t, h, w }
    }

    pub const fn count(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    /// Dimension along a 1-based mode.
    pub fn dim(&self, mode: usize) -> usize {
        match mode {
            1 => self.c,
            2 => self.t,
            3 => self.h,
            4 => self.w,
            _ => panic!("mode out of range: {mode}"),
        }
    }

    pub fn with_dim(mut self, mode: usize, value: usize) -> Self {
        match mode {
            1 => self.c = value,
            2 => self.t = value,
            3 => self.h = value,
            4 => self.w = value,
            _ => panic!("mode out of range: {mode}"),
        }
        self
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.c, self.t, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.c == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::invalid(format!("zero dimension in {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.t, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Dims4 {
    fn from(d: (usize, usize, usize, usize)) -> Self {
        Dims4::new(d.0, d.1, d.2, d.3)
    }
}

/// Seed for the reproducible sampling stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSeed(pub u64);

/// Derive a decorrelated sub-seed from a base seed and a stream index.
///
/// SplitMix64 finalizer over `base ^ (stream * odd)`. Used wherever one
/// logical seed must fan out into several independent streams (per-record
/// seeds, per-round noise draws) without overlapping.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dense rank-4 real tensor, row-major with W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    dims: Dims4,
    data: Vec<T>,
}

impl<T: Scalar> LatentTensor<T> {
    pub fn zeros(dims: Dims4) -> Self {
        LatentTensor {
            dims,
            data: vec![T::zero(); dims.count()],
        }
    }

    pub fn from_vec(dims: Dims4, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::shape(
                format!("{} elements for dims {dims}", dims.count()),
                format!("{}", data.len()),
            ));
        }
        Ok(LatentTensor { dims, data })
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.dims.t + t) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, h: usize, w: usize) -> T {
        self.data[self.index(c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, h: usize, w: usize, v: T) {
        let i = self.index(c, t, h, w);
        self.data[i] = v;
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean of all entries.
    pub fn mean(&self) -> T {
        let sum = self.data.iter().fold(T::zero(), |acc, &x| acc + x);
        sum / T::of_usize(self.data.len())
    }

    /// Population variance of all entries.
    pub fn variance(&self) -> T {
        let m = self.mean();
        let ss = self
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + (x - m) * (x - m));
        ss / T::of_usize(self.data.len())
    }

    pub fn std(&self) -> T {
        self.variance().sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        LatentTensor {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(self.dims.to_string(), other.dims.to_string()));
        }
        Ok(LatentTensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(self.dims.to_string(), other.dims.to_string()));
        }
        Ok(LatentTensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }
}

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} elements for {rows}x{cols}", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                format!("inner dim {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    /// L2 norm of each column.
    pub fn column_norms(&self) -> Vec<T> {
        let mut norms = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (c, n) in norms.iter_mut().enumerate() {
                let v = self.data[r * self.cols + c];
                *n = *n + v * v;
            }
        }
        norms.iter().map(|&x| x.sqrt()).collect()
    }

    /// First `k` columns as a new matrix.
    pub fn truncate_cols(&self, k: usize) -> Matrix<T> {
        assert!(k <= self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.data[r * k..(r + 1) * k].copy_from_slice(&self.data[r * self.cols..r * self.cols + k]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Draw an i.i.d. standard-normal tensor from the documented stream.
///
/// ChaCha8 seeded with `seed`, consumed by the `StandardNormal` ziggurat.
/// Identical seed and scalar type yield an identical tensor.
pub fn sample_gaussian<T: Scalar>(dims: Dims4, seed: RngSeed) -> Result<LatentTensor<T>>
where
    StandardNormal: Distribution<T>,
{
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let data = (0..dims.count())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(LatentTensor { dims, data })
}

/// Same stream as [`sample_gaussian`], drawing from a caller-owned generator.
pub fn sample_gaussian_with<T: Scalar>(dims: Dims4, rng: &mut ChaCha8Rng) -> Result<LatentTensor<T>>
where
    StandardNormal: Distribution<T>,
{
    dims.validate()?;
    let data = (0..dims.count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(LatentTensor { dims, data })
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=4).contains(&mode) {
        return Err(Error::invalid(format!("mode must be in 1..=4, got {mode}")));
    }
    Ok(())
}

/// Column index of an element in the mode-`mode` unfolding.
///
/// Remaining modes cycle in ascending order with the earliest remaining mode
/// slowest; this ordering is part of the contract shared with [`fold`].
#[inline]
fn unfold_col(dims: Dims4, mode: usize, idx: [usize; 4]) -> usize {
    let d = dims.as_array();
    let mut col = 0usize;
    for m in 0..4 {
        if m + 1 == mode {
            continue;
        }
        col = col * d[m] + idx[m];
    }
    col
}

/// Mode-n matricization: shape `(dims[mode], product of remaining dims)`.
pub fn unfold<T: Scalar>(x: &LatentTensor<T>, mode: usize) -> Result<Matrix<T>> {
    check_mode(mode)?;
    let dims = x.dims();
    let n_rows = dims.dim(mode);
    let n_cols = dims.count() / n_rows;
    let mut m = Matrix::zeros(n_rows, n_cols);
    if mode == 1 {
        // Mode-1 column order coincides with the storage order.
        m.data.copy_from_slice(&x.data);
        return Ok(m);
    }
    let [dc, dt, dh, dw] = dims.as_array();
    let mut flat = 0usize;
    for c in 0..dc {
        for t in 0..dt {
            for h in 0..dh {
                for w in 0..dw {
                    let idx = [c, t, h, w];
                    let row = idx[mode - 1];
                    let col = unfold_col(dims, mode, idx);
                    m.data[row * n_cols + col] = x.data[flat];
                    flat += 1;
                }
            }
        }
    }
    Ok(m)
}

/// Exact inverse of [`unfold`].
pub fn fold<T: Scalar>(m: &Matrix<T>, mode: usize, dims: Dims4) -> Result<LatentTensor<T>> {
    check_mode(mode)?;
    dims.validate()?;
    let n_rows = dims.dim(mode);
    let n_cols = dims.count() / n_rows;
    if m.rows != n_rows || m.cols != n_cols {
        return Err(Error::shape(
            format!("{n_rows}x{n_cols} for mode {mode} of {dims}"),
            format!("{}x{}", m.rows, m.cols),
        ));
    }
    let mut x = LatentTensor::zeros(dims);
    if mode == 1 {
        x.data.copy_from_slice(&m.data);
        return Ok(x);
    }
    let [dc, dt, dh, dw] = dims.as_array();
    let mut flat = 0usize;
    for c in 0..dc {
        for t in 0..dt {
            for h in 0..dh {
                for w in 0..dw {
                    let idx = [c, t, h, w];
                    let row = idx[mode - 1];
                    let col = unfold_col(dims, mode, idx);
                    x.data[flat] = m.data[row * n_cols + col];
                    flat += 1;
                }
            }
        }
    }
    Ok(x)
}

/// Raw mode product on flat data; shared by the public op and the tape.
pub(crate) fn mode_product_raw<T: Scalar>(
    dims: Dims4,
    data: &[T],
    a: &Matrix<T>,
    mode: usize,
) -> (Dims4, Vec<T>) {
    let out_dims = dims.with_dim(mode, a.rows);
    let mut out = vec![T::zero(); out_dims.count()];
    let d = dims.as_array();
    // Split the flat index into (outer, mode, inner): modes before `mode`
    // are outer, modes after are inner. Row-major W-fastest layout makes the
    // inner block contiguous.
    let inner: usize = d[mode..].iter().product();
    let n_mode = d[mode - 1];
    let outer: usize = d[..mode - 1].iter().product();
    if inner == 1 {
        // Last mode: rows of length n_mode times a^T, accumulated axpy-style
        // over contiguous output rows.
        let at = a.transpose();
        for (src, dst) in data
            .chunks_exact(n_mode)
            .zip(out.chunks_exact_mut(a.rows))
        {
            for (j, &xj) in src.iter().enumerate() {
                if xj == T::zero() {
                    continue;
                }
                let atrow = at.row(j);
                for (dv, &av) in dst.iter_mut().zip(atrow) {
                    *dv = *dv + av * xj;
                }
            }
        }
        return (out_dims, out);
    }
    let out_stride = a.rows * inner;
    for o in 0..outer {
        let in_base = o * n_mode * inner;
        let out_base = o * out_stride;
        for i in 0..a.rows {
            let arow = a.row(i);
            let dst = &mut out[out_base + i * inner..out_base + (i + 1) * inner];
            for (j, &aij) in arow.iter().enumerate() {
                if aij == T::zero() {
                    continue;
                }
                let src = &data[in_base + j * inner..in_base + (j + 1) * inner];
                for (dv, &sv) in dst.iter_mut().zip(src) {
                    *dv = *dv + aij * sv;
                }
            }
        }
    }
    (out_dims, out)
}

/// Mode-n product: contract `x`'s given mode with the columns of `a`,
/// replacing that mode's dimension with `a.rows`. Accepts any rank-4 dims
/// (cores included), not just latent shapes.
pub fn mode_product<T: Scalar>(
    x: &LatentTensor<T>,
    a: &Matrix<T>,
    mode: usize,
) -> Result<LatentTensor<T>> {
    check_mode(mode)?;
    if a.cols != x.dims().dim(mode) {
        return Err(Error::shape(
            format!("matrix with {} columns for mode {mode} of {}", x.dims().dim(mode), x.dims()),
            format!("{}x{}", a.rows, a.cols),
        ));
    }
    let (dims, data) = mode_product_raw(x.dims(), &x.data, a, mode);
    Ok(LatentTensor { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    type L = LatentTensor<f64>;

    fn random_tensor(dims: Dims4, seed: u64) -> L {
        sample_gaussian(dims, RngSeed(seed)).unwrap()
    }

    #[test]
    fn gaussian_single_value_deterministic() {
        let a: L = sample_gaussian(Dims4::new(1, 1, 1, 1), RngSeed(7)).unwrap();
        let b: L = sample_gaussian(Dims4::new(1, 1, 1, 1), RngSeed(7)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data().len(), 1);
    }

    #[test]
    fn gaussian_moments_converge() {
        // 5-sigma bounds at n = 262144: sd of the mean is 1/sqrt(n) ~ 0.00195,
        // sd of the sample variance is sqrt(2/n) ~ 0.00276. The spec windows
        // (0.01 and 0.02) sit beyond 5 sigma of both.
        let x: L = sample_gaussian(Dims4::new(4, 16, 64, 64), RngSeed(1)).unwrap();
        assert_eq!(x.data().len(), 262_144);
        assert!(x.mean().abs() < 0.01, "mean {}", x.mean());
        assert!((x.variance() - 1.0).abs() < 0.02, "var {}", x.variance());
    }

    #[test]
    fn gaussian_distinct_seeds_differ() {
        let a: L = random_tensor(Dims4::new(2, 2, 2, 2), 1);
        let b: L = random_tensor(Dims4::new(2, 2, 2, 2), 2);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn gaussian_zero_dim_rejected() {
        let r: Result<L> = sample_gaussian(Dims4::new(0, 1, 1, 1), RngSeed(0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gaussian_golden_prefix_seed_42() {
        // Pins the documented stream (ChaCha8 + StandardNormal ziggurat):
        // checksum of the first 16 f64 bit patterns for seed 42.
        let x: LatentTensor<f64> = sample_gaussian(Dims4::new(1, 1, 4, 4), RngSeed(42)).unwrap();
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for v in x.data() {
            acc ^= v.to_bits();
            acc = acc.wrapping_mul(0x1000_0000_01b3);
        }
        // Frozen from the reference run of the rand_chacha 0.3 / rand_distr
        // 0.4 stream (see Cargo.lock).
        assert_eq!(
            acc, 0x22a1_b2da_3634_5b9b,
            "stream drifted: update only if the PRNG contract changed deliberately"
        );
    }

    #[test]
    fn unfold_mode1_matches_index_map() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 3);
        let m = unfold(&x, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 60));
        for c in 0..2 {
            for t in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let col = (t * 4 + h) * 5 + w;
                        assert_eq!(m.get(c, col), x.get(c, t, h, w));
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_fold_roundtrip_all_modes() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 4);
        for mode in 1..=4 {
            let m = unfold(&x, mode).unwrap();
            let back = fold(&m, mode, dims).unwrap();
            assert_eq!(back.data(), x.data(), "mode {mode}");
        }
    }

    #[test]
    fn fold_unfold_roundtrip_mode2() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 5);
        let m = unfold(&x, 2).unwrap();
        let folded = fold(&m, 2, dims).unwrap();
        let m2 = unfold(&folded, 2).unwrap();
        assert_eq!(m.data(), m2.data());
    }

    #[test]
    fn fold_shape_mismatch_rejected() {
        let m = Matrix::<f64>::zeros(3, 10);
        assert!(fold(&m, 2, Dims4::new(2, 3, 4, 5)).is_err());
    }

    #[test]
    fn unfold_bad_mode_rejected() {
        let x = random_tensor(Dims4::new(1, 1, 1, 1), 0);
        assert!(unfold(&x, 0).is_err());
        assert!(unfold(&x, 5).is_err());
    }

    #[test]
    fn trivial_1x1_unfold() {
        let x = L::from_vec(Dims4::new(1, 1, 1, 1), vec![2.5]).unwrap();
        for mode in 1..=4 {
            let m = unfold(&x, mode).unwrap();
            assert_eq!((m.rows(), m.cols()), (1, 1));
            assert_eq!(m.get(0, 0), 2.5);
        }
    }

    #[test]
    fn mode_product_identity() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 6);
        for mode in 1..=4 {
            let eye = Matrix::identity(dims.dim(mode));
            let y = mode_product(&x, &eye, mode).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    /// Four-nested-loop reference for the mode product.
    fn mode_product_naive(x: &L, a: &Matrix<f64>, mode: usize) -> L {
        let dims = x.dims();
        let out_dims = dims.with_dim(mode, a.rows());
        let mut out = L::zeros(out_dims);
        let [oc, ot, oh, ow] = out_dims.as_array();
        for c in 0..oc {
            for t in 0..ot {
                for h in 0..oh {
                    for w in 0..ow {
                        let out_idx = [c, t, h, w];
                        let i = out_idx[mode - 1];
                        let mut acc = 0.0;
                        for j in 0..dims.dim(mode) {
                            let mut in_idx = out_idx;
                            in_idx[mode - 1] = j;
                            acc += a.get(i, j)
                                * x.get(in_idx[0], in_idx[1], in_idx[2], in_idx[3]);
                        }
                        out.set(c, t, h, w, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn mode_product_matches_naive_loops() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 7);
        let a_data: Vec<f64> = sample_gaussian::<f64>(Dims4::new(1, 1, 7, 3), RngSeed(8))
            .unwrap()
            .into_data();
        let a = Matrix::from_vec(7, 3, a_data).unwrap();
        let fast = mode_product(&x, &a, 2).unwrap();
        let slow = mode_product_naive(&x, &a, 2);
        for (f, s) in fast.data().iter().zip(slow.data()) {
            assert!((f - s).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_products_commute_across_modes() {
        let dims = Dims4::new(2, 3, 4, 5);
        let x = random_tensor(dims, 9);
        let a = Matrix::from_vec(
            2,
            3,
            sample_gaussian::<f64>(Dims4::new(1, 1, 2, 3), RngSeed(10))
                .unwrap()
                .into_data(),
        )
        .unwrap();
        let b = Matrix::from_vec(
            3,
            5,
            sample_gaussian::<f64>(Dims4::new(1, 1, 3, 5), RngSeed(11))
                .unwrap()
                .into_data(),
        )
        .unwrap();
        let ab = mode_product(&mode_product(&x, &a, 2).unwrap(), &b, 4).unwrap();
        let ba = mode_product(&mode_product(&x, &b, 4).unwrap(), &a, 2).unwrap();
        for (p, q) in ab.data().iter().zip(ba.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_product_paper_shapes() {
        // Core (4,8,32,32) expanded by per-mode factors to (4,16,64,64).
        let core = random_tensor(Dims4::new(4, 8, 32, 32), 12);
        let uc = Matrix::<f64>::zeros(4, 4);
        let ut = Matrix::<f64>::zeros(16, 8);
        let uh = Matrix::<f64>::zeros(64, 32);
        let uw = Matrix::<f64>::zeros(64, 32);
        let y = mode_product(&core, &uc, 1).unwrap();
        let y = mode_product(&y, &ut, 2).unwrap();
        let y = mode_product(&y, &uh, 3).unwrap();
        let y = mode_product(&y, &uw, 4).unwrap();
        assert_eq!(y.dims(), Dims4::new(4, 16, 64, 64));
    }

    #[test]
    fn mode_product_dim_mismatch_rejected() {
        let x = random_tensor(Dims4::new(2, 3, 4, 5), 13);
        let a = Matrix::<f64>::zeros(7, 4); // mode 2 has dim 3, not 4
        assert!(mode_product(&x, &a, 2).is_err());
    }

    #[test]
    fn derive_seed_streams_distinct() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }
}
