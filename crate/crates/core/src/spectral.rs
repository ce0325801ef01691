//! 3-D FFT over the (T, H, W) axes per channel, low-pass masks,
//! frequency-domain noise recombination, and latent-level diagnostics.
//!
//! Spectra are DC-centered: after [`fft3`] the zero-frequency bin of each
//! axis sits at index `floor(n / 2)`, so radial masks are defined on the
//! same grid without further bookkeeping. The forward transform is
//! unnormalized; the inverse divides by `T*H*W`.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims4, LatentTensor};

/// Frequency-domain weights on the (T, H, W) grid, DC-centered.
///
/// Values lie in `[0, 1]`, the DC bin is exactly 1, and values are symmetric
/// under frequency negation so that recombining real inputs stays real. The
/// nominal cutoff `d0` is expressed as a fraction of Nyquist; values above 1
/// are accepted and simply describe an almost-pass-through mask.
#[derive(Debug, Clone)]
pub struct SpectralMask<T> {
    dims: (usize, usize, usize),
    values: Vec<T>,
    d0: T,
}

impl<T: Scalar> SpectralMask<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cutoff(&self) -> T {
        self.d0
    }

    /// Explicit per-bin weights in `[0, 1]` on the centered grid. The
    /// low-pass constructors guarantee a unit DC bin; this one only checks
    /// the range, so degenerate all-zero masks for complement identities
    /// are representable.
    pub fn from_values(dims: (usize, usize, usize), values: Vec<T>, d0: f64) -> Result<Self> {
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::shape(
                format!("{} mask bins", dims.0 * dims.1 * dims.2),
                format!("{}", values.len()),
            ));
        }
        if values.iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(SpectralMask {
            dims,
            values,
            d0: T::of(d0),
        })
    }
}

/// Complex spectrum of a latent tensor, DC-centered per axis.
#[derive(Debug, Clone)]
pub struct ComplexVolume<T> {
    dims: Dims4,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexVolume<T> {
    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }
}

/// Centered frequency of bin `i` on an axis of length `n`.
#[inline]
fn centered_freq(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}

/// Normalized radial distance of a (t, h, w) bin from DC; Nyquist = 1.
fn radial_distance(it: usize, ih: usize, iw: usize, dims: (usize, usize, usize)) -> f64 {
    let (nt, nh, nw) = dims;
    let dt = centered_freq(it, nt) / (nt as f64 / 2.0);
    let dh = centered_freq(ih, nh) / (nh as f64 / 2.0);
    let dw = centered_freq(iw, nw) / (nw as f64 / 2.0);
    (dt * dt + dh * dh + dw * dw).sqrt()
}

/// Gaussian low-pass mask `exp(-r^2 / (2 d0^2))` on the centered grid.
pub fn gaussian_lowpass_mask<T: Scalar>(
    dims: (usize, usize, usize),
    d0: f64,
) -> Result<SpectralMask<T>> {
    if d0 <= 0.0 {
        return Err(Error::invalid(format!("mask cutoff must be positive, got {d0}")));
    }
    let (nt, nh, nw) = dims;
    let mut values = Vec::with_capacity(nt * nh * nw);
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                let r = radial_distance(it, ih, iw, dims);
                values.push(T::of((-r * r / (2.0 * d0 * d0)).exp()));
            }
        }
    }
    Ok(SpectralMask {
        dims,
        values,
        d0: T::of(d0),
    })
}

/// Hard-cutoff mask: 1 inside radius `d0`, 0 outside. Test utility.
pub fn ideal_lowpass_mask<T: Scalar>(
    dims: (usize, usize, usize),
    d0: f64,
) -> Result<SpectralMask<T>> {
    if d0 <= 0.0 {
        return Err(Error::invalid(format!("mask cutoff must be positive, got {d0}")));
    }
    let (nt, nh, nw) = dims;
    let mut values = Vec::with_capacity(nt * nh * nw);
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                let r = radial_distance(it, ih, iw, dims);
                values.push(if r <= d0 { T::one() } else { T::zero() });
            }
        }
    }
    Ok(SpectralMask {
        dims,
        values,
        d0: T::of(d0),
    })
}

/// In-place FFT along one axis of a (T, H, W) complex volume.
fn fft_axis<T: Scalar>(
    data: &mut [Complex<T>],
    dims: (usize, usize, usize),
    axis: usize,
    planner: &mut FftPlanner<T>,
    inverse: bool,
) {
    let (nt, nh, nw) = dims;
    let n = [nt, nh, nw][axis];
    if n == 1 {
        return;
    }
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut line = vec![Complex::new(T::zero(), T::zero()); n];
    let (outer, stride, reps) = match axis {
        0 => (1usize, nh * nw, nh * nw),
        1 => (nt, nw, nw),
        _ => (nt * nh, 1, 1),
    };
    // axis 2 lines are contiguous; run the FFT in place per row.
    if axis == 2 {
        for row in data.chunks_exact_mut(nw) {
            fft.process(row);
        }
        return;
    }
    let block = if axis == 0 { nt * nh * nw } else { nh * nw };
    for o in 0..outer {
        let base = o * block;
        for r in 0..reps {
            for (k, l) in line.iter_mut().enumerate() {
                *l = data[base + r + k * stride];
            }
            fft.process(&mut line);
            for (k, l) in line.iter().enumerate() {
                data[base + r + k * stride] = *l;
            }
        }
    }
}

/// Cyclically shift a volume so DC moves to/from the center.
fn shift_volume<T: Scalar>(
    data: &[Complex<T>],
    dims: (usize, usize, usize),
    inverse: bool,
) -> Vec<Complex<T>> {
    let (nt, nh, nw) = dims;
    let mut out = vec![Complex::new(T::zero(), T::zero()); data.len()];
    let offset = |n: usize| if inverse { n - n / 2 } else { n / 2 };
    let (ot, oh, ow) = (offset(nt), offset(nh), offset(nw));
    for it in 0..nt {
        let dt = (it + ot) % nt;
        for ih in 0..nh {
            let dh = (ih + oh) % nh;
            for iw in 0..nw {
                let dw = (iw + ow) % nw;
                out[(dt * nh + dh) * nw + dw] = data[(it * nh + ih) * nw + iw];
            }
        }
    }
    out
}

/// Forward 3-D DFT along (T, H, W) per channel, DC-centered, unnormalized.
pub fn fft3<T: Scalar>(x: &LatentTensor<T>) -> ComplexVolume<T> {
    let dims = x.dims();
    let vol_dims = (dims.t, dims.h, dims.w);
    let vol = dims.t * dims.h * dims.w;
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(dims.count());
    for c in 0..dims.c {
        let mut buf: Vec<Complex<T>> = x.data()[c * vol..(c + 1) * vol]
            .iter()
            .map(|&v| Complex::new(v, T::zero()))
            .collect();
        for axis in 0..3 {
            fft_axis(&mut buf, vol_dims, axis, &mut planner, false);
        }
        out.extend(shift_volume(&buf, vol_dims, false));
    }
    ComplexVolume { dims, data: out }
}

/// Inverse of [`fft3`], normalized by `1 / (T*H*W)`. Returns the full
/// complex result; use [`ifft3_real`] to obtain the real field.
pub fn ifft3<T: Scalar>(spec: &ComplexVolume<T>) -> ComplexVolume<T> {
    let dims = spec.dims;
    let vol_dims = (dims.t, dims.h, dims.w);
    let vol = dims.t * dims.h * dims.w;
    let norm = T::one() / T::of_usize(vol);
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(dims.count());
    for c in 0..dims.c {
        let mut buf = shift_volume(&spec.data[c * vol..(c + 1) * vol], vol_dims, true);
        for axis in 0..3 {
            fft_axis(&mut buf, vol_dims, axis, &mut planner, true);
        }
        out.extend(buf.into_iter().map(|z| z * norm));
    }
    ComplexVolume { dims, data: out }
}

/// Inverse transform discarding the imaginary residue, which stays below
/// 1e-5 in magnitude for spectra produced from real input.
pub fn ifft3_real<T: Scalar>(spec: &ComplexVolume<T>) -> LatentTensor<T> {
    let full = ifft3(spec);
    let data = full.data.iter().map(|z| z.re).collect();
    LatentTensor::from_vec(full.dims, data).expect("dims preserved")
}

fn check_mask_dims<T: Scalar>(dims: Dims4, mask: &SpectralMask<T>) -> Result<()> {
    if (dims.t, dims.h, dims.w) != mask.dims {
        return Err(Error::shape(
            format!("mask over {}x{}x{}", dims.t, dims.h, dims.w),
            format!("{}x{}x{}", mask.dims.0, mask.dims.1, mask.dims.2),
        ));
    }
    Ok(())
}

/// Mix the low band of `low_src` with the high band of `high_src`:
/// spectrum `M * F(low) + (1 - M) * F(high)`, inverse-transformed to a real
/// tensor. With `renormalize` set, each bin is divided by
/// `sqrt(M^2 + (1-M)^2)` so white inputs stay white; default callers leave
/// this off.
pub fn freq_recombine_with<T: Scalar>(
    low_src: &LatentTensor<T>,
    high_src: &LatentTensor<T>,
    mask: &SpectralMask<T>,
    renormalize: bool,
) -> Result<LatentTensor<T>> {
    if low_src.dims() != high_src.dims() {
        return Err(Error::shape(
            low_src.dims().to_string(),
            high_src.dims().to_string(),
        ));
    }
    let dims = low_src.dims();
    check_mask_dims(dims, mask)?;
    let mut low = fft3(low_src);
    let high = fft3(high_src);
    let vol = dims.t * dims.h * dims.w;
    for c in 0..dims.c {
        for (k, m) in mask.values.iter().enumerate() {
            let i = c * vol + k;
            let inv = T::one() - *m;
            let mut z = low.data[i] * *m + high.data[i] * inv;
            if renormalize {
                let scale = (*m * *m + inv * inv).sqrt();
                if scale > T::zero() {
                    z = z / scale;
                }
            }
            low.data[i] = z;
        }
    }
    Ok(ifft3_real(&low))
}

/// [`freq_recombine_with`] without variance renormalization.
pub fn freq_recombine<T: Scalar>(
    low_src: &LatentTensor<T>,
    high_src: &LatentTensor<T>,
    mask: &SpectralMask<T>,
) -> Result<LatentTensor<T>> {
    freq_recombine_with(low_src, high_src, mask, false)
}

/// Mask-weighted spectral energy fraction, averaged over channels:
/// `sum(M^2 |X|^2) / sum(|X|^2)`, in `[0, 1]`.
pub fn low_freq_energy_ratio<T: Scalar>(
    x: &LatentTensor<T>,
    mask: &SpectralMask<T>,
) -> Result<T> {
    let dims = x.dims();
    check_mask_dims(dims, mask)?;
    let spec = fft3(x);
    let vol = dims.t * dims.h * dims.w;
    let mut acc = T::zero();
    for c in 0..dims.c {
        let mut num = T::zero();
        let mut den = T::zero();
        for (k, m) in mask.values.iter().enumerate() {
            let e = spec.data[c * vol + k].norm_sqr();
            num = num + *m * *m * e;
            den = den + e;
        }
        if den == T::zero() {
            return Err(Error::invalid("low_freq_energy_ratio on zero-energy input"));
        }
        acc = acc + num / den;
    }
    Ok(acc / T::of_usize(dims.c))
}

/// Mean adjacent-frame Pearson correlation over channels and frame pairs;
/// each frame is flattened over (H, W). Pairs where either frame is
/// constant are skipped; if every pair degenerates this is an error.
pub fn temporal_correlation<T: Scalar>(x: &LatentTensor<T>) -> Result<T> {
    let dims = x.dims();
    if dims.t < 2 {
        return Err(Error::invalid("temporal_correlation needs T >= 2"));
    }
    let frame = dims.h * dims.w;
    let n = T::of_usize(frame);
    let mut acc = T::zero();
    let mut pairs = 0usize;
    for c in 0..dims.c {
        for t in 0..dims.t - 1 {
            let a = &x.data()[(c * dims.t + t) * frame..(c * dims.t + t + 1) * frame];
            let b = &x.data()[(c * dims.t + t + 1) * frame..(c * dims.t + t + 2) * frame];
            let ma = a.iter().fold(T::zero(), |s, &v| s + v) / n;
            let mb = b.iter().fold(T::zero(), |s, &v| s + v) / n;
            let mut cov = T::zero();
            let mut va = T::zero();
            let mut vb = T::zero();
            for (&p, &q) in a.iter().zip(b) {
                let dp = p - ma;
                let dq = q - mb;
                cov = cov + dp * dq;
                va = va + dp * dp;
                vb = vb + dq * dq;
            }
            if va == T::zero() || vb == T::zero() {
                continue;
            }
            acc = acc + cov / (va * vb).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::invalid(
            "temporal_correlation: all adjacent frame pairs are degenerate",
        ));
    }
    Ok(acc / T::of_usize(pairs))
}
