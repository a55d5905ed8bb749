//! Slice-level forward and backward kernels. The tape in `graph` wires these
//! together; nothing here allocates graph state.

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Geometry of a strided 1-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn conv_out_len(&self, len: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Dimension("stride and kernel must be positive".into()));
        }
        if len + 2 * self.padding < self.kernel {
            return Err(Error::Dimension(format!(
                "input length {len} with padding {} shorter than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((len + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    pub fn transpose_out_len(&self, len: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 || len == 0 {
            return Err(Error::Dimension("stride, kernel and length must be positive".into()));
        }
        let full = (len - 1) * self.stride + self.kernel;
        if full <= 2 * self.padding {
            return Err(Error::Dimension(format!(
                "transposed convolution of length {len} leaves no output after padding {}",
                self.padding
            )));
        }
        Ok(full - 2 * self.padding)
    }

    /// Range of short-side positions `t` whose tap `j` lands inside a long side of
    /// length `long`: `0 <= t*stride + j - padding < long`.
    #[inline]
    fn tap_range(&self, j: usize, short: usize, long: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > j { (p - j).div_ceil(s) } else { 0 };
        let limit = long + p;
        let hi = if limit > j {
            ((limit - j - 1) / s + 1).min(short)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `short[o, t] += Σ_c Σ_j w[o, c, j] · long[c, t·s + j − p]`.
///
/// Weight layout is `[c_out, c_in, k]` where `c_out` indexes the short side.
pub fn correlate<F: Real>(
    g: &ConvGeom,
    long: &[F],
    long_len: usize,
    weight: &[F],
    short: &mut [F],
    short_len: usize,
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for o in 0..g.c_out {
        let out = &mut short[o * short_len..(o + 1) * short_len];
        for c in 0..g.c_in {
            let x = &long[c * long_len..(c + 1) * long_len];
            let w = &weight[(o * g.c_in + c) * k..(o * g.c_in + c + 1) * k];
            for (j, &wj) in w.iter().enumerate() {
                let (lo, hi) = g.tap_range(j, short_len, long_len);
                if lo == hi {
                    continue;
                }
                if s == 1 {
                    let base = lo + j - p;
                    for (dst, &src) in out[lo..hi].iter_mut().zip(&x[base..base + hi - lo]) {
                        *dst += wj * src;
                    }
                } else {
                    for t in lo..hi {
                        out[t] += wj * x[t * s + j - p];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate`]: `long[c, t·s + j − p] += w[o, c, j] · short[o, t]`.
pub fn scatter<F: Real>(
    g: &ConvGeom,
    short: &[F],
    short_len: usize,
    weight: &[F],
    long: &mut [F],
    long_len: usize,
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for o in 0..g.c_out {
        let gy = &short[o * short_len..(o + 1) * short_len];
        for c in 0..g.c_in {
            let gx = &mut long[c * long_len..(c + 1) * long_len];
            let w = &weight[(o * g.c_in + c) * k..(o * g.c_in + c + 1) * k];
            for (j, &wj) in w.iter().enumerate() {
                let (lo, hi) = g.tap_range(j, short_len, long_len);
                if lo == hi {
                    continue;
                }
                if s == 1 {
                    let base = lo + j - p;
                    for (dst, &src) in gx[base..base + hi - lo].iter_mut().zip(&gy[lo..hi]) {
                        *dst += wj * src;
                    }
                } else {
                    for t in lo..hi {
                        gx[t * s + j - p] += wj * gy[t];
                    }
                }
            }
        }
    }
}

/// `gw[o, c, j] += Σ_t short[o, t] · long[c, t·s + j − p]`.
pub fn weight_grad<F: Real>(
    g: &ConvGeom,
    long: &[F],
    long_len: usize,
    short: &[F],
    short_len: usize,
    gw: &mut [F],
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for o in 0..g.c_out {
        let gy = &short[o * short_len..(o + 1) * short_len];
        for c in 0..g.c_in {
            let x = &long[c * long_len..(c + 1) * long_len];
            for j in 0..k {
                let (lo, hi) = g.tap_range(j, short_len, long_len);
                if lo == hi {
                    continue;
                }
                let mut acc = F::zero();
                if s == 1 {
                    let base = lo + j - p;
                    for (&a, &b) in gy[lo..hi].iter().zip(&x[base..base + hi - lo]) {
                        acc += a * b;
                    }
                } else {
                    for t in lo..hi {
                        acc += gy[t] * x[t * s + j - p];
                    }
                }
                gw[(o * g.c_in + c) * k + j] += acc;
            }
        }
    }
}

/// `c[m, n] += op(a)[m, k] · op(b)[k, n]` where `op` optionally transposes.
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = if ta { a[p * m + i] } else { a[i * k + p] };
            if aip == F::zero() {
                continue;
            }
            if tb {
                for (j, cj) in row.iter_mut().enumerate() {
                    *cj += aip * b[j * k + p];
                }
            } else {
                for (cj, &bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cj += aip * bj;
                }
            }
        }
    }
}

/// Mean and biased variance of a slice, accumulated in `F`.
pub fn mean_var<F: Real>(x: &[F]) -> (F, F) {
    let n = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, var)
}

/// Backward of `y = gamma · xhat + beta` with `xhat` normalized by batch statistics
/// over the slice: returns `dx` given `dy`, `xhat` and `1/sqrt(var + eps)`.
pub fn normalize_backward<F: Real>(gy: &[F], xhat: &[F], gamma: F, inv_std: F, gx: &mut [F]) {
    let n = F::of(gy.len() as f64);
    let sum_g: F = gy.iter().copied().sum();
    let sum_gx: F = gy.iter().zip(xhat).map(|(&g, &h)| g * h).sum();
    let scale = gamma * inv_std / n;
    for ((dst, &g), &h) in gx.iter_mut().zip(gy).zip(xhat) {
        *dst += scale * (n * g - sum_g - h * sum_gx);
    }
}

pub fn gelu<F: Real>(x: F) -> F {
    let v = x.as_f64();
    F::of(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    F::of(cdf + v * pdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_matches_bruteforce() {
        for stride in 1..4 {
            for padding in 0..4 {
                for kernel in 1..8 {
                    let g = ConvGeom { c_in: 1, c_out: 1, kernel, stride, padding };
                    for long in kernel.saturating_sub(2 * padding).max(1)..12 {
                        let Ok(short) = g.conv_out_len(long) else { continue };
                        for j in 0..kernel {
                            let expect: Vec<usize> = (0..short)
                                .filter(|&t| {
                                    let i = (t * stride + j) as isize - padding as isize;
                                    i >= 0 && (i as usize) < long
                                })
                                .collect();
                            let (lo, hi) = g.tap_range(j, short, long);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut c = [0.0; 4];
        gemm(true, false, 2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        let mut c = [0.0; 4];
        gemm(false, true, 2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
