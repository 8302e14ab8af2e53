//! Square-root Hanning filter along the detector axis.
//!
//! The filter multiplies the discrete Fourier transform of each detector row
//! by `m(ν) = sqrt(0.5 (1 + cos(π ν / (c ν_Nyq))))` for `|ν| <= c ν_Nyq` and
//! zero elsewhere. Because `m` is real and even, the filter is a symmetric
//! circulant matrix; it is applied as a circular convolution with the
//! precomputed kernel `h = IDFT(m)`, which makes the operator exactly
//! self-adjoint.

use alloc::vec::Vec;

use super::GeometryError;
use crate::linop::{assert_io, LinearOperator, OperatorShape};

/// Hanning multiplier `0.5 (1 + cos(π ν / (c ν_Nyq)))` at DFT index `k` of
/// an `n`-point transform (zero beyond the cutoff).
pub fn hanning_multiplier(k: usize, n: usize, cutoff: f64) -> f64 {
    let k = k % n;
    let nu = k.min(n - k) as f64 / n as f64;
    let q = nu / (cutoff * 0.5);
    if q <= 1.0 {
        0.5 * (1.0 + libm::cos(core::f64::consts::PI * q))
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct HanningSqrtFilter {
    n_bins: usize,
    n_lines: usize,
    cutoff: f64,
    kernel: Vec<f64>,
}

impl HanningSqrtFilter {
    /// Filter for `n_lines` independent detector rows of `n_bins` samples.
    pub fn new(n_bins: usize, n_lines: usize, cutoff: f64) -> Result<Self, GeometryError> {
        if n_bins < 2 {
            return Err(GeometryError::Scan("the filter needs at least 2 detector bins".into()));
        }
        if n_lines == 0 {
            return Err(GeometryError::Scan("the filter needs at least one detector row".into()));
        }
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(GeometryError::Scan(alloc::format!("cutoff must lie in (0, 1], got {cutoff}")));
        }
        let n = n_bins;
        let mult: Vec<f64> = (0..n).map(|k| libm::sqrt(hanning_multiplier(k, n, cutoff))).collect();
        // h[j] = (1/n) Σ_k m_k cos(2π jk/n); computed for j <= n/2 and mirrored
        // so that h[j] == h[n - j] holds exactly.
        let mut kernel = alloc::vec![0.0; n];
        for j in 0..=n / 2 {
            let mut acc = 0.0;
            for (k, m) in mult.iter().enumerate() {
                if *m != 0.0 {
                    let phase = ((j * k) % n) as f64 / n as f64;
                    acc += m * libm::cos(2.0 * core::f64::consts::PI * phase);
                }
            }
            kernel[j] = acc / n as f64;
        }
        for j in n / 2 + 1..n {
            kernel[j] = kernel[n - j];
        }
        Ok(Self { n_bins, n_lines, cutoff, kernel })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    fn convolve_row(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n_bins;
        let h = &self.kernel;
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            // y[i] = Σ_j h[(i - j) mod n] x[j]
            for j in 0..=i {
                acc += h[i - j] * x[j];
            }
            for j in i + 1..n {
                acc += h[n + i - j] * x[j];
            }
            *yi = acc;
        }
    }
}

impl LinearOperator for HanningSqrtFilter {
    fn shape(&self) -> OperatorShape {
        let n = self.n_bins * self.n_lines;
        OperatorShape { domain_len: n, codomain_len: n }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        for (xr, yr) in x.chunks_exact(self.n_bins).zip(y.chunks_exact_mut(self.n_bins)) {
            self.convolve_row(xr, yr);
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.apply_into(y, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::adjoint_test;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Direct DFT `(re, im)` of a real sequence.
    fn dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (j, v) in x.iter().enumerate() {
                    let ph = -2.0 * core::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn constant_row_passes_unchanged() {
        let f = HanningSqrtFilter::new(32, 2, 0.5).unwrap();
        let y = f.apply(&vec![1.5; 64]).unwrap();
        for v in y {
            assert!((v - 1.5).abs() < 1e-13);
        }
    }

    #[test]
    fn twice_is_hanning_in_frequency() {
        for (n, c) in [(32, 0.5), (33, 1.0), (64, 0.3)] {
            let f = HanningSqrtFilter::new(n, 1, c).unwrap();
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let y = f.apply(&f.apply(&x).unwrap()).unwrap();
            let (fx, fy) = (dft(&x), dft(&y));
            let scale = fx.iter().map(|(r, i)| (r * r + i * i).sqrt()).fold(0.0, f64::max);
            for k in 0..n {
                let h = hanning_multiplier(k, n, c);
                assert!((fy[k].0 - h * fx[k].0).abs() < 1e-12 * scale, "n{n} k{k}");
                assert!((fy[k].1 - h * fx[k].1).abs() < 1e-12 * scale, "n{n} k{k}");
            }
        }
    }

    #[test]
    fn filter_is_self_adjoint() {
        let f = HanningSqrtFilter::new(20, 3, 0.7).unwrap();
        assert!(adjoint_test(&f, 20, 1) < 1e-14);
        let k = f.kernel();
        for j in 1..20 {
            assert_eq!(k[j], k[20 - j]);
        }
    }

    #[test]
    fn rejects_bad_cutoff() {
        assert!(HanningSqrtFilter::new(16, 1, 0.0).is_err());
        assert!(HanningSqrtFilter::new(16, 1, 1.2).is_err());
        assert!(HanningSqrtFilter::new(1, 1, 0.5).is_err());
    }
}
