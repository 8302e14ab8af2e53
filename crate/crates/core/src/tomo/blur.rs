use alloc::vec;
use alloc::vec::Vec;

use super::{GeometryError, GridSpec, ScanGeometry, Sinogram};
use crate::linop::{assert_io, LinearOperator, OperatorShape};

/// Separable Gaussian blur with zero-padded boundaries.
///
/// `sigma` is the standard deviation per axis in cm. Kernels are truncated at
/// ±4σ and normalized to unit sum; a zero width leaves that axis untouched.
/// Symmetric kernels make the operator self-adjoint.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    dims: [usize; 3],
    /// Half-kernel per axis: `k[0]` is the center tap.
    kernels: [Vec<f64>; 3],
}

fn half_kernel(sigma: f64, spacing: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let s = sigma / spacing;
    let radius = libm::ceil(4.0 * s) as usize;
    let mut k: Vec<f64> = (0..=radius)
        .map(|i| {
            let t = i as f64 / s;
            libm::exp(-0.5 * t * t)
        })
        .collect();
    let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

impl GaussianBlur {
    pub fn new(grid: &GridSpec, sigma: &[f64]) -> Result<Self, GeometryError> {
        let s = match (grid.is_3d(), sigma.len()) {
            (false, 2) => [sigma[0], 0.0, sigma[1]],
            (true, 3) => [sigma[0], sigma[1], sigma[2]],
            _ => {
                return Err(GeometryError::Grid(alloc::format!(
                    "blur needs one width per grid axis, got {}",
                    sigma.len()
                )))
            }
        };
        if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(GeometryError::Grid(alloc::format!("blur widths must be non-negative, got {sigma:?}")));
        }
        let sp = grid.spacing();
        Ok(Self {
            dims: grid.dims(),
            kernels: [half_kernel(s[0], sp[0]), half_kernel(s[1], sp[1]), half_kernel(s[2], sp[2])],
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kernels.iter().all(|k| k.len() == 1)
    }

    /// Full symmetric kernel along axis `a` (`2r + 1` taps).
    pub fn kernel(&self, a: usize) -> Vec<f64> {
        let h = &self.kernels[a];
        h.iter().rev().chain(h[1..].iter()).copied().collect()
    }

    fn pass(&self, axis: usize, src: &[f64], dst: &mut [f64]) {
        let h = &self.kernels[axis];
        let r = h.len() - 1;
        let n = self.dims[axis];
        let stride = match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        };
        for (sb, db) in src.chunks_exact(n * stride).zip(dst.chunks_exact_mut(n * stride)) {
            for j in 0..stride {
                for i in 0..n {
                    let mut acc = h[0] * sb[i * stride + j];
                    for t in 1..=r.min(n) {
                        if i >= t {
                            acc += h[t] * sb[(i - t) * stride + j];
                        }
                        if i + t < n {
                            acc += h[t] * sb[(i + t) * stride + j];
                        }
                    }
                    db[i * stride + j] = acc;
                }
            }
        }
    }

    fn run(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        let mut tmp = vec![0.0; x.len()];
        for axis in 0..3 {
            if self.kernels[axis].len() > 1 {
                self.pass(axis, y, &mut tmp);
                y.copy_from_slice(&tmp);
            }
        }
    }
}

impl LinearOperator for GaussianBlur {
    fn shape(&self) -> OperatorShape {
        let n = self.dims.iter().product();
        OperatorShape { domain_len: n, codomain_len: n }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        self.run(x, y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        self.run(y, x);
    }
}

/// Blurs every projection of `sino` along the detector bins (`sigma_bins`)
/// and rows (`sigma_rows`), both standard deviations in cm.
pub fn blur_sinogram(sino: &Sinogram, sigma_bins: f64, sigma_rows: f64) -> Result<Sinogram, GeometryError> {
    let g: &ScanGeometry = &sino.geometry;
    let grid = GridSpec::new_3d([g.n_bins, g.n_rows, g.n_views], [g.bin_width, g.row_pitch, 1.0])?;
    let blur = GaussianBlur::new(&grid, &[sigma_bins, sigma_rows, 0.0])?;
    let mut out = vec![0.0; sino.values.len()];
    blur.apply_into(&sino.values, &mut out);
    Sinogram::new(g.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::adjoint_test;

    #[test]
    fn zero_width_is_identity() {
        let g = GridSpec::new_3d([5, 4, 3], [0.1; 3]).unwrap();
        let b = GaussianBlur::new(&g, &[0.0, 0.0, 0.0]).unwrap();
        assert!(b.is_identity());
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        assert_eq!(b.apply(&x).unwrap(), x);
    }

    #[test]
    fn delta_spreads_to_normalized_kernel() {
        let g = GridSpec::new_2d(41, 41, 0.1, 0.1).unwrap();
        let b = GaussianBlur::new(&g, &[0.2, 0.3]).unwrap();
        let mut x = vec![0.0; g.len()];
        x[g.index(20, 0, 20)] = 1.0;
        let y = b.apply(&x).unwrap();
        let total: f64 = y.iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
        let (kx, kz) = (b.kernel(0), b.kernel(2));
        assert_eq!(kx.len(), 17);
        assert_eq!(kz.len(), 25);
        for dz in 0..kz.len() {
            for dx in 0..kx.len() {
                let v = y[g.index(20 + dx - 8, 0, 20 + dz - 12)];
                assert!((v - kx[dx] * kz[dz]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_interior_unchanged() {
        let g = GridSpec::new_3d([20, 20, 20], [1.0; 3]).unwrap();
        let b = GaussianBlur::new(&g, &[1.0, 1.5, 0.5]).unwrap();
        let y = b.apply(&vec![3.0; g.len()]).unwrap();
        // 4σ margins: 4, 6, 2 voxels
        for iz in 2..18 {
            for iy in 6..14 {
                for ix in 4..16 {
                    assert!((y[g.index(ix, iy, iz)] - 3.0).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn self_adjoint_and_validation() {
        let g = GridSpec::new_3d([7, 6, 5], [0.1, 0.2, 0.3]).unwrap();
        let b = GaussianBlur::new(&g, &[0.15, 0.2, 0.4]).unwrap();
        assert!(adjoint_test(&b, 20, 3) < 1e-13);
        assert!(GaussianBlur::new(&g, &[-0.1, 0.0, 0.0]).is_err());
        assert!(GaussianBlur::new(&g, &[0.1, 0.0]).is_err());
    }
}
