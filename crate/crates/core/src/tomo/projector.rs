//! Ray-driven fan-beam projector with linear (Joseph) interpolation.
//!
//! Each detector bin center defines one ray from the source. A ray whose
//! direction is closer to the `x` axis (in voxel units) is sampled once per
//! voxel column and linearly interpolated along `z`; otherwise it is sampled
//! once per voxel row and interpolated along `x`. Each sample is weighted by
//! the path length between consecutive columns (rows). Taps that fall outside
//! the grid contribute zero. The adjoint spreads with the same weights.
//!
//! 3D volumes are handled as a stack of fan-beam planes: every `y` slice is
//! projected in 2D, then detector rows are linearly interpolated between the
//! neighbouring slices.

use alloc::vec;
use alloc::vec::Vec;

use super::{GeometryError, GridSpec, ScanGeometry};
use crate::linop::{assert_io, LinearOperator, OperatorShape};

#[derive(Debug, Clone, Copy)]
struct Ray {
    /// Step along x (true) or z (false).
    along_x: bool,
    /// Fractional minor-axis index at major index `k` is `a + b * k`.
    a: f64,
    b: f64,
    /// Path length per major step.
    weight: f64,
    /// Major-index range touched by the ray.
    lo: usize,
    hi: usize,
}

/// Matched fan-beam projector / backprojector pair.
#[derive(Debug, Clone)]
pub struct FanBeamProjector {
    grid: GridSpec,
    geom: ScanGeometry,
    rays: Vec<Ray>,
    /// For each detector row, up to two `(slice, weight)` taps.
    row_taps: Vec<[(usize, f64); 2]>,
}

impl FanBeamProjector {
    pub fn new(grid: GridSpec, geom: ScanGeometry) -> Result<Self, GeometryError> {
        geom.check_grid(&grid)?;
        let [nx, _, nz] = grid.dims();
        let [dx, _, dz] = grid.spacing();
        let x0 = grid.coord(super::Axis::X, 0);
        let z0 = grid.coord(super::Axis::Z, 0);

        let mut rays = Vec::with_capacity(geom.n_views * geom.n_bins);
        for theta in geom.view_angles() {
            for b in 0..geom.n_bins {
                let (src, dir) = geom.ray_at(theta, b);
                let len = libm::sqrt(dir[0] * dir[0] + dir[1] * dir[1]);
                let along_x = libm::fabs(dir[0]) / dx >= libm::fabs(dir[1]) / dz;
                let ray = if along_x {
                    // z(x) = src_z + (x - src_x) * dir_z / dir_x, x = x0 + k dx
                    let slope = dir[1] / dir[0];
                    let a = (src[1] + (x0 - src[0]) * slope - z0) / dz;
                    let b = dx * slope / dz;
                    let (lo, hi) = major_range(a, b, nx, nz);
                    Ray { along_x, a, b, weight: dx * len / libm::fabs(dir[0]), lo, hi }
                } else {
                    let slope = dir[0] / dir[1];
                    let a = (src[0] + (z0 - src[1]) * slope - x0) / dx;
                    let b = dz * slope / dx;
                    let (lo, hi) = major_range(a, b, nz, nx);
                    Ray { along_x, a, b, weight: dz * len / libm::fabs(dir[1]), lo, hi }
                };
                rays.push(ray);
            }
        }

        let ny = grid.ny();
        let y0 = grid.coord(super::Axis::Y, 0);
        let dy = grid.spacing()[1];
        let row_taps = (0..geom.n_rows)
            .map(|r| {
                let f = if grid.is_3d() { (geom.row_position(r) - y0) / dy } else { 0.0 };
                let i0 = libm::floor(f);
                let w1 = f - i0;
                let tap = |i: f64, w: f64| {
                    if i >= 0.0 && (i as usize) < ny && w != 0.0 {
                        (i as usize, w)
                    } else {
                        (0, 0.0)
                    }
                };
                [tap(i0, 1.0 - w1), tap(i0 + 1.0, w1)]
            })
            .collect();

        Ok(Self { grid, geom, rays, row_taps })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    /// Projects one `y` slice into `out` (`n_views * n_bins`, bin-fastest).
    fn project_slice(&self, f: &[f64], iy: usize, out: &mut [f64]) {
        let [nx, ny, nz] = self.grid.dims();
        let base = iy * nx;
        let zstride = nx * ny;
        for (o, ray) in out.iter_mut().zip(&self.rays) {
            let mut acc = 0.0;
            if ray.along_x {
                for k in ray.lo..ray.hi {
                    let fz = ray.a + ray.b * k as f64;
                    let i0 = libm::floor(fz);
                    let w1 = fz - i0;
                    let i0 = i0 as isize;
                    if i0 >= 0 && (i0 as usize) < nz {
                        acc += (1.0 - w1) * f[base + k + zstride * i0 as usize];
                    }
                    if i0 + 1 >= 0 && ((i0 + 1) as usize) < nz {
                        acc += w1 * f[base + k + zstride * (i0 + 1) as usize];
                    }
                }
            } else {
                for k in ray.lo..ray.hi {
                    let fx = ray.a + ray.b * k as f64;
                    let i0 = libm::floor(fx);
                    let w1 = fx - i0;
                    let i0 = i0 as isize;
                    let row = base + zstride * k;
                    if i0 >= 0 && (i0 as usize) < nx {
                        acc += (1.0 - w1) * f[row + i0 as usize];
                    }
                    if i0 + 1 >= 0 && ((i0 + 1) as usize) < nx {
                        acc += w1 * f[row + (i0 + 1) as usize];
                    }
                }
            }
            *o = acc * ray.weight;
        }
    }

    /// Adds the backprojection of `g` (`n_views * n_bins`) into slice `iy` of `f`.
    fn backproject_slice(&self, g: &[f64], iy: usize, f: &mut [f64]) {
        let [nx, ny, nz] = self.grid.dims();
        let base = iy * nx;
        let zstride = nx * ny;
        for (gv, ray) in g.iter().zip(&self.rays) {
            let v = gv * ray.weight;
            if v == 0.0 {
                continue;
            }
            if ray.along_x {
                for k in ray.lo..ray.hi {
                    let fz = ray.a + ray.b * k as f64;
                    let i0 = libm::floor(fz);
                    let w1 = fz - i0;
                    let i0 = i0 as isize;
                    if i0 >= 0 && (i0 as usize) < nz {
                        f[base + k + zstride * i0 as usize] += (1.0 - w1) * v;
                    }
                    if i0 + 1 >= 0 && ((i0 + 1) as usize) < nz {
                        f[base + k + zstride * (i0 + 1) as usize] += w1 * v;
                    }
                }
            } else {
                for k in ray.lo..ray.hi {
                    let fx = ray.a + ray.b * k as f64;
                    let i0 = libm::floor(fx);
                    let w1 = fx - i0;
                    let i0 = i0 as isize;
                    let row = base + zstride * k;
                    if i0 >= 0 && (i0 as usize) < nx {
                        f[row + i0 as usize] += (1.0 - w1) * v;
                    }
                    if i0 + 1 >= 0 && ((i0 + 1) as usize) < nx {
                        f[row + (i0 + 1) as usize] += w1 * v;
                    }
                }
            }
        }
    }

    fn rows_aligned(&self) -> bool {
        self.geom.n_rows == self.grid.ny()
            && self.row_taps.iter().enumerate().all(|(r, t)| t[0] == (r, 1.0) && t[1].1 == 0.0)
    }
}

/// Major indices `k in [lo, hi)` for which `a + b k` lies in `(-1, n_minor)`,
/// widened by one on each side and clamped to `[0, n_major)`.
fn major_range(a: f64, b: f64, n_major: usize, n_minor: usize) -> (usize, usize) {
    let (lo, hi) = if b == 0.0 {
        if a > -1.0 && a < n_minor as f64 {
            (0.0, n_major as f64)
        } else {
            (0.0, 0.0)
        }
    } else {
        let k1 = (-1.0 - a) / b;
        let k2 = (n_minor as f64 - a) / b;
        (libm::floor(k1.min(k2)) - 1.0, libm::ceil(k1.max(k2)) + 2.0)
    };
    let clamp = |v: f64| v.max(0.0).min(n_major as f64) as usize;
    (clamp(lo), clamp(hi))
}

impl LinearOperator for FanBeamProjector {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.grid.len(), codomain_len: self.geom.data_len() }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        let nb = self.geom.n_bins;
        let nv = self.geom.n_views;
        let nr = self.geom.n_rows;
        let ny = self.grid.ny();
        let mut slice = vec![0.0; nv * nb];
        if self.rows_aligned() {
            for iy in 0..ny {
                self.project_slice(x, iy, &mut slice);
                for v in 0..nv {
                    let dst = nb * (iy + nr * v);
                    y[dst..dst + nb].copy_from_slice(&slice[v * nb..(v + 1) * nb]);
                }
            }
            return;
        }
        y.fill(0.0);
        for iy in 0..ny {
            self.project_slice(x, iy, &mut slice);
            for (r, taps) in self.row_taps.iter().enumerate() {
                for &(s, w) in taps {
                    if s != iy || w == 0.0 {
                        continue;
                    }
                    for v in 0..nv {
                        let dst = nb * (r + nr * v);
                        for (o, p) in y[dst..dst + nb].iter_mut().zip(&slice[v * nb..(v + 1) * nb]) {
                            *o += w * p;
                        }
                    }
                }
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        let nb = self.geom.n_bins;
        let nv = self.geom.n_views;
        let nr = self.geom.n_rows;
        let ny = self.grid.ny();
        let aligned = self.rows_aligned();
        let mut slice = vec![0.0; nv * nb];
        x.fill(0.0);
        for iy in 0..ny {
            if aligned {
                for v in 0..nv {
                    let src = nb * (iy + nr * v);
                    slice[v * nb..(v + 1) * nb].copy_from_slice(&y[src..src + nb]);
                }
            } else {
                slice.fill(0.0);
                for (r, taps) in self.row_taps.iter().enumerate() {
                    for &(s, w) in taps {
                        if s != iy || w == 0.0 {
                            continue;
                        }
                        for v in 0..nv {
                            let src = nb * (r + nr * v);
                            for (o, p) in slice[v * nb..(v + 1) * nb].iter_mut().zip(&y[src..src + nb]) {
                                *o += w * p;
                            }
                        }
                    }
                }
            }
            self.backproject_slice(&slice, iy, x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{adjoint_test, materialize};
    use crate::tomo::Axis;

    fn small() -> (GridSpec, ScanGeometry) {
        let grid = GridSpec::square_2d(8, 4.0).unwrap();
        let geom = ScanGeometry::fitted(&grid, 3, 25.0, 16).unwrap();
        (grid, geom)
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let (grid, geom) = small();
        let p = FanBeamProjector::new(grid.clone(), geom).unwrap();
        let s = p.apply(&vec![0.0; grid.len()]).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }

    /// Joseph weight of voxel `(ix, iz)` for a ray, computed from scratch.
    fn direct_weight(grid: &GridSpec, src: [f64; 2], dir: [f64; 2], ix: usize, iz: usize) -> f64 {
        let [dx, _, dz] = grid.spacing();
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let x = grid.coord(Axis::X, ix);
        let z = grid.coord(Axis::Z, iz);
        if dir[0].abs() / dx >= dir[1].abs() / dz {
            // ray height at the voxel's column
            let t = (x - src[0]) / dir[0];
            let zr = src[1] + t * dir[1];
            let dist = (zr - z).abs() / dz;
            if dist < 1.0 {
                (1.0 - dist) * dx * len / dir[0].abs()
            } else {
                0.0
            }
        } else {
            let t = (z - src[1]) / dir[1];
            let xr = src[0] + t * dir[0];
            let dist = (xr - x).abs() / dx;
            if dist < 1.0 {
                (1.0 - dist) * dz * len / dir[1].abs()
            } else {
                0.0
            }
        }
    }

    #[test]
    fn materialized_matrix_matches_direct_weights() {
        let (grid, geom) = small();
        let p = FanBeamProjector::new(grid.clone(), geom.clone()).unwrap();
        let m = materialize(&p);
        let n = grid.len();
        for v in 0..geom.n_views {
            for b in 0..geom.n_bins {
                let (src, dir) = geom.ray(v, b);
                let row = b + geom.n_bins * v;
                for iz in 0..grid.nz() {
                    for ix in 0..grid.nx() {
                        let want = direct_weight(&grid, src, dir, ix, iz);
                        let got = m[row * n + grid.index(ix, 0, iz)];
                        assert!((got - want).abs() < 1e-12 * (1.0 + want), "v{v} b{b} ({ix},{iz}): {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn backprojection_is_exact_transpose() {
        let grid = GridSpec::square_2d(16, 4.0).unwrap();
        let geom = ScanGeometry::fitted(&grid, 5, 25.0, 24).unwrap();
        let p = FanBeamProjector::new(grid.clone(), geom.clone()).unwrap();
        let m = materialize(&p);
        let n = grid.len();
        let mut e = vec![0.0; geom.data_len()];
        for row in 0..geom.data_len() {
            e[row] = 1.0;
            let bp = p.adjoint(&e).unwrap();
            e[row] = 0.0;
            for j in 0..n {
                assert_eq!(bp[j].to_bits(), m[row * n + j].to_bits());
            }
        }
    }

    #[test]
    fn adjoint_test_2d_and_3d() {
        let (grid, geom) = small();
        let p = FanBeamProjector::new(grid, geom).unwrap();
        assert!(adjoint_test(&p, 20, 5) < 1e-12);

        let grid = GridSpec::new_3d([8, 4, 6], [0.5, 0.5, 0.5]).unwrap();
        let geom = ScanGeometry::fitted(&grid, 4, 25.0, 12).unwrap();
        let p = FanBeamProjector::new(grid.clone(), geom.clone()).unwrap();
        assert!(p.rows_aligned());
        assert!(adjoint_test(&p, 20, 6) < 1e-12);

        let mut half = geom.clone();
        half.n_rows = 7;
        half.row_pitch = 0.3;
        let p = FanBeamProjector::new(grid, half).unwrap();
        assert!(!p.rows_aligned());
        assert!(adjoint_test(&p, 20, 7) < 1e-12);
    }

    #[test]
    fn uniform_disk_matches_chord_lengths() {
        let n = 128;
        let width = 8.0;
        let grid = GridSpec::square_2d(n, width).unwrap();
        let geom = ScanGeometry::fitted(&grid, 1, 0.0, 256).unwrap();
        let (r, mu) = (3.0, 0.5);
        let mut img = vec![0.0; grid.len()];
        for iz in 0..n {
            for ix in 0..n {
                let (x, z) = (grid.coord(Axis::X, ix), grid.coord(Axis::Z, iz));
                if x * x + z * z <= r * r {
                    img[grid.index(ix, 0, iz)] = mu;
                }
            }
        }
        let p = FanBeamProjector::new(grid, geom.clone()).unwrap();
        let sino = p.apply(&img).unwrap();
        let mut checked = 0;
        for b in 0..geom.n_bins {
            let (src, dir) = geom.ray(0, b);
            // perpendicular distance of the ray from the disk center
            let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
            let s = (src[0] * dir[1] - src[1] * dir[0]).abs() / len;
            if s < 0.9 * r {
                let want = 2.0 * (r * r - s * s).sqrt() * mu;
                assert!((sino[b] - want).abs() < 0.02 * want, "bin {b}: {} vs {want}", sino[b]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
