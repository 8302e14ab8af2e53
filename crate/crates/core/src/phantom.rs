//! Geometric phantoms with exact line integrals.
//!
//! 2D shapes live in the `(x, z)` plane and are described by 2-vectors
//! `[x, z]`; 3D shapes use `[x, y, z]`. `rotation` turns a shape about the
//! `y` axis (degrees). Shape values add where shapes overlap.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::tomo::{cos_sin_deg, Axis, GeometryError, GridSpec, ImageGrid, ScanGeometry, Sinogram};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid shape {index}: {reason}")]
    Shape { index: usize, reason: String },
    #[error("{0}")]
    Mixed(String),
    #[error("invalid noise parameter: {0}")]
    Noise(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Ellipsoid,
    Box,
}

impl ShapeKind {
    pub fn is_3d(self) -> bool {
        matches!(self, ShapeKind::Ellipsoid | ShapeKind::Box)
    }

    fn is_round(self) -> bool {
        matches!(self, ShapeKind::Ellipse | ShapeKind::Ellipsoid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    /// cm.
    pub center: Vec<f64>,
    /// Half-widths in cm.
    pub semi_axes: Vec<f64>,
    /// Degrees about `y`.
    #[serde(default)]
    pub rotation: f64,
    /// Attenuation added inside the shape, cm⁻¹.
    pub value: f64,
}

/// Shape parameters expanded to `[x, y, z]` with `y` unbounded for 2D shapes.
#[derive(Debug, Clone, Copy)]
struct Placed {
    round: bool,
    c: [f64; 3],
    a: [f64; 3],
    cos: f64,
    sin: f64,
    value: f64,
}

impl Placed {
    /// Rotates an `(x, z)` offset into the shape frame.
    fn local(&self, dx: f64, dz: f64) -> (f64, f64) {
        (self.cos * dx + self.sin * dz, -self.sin * dx + self.cos * dz)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let (u, w) = self.local(p[0] - self.c[0], p[2] - self.c[2]);
        let v = p[1] - self.c[1];
        if self.round {
            let q = (u / self.a[0]) * (u / self.a[0]) + (w / self.a[2]) * (w / self.a[2]);
            let y = if self.a[1].is_finite() { (v / self.a[1]) * (v / self.a[1]) } else { 0.0 };
            q + y <= 1.0
        } else {
            libm::fabs(u) <= self.a[0] && libm::fabs(w) <= self.a[2] && libm::fabs(v) <= self.a[1]
        }
    }

    /// Chord length of the line `src + t dir` (unit `dir`, in the `(x, z)`
    /// plane at height `y`) through the shape.
    fn chord(&self, src: [f64; 2], dir: [f64; 2], y: f64) -> f64 {
        let dy = y - self.c[1];
        let (mut ax, mut az) = (self.a[0], self.a[2]);
        if self.round {
            if self.a[1].is_finite() {
                let s = 1.0 - (dy / self.a[1]) * (dy / self.a[1]);
                if s <= 0.0 {
                    return 0.0;
                }
                let s = libm::sqrt(s);
                ax *= s;
                az *= s;
            }
        } else if libm::fabs(dy) > self.a[1] {
            return 0.0;
        }
        let (px, pz) = self.local(src[0] - self.c[0], src[1] - self.c[2]);
        let (ex, ez) = self.local(dir[0], dir[1]);
        if self.round {
            let (qx, qz, fx, fz) = (px / ax, pz / az, ex / ax, ez / az);
            let a = fx * fx + fz * fz;
            let b = 2.0 * (qx * fx + qz * fz);
            let c = qx * qx + qz * qz - 1.0;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                0.0
            } else {
                libm::sqrt(disc) / a
            }
        } else {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for (p, e, h) in [(px, ex, ax), (pz, ez, az)] {
                if e == 0.0 {
                    if libm::fabs(p) > h {
                        return 0.0;
                    }
                } else {
                    let (t1, t2) = ((-h - p) / e, (h - p) / e);
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
            }
            (hi - lo).max(0.0)
        }
    }
}

impl Shape {
    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, value: f64) -> Self {
        Self { kind: ShapeKind::Ellipse, center: center.to_vec(), semi_axes: semi_axes.to_vec(), rotation, value }
    }

    pub fn rectangle(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, value: f64) -> Self {
        Self { kind: ShapeKind::Rectangle, center: center.to_vec(), semi_axes: semi_axes.to_vec(), rotation, value }
    }

    pub fn ellipsoid(center: [f64; 3], semi_axes: [f64; 3], rotation: f64, value: f64) -> Self {
        Self { kind: ShapeKind::Ellipsoid, center: center.to_vec(), semi_axes: semi_axes.to_vec(), rotation, value }
    }

    pub fn sphere(center: [f64; 3], radius: f64, value: f64) -> Self {
        Self::ellipsoid(center, [radius; 3], 0.0, value)
    }

    pub fn cuboid(center: [f64; 3], semi_axes: [f64; 3], rotation: f64, value: f64) -> Self {
        Self { kind: ShapeKind::Box, center: center.to_vec(), semi_axes: semi_axes.to_vec(), rotation, value }
    }

    fn validate(&self, index: usize) -> Result<(), PhantomError> {
        let n = if self.kind.is_3d() { 3 } else { 2 };
        let bad = |reason: String| Err(PhantomError::Shape { index, reason });
        if self.center.len() != n || self.semi_axes.len() != n {
            return bad(alloc::format!("{:?} needs {n}-component center and semi_axes", self.kind));
        }
        if self.semi_axes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(alloc::format!("semi_axes must be positive, got {:?}", self.semi_axes));
        }
        if !self.center.iter().all(|c| c.is_finite()) || !self.rotation.is_finite() || !self.value.is_finite() {
            return bad("center, rotation and value must be finite".into());
        }
        Ok(())
    }

    fn placed(&self) -> Placed {
        let (c, a) = if self.kind.is_3d() {
            ([self.center[0], self.center[1], self.center[2]], [self.semi_axes[0], self.semi_axes[1], self.semi_axes[2]])
        } else {
            ([self.center[0], 0.0, self.center[1]], [self.semi_axes[0], f64::INFINITY, self.semi_axes[1]])
        };
        let (cos, sin) = cos_sin_deg(self.rotation);
        Placed { round: self.kind.is_round(), c, a, cos, sin, value: self.value }
    }
}

/// Axis-aligned region that contains every shape (`min`/`max` corners in
/// the shape coordinate order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shapes: Vec<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl PhantomSpec {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { shapes, bounds: None }
    }

    /// `Some(true)` for 3D shapes, `Some(false)` for 2D, `None` when empty.
    pub fn is_3d(&self) -> Option<bool> {
        self.shapes.first().map(|s| s.kind.is_3d())
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        for (i, s) in self.shapes.iter().enumerate() {
            s.validate(i)?;
        }
        if self.shapes.iter().any(|s| s.kind.is_3d()) && self.shapes.iter().any(|s| !s.kind.is_3d()) {
            return Err(PhantomError::Mixed("a phantom cannot mix 2D and 3D shapes".into()));
        }
        if let Some(b) = &self.bounds {
            let n = if self.is_3d().unwrap_or(false) { 3 } else { 2 };
            if b.min.len() != n || b.max.len() != n || b.min.iter().zip(&b.max).any(|(lo, hi)| !(lo < hi)) {
                return Err(PhantomError::Mixed(alloc::format!("bounds must have {n} increasing components")));
            }
        }
        Ok(())
    }

    /// Whether every shape's bounding box lies inside `bounds`.
    pub fn within_bounds(&self) -> bool {
        let Some(b) = &self.bounds else { return true };
        self.shapes.iter().all(|s| {
            let r = if s.kind.is_round() { 1.0 } else { core::f64::consts::SQRT_2 };
            // conservative extent for rotated shapes
            let reach = s.semi_axes.iter().fold(0.0f64, |m, v| m.max(*v)) * r;
            s.center.iter().enumerate().all(|(i, c)| {
                let ext = if s.rotation == 0.0 { s.semi_axes[i] } else { reach };
                c - ext >= b.min[i] - 1e-12 && c + ext <= b.max[i] + 1e-12
            })
        })
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<(), PhantomError> {
        self.validate()?;
        if self.is_3d() == Some(true) && !grid.is_3d() {
            return Err(PhantomError::Mixed("3D phantom on a 2D grid".into()));
        }
        Ok(())
    }
}

/// Samples the phantom at voxel centers, or on an `s × s (× s)` sub-grid per
/// voxel averaged when `supersample = s > 1`. 2D phantoms on 3D grids are
/// extruded along `y`.
pub fn rasterize(ph: &PhantomSpec, grid: &GridSpec, supersample: usize) -> Result<ImageGrid, PhantomError> {
    ph.check_grid(grid)?;
    let s = supersample.max(1);
    let placed: Vec<Placed> = ph.shapes.iter().map(Shape::placed).collect();
    let sp = grid.spacing();
    let sy = if grid.is_3d() { s } else { 1 };
    let sub = |k: usize, h: f64| (k as f64 + 0.5) / s as f64 * h - 0.5 * h;
    let mut img = ImageGrid::zeros(grid.clone());
    for iz in 0..grid.nz() {
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let c = [grid.coord(Axis::X, ix), grid.coord(Axis::Y, iy), grid.coord(Axis::Z, iz)];
                let mut acc = 0.0;
                for kz in 0..s {
                    for ky in 0..sy {
                        for kx in 0..s {
                            let p = if s == 1 {
                                c
                            } else {
                                [c[0] + sub(kx, sp[0]), c[1] + if sy == 1 { 0.0 } else { sub(ky, sp[1]) }, c[2] + sub(kz, sp[2])]
                            };
                            acc += placed.iter().filter(|sh| sh.contains(p)).map(|sh| sh.value).sum::<f64>();
                        }
                    }
                }
                img.values[grid.index(ix, iy, iz)] = acc / (s * s * sy) as f64;
            }
        }
    }
    Ok(img)
}

/// Exact line integrals along the rays of `geom` (one ray per bin center).
pub fn analytic_sinogram(ph: &PhantomSpec, geom: &ScanGeometry) -> Result<Sinogram, PhantomError> {
    analytic_sinogram_at(ph, geom, &geom.view_angles())
}

fn analytic_sinogram_at(ph: &PhantomSpec, geom: &ScanGeometry, angles: &[f64]) -> Result<Sinogram, PhantomError> {
    ph.validate()?;
    geom.validate()?;
    let placed: Vec<Placed> = ph.shapes.iter().map(Shape::placed).collect();
    let mut out = vec![0.0; geom.data_len()];
    let mut idx = 0;
    for &theta in angles {
        for r in 0..geom.n_rows {
            let y = geom.row_position(r);
            for b in 0..geom.n_bins {
                let (src, dir) = geom.ray_at(theta, b);
                let len = libm::sqrt(dir[0] * dir[0] + dir[1] * dir[1]);
                let d = [dir[0] / len, dir[1] / len];
                out[idx] = placed.iter().map(|s| s.value * s.chord(src, d, y)).sum();
                idx += 1;
            }
        }
    }
    Ok(Sinogram::new(geom.clone(), out)?)
}

/// Poisson counting noise: `counts ~ Poisson(N₀ exp(-g))` and the output is
/// `-ln(max(counts, 1) / N₀)`. Bin `i` draws from its own ChaCha stream, so
/// results depend only on `(seed, i)`.
pub fn add_poisson_noise(g: &Sinogram, fluence: f64, seed: u64) -> Result<Sinogram, PhantomError> {
    if !(fluence > 0.0 && fluence.is_finite()) {
        return Err(PhantomError::Noise(alloc::format!("fluence must be positive, got {fluence}")));
    }
    let mut out = Vec::with_capacity(g.values.len());
    for (i, &v) in g.values.iter().enumerate() {
        let mean = fluence * libm::exp(-v);
        let counts = if mean > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dist = Poisson::new(mean).map_err(|e| PhantomError::Noise(alloc::format!("bin {i}: {e}")))?;
            dist.sample(&mut rng)
        } else {
            0.0
        };
        out.push(-libm::log(counts.max(1.0) / fluence));
    }
    Ok(Sinogram::new(g.geometry.clone(), out)?)
}

/// 2D breast-slice stand-in: an elliptical background with masses and
/// microcalcification-like disks. Values stay within `[0, 0.6]` cm⁻¹.
/// Bounds: `x, z ∈ [-4, 4]` cm.
pub fn breast_2d() -> PhantomSpec {
    let mut shapes = vec![
        Shape::ellipse([0.0, 0.0], [3.6, 2.4], 0.0, 0.2),
        Shape::ellipse([-1.3, 0.6], [0.6, 0.4], 30.0, 0.05),
        Shape::ellipse([1.4, -0.7], [0.45, 0.45], 0.0, 0.08),
        Shape::ellipse([0.1, -1.3], [0.8, 0.3], -20.0, 0.06),
        Shape::rectangle([-1.8, -1.0], [0.3, 0.2], 15.0, 0.1),
    ];
    for (x, z, r) in [(0.8, 1.1, 0.08), (1.05, 1.25, 0.06), (0.95, 0.85, 0.07), (-0.4, 0.2, 0.1), (2.3, 0.4, 0.06)] {
        shapes.push(Shape::ellipse([x, z], [r, r], 0.0, 0.35));
    }
    PhantomSpec { shapes, bounds: Some(Bounds { min: vec![-4.0, -4.0], max: vec![4.0, 4.0] }) }
}

/// 3D geometric-shapes stand-in: background ellipsoid, a few inclusions and
/// a column of equal spheres at `(x, y) = (1, 0)` stacked in depth.
/// Bounds: `x ∈ [-4, 4]`, `y ∈ [-2.5, 2.5]`, `z ∈ [-2, 2]` cm.
pub fn geometric_3d() -> PhantomSpec {
    let mut shapes = vec![
        Shape::ellipsoid([0.0, 0.0, 0.0], [3.4, 2.2, 1.7], 0.0, 0.2),
        Shape::ellipsoid([-1.5, 0.5, 0.3], [0.5, 0.4, 0.3], 25.0, 0.05),
        Shape::cuboid([-0.5, -1.0, -0.6], [0.3, 0.3, 0.2], -15.0, 0.08),
    ];
    for z in [-0.9, 0.0, 0.9] {
        shapes.push(Shape::sphere([1.0, 0.0, z], 0.3, 0.1));
    }
    for (x, y, z) in [(-0.5, 0.8, 0.5), (-0.3, 0.9, 0.55)] {
        shapes.push(Shape::sphere([x, y, z], 0.08, 0.35));
    }
    PhantomSpec { shapes, bounds: Some(Bounds { min: vec![-4.0, -2.5, -2.0], max: vec![4.0, 2.5, 2.0] }) }
}

/// A single sphere in a weak ellipsoidal background, sized for small grids
/// (`x, y ∈ [-1.6, 1.6]`, `z ∈ [-0.8, 0.8]` cm).
pub fn sphere_3d() -> PhantomSpec {
    PhantomSpec {
        shapes: vec![
            Shape::ellipsoid([0.0, 0.0, 0.0], [1.4, 1.4, 0.7], 0.0, 0.1),
            Shape::sphere([0.0, 0.0, 0.0], 0.5, 0.3),
        ],
        bounds: Some(Bounds { min: vec![-1.6, -1.6, -0.8], max: vec![1.6, 1.6, 0.8] }),
    }
}

/// Named built-in phantoms.
pub fn builtin_phantoms() -> Vec<(&'static str, PhantomSpec)> {
    vec![("breast2d", breast_2d()), ("geometric3d", geometric_3d()), ("sphere3d", sphere_3d())]
}

pub fn builtin_phantom(name: &str) -> Option<PhantomSpec> {
    builtin_phantoms().into_iter().find(|(n, _)| *n == name).map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomo::make_projector;

    fn geom2d(grid: &GridSpec, views: usize, bins: usize) -> ScanGeometry {
        ScanGeometry::fitted(grid, views, 25.0, bins).unwrap()
    }

    #[test]
    fn empty_and_unit_disk() {
        let grid = GridSpec::square_2d(33, 4.0).unwrap();
        assert!(rasterize(&PhantomSpec::default(), &grid, 1).unwrap().values.iter().all(|v| *v == 0.0));
        let disk = PhantomSpec::new(vec![Shape::ellipse([0.0, 0.0], [1.0, 1.0], 0.0, 1.0)]);
        let img = rasterize(&disk, &grid, 1).unwrap();
        assert_eq!(img.get(16, 0, 16), 1.0);
        assert_eq!(img.get(0, 0, 0), 0.0);
    }

    #[test]
    fn supersampling_changes_only_boundary_voxels() {
        let grid = GridSpec::square_2d(40, 4.0).unwrap();
        let ph = PhantomSpec::new(vec![Shape::ellipse([0.1, -0.2], [1.1, 0.7], 20.0, 0.5)]);
        let a = rasterize(&ph, &grid, 1).unwrap();
        let b = rasterize(&ph, &grid, 4).unwrap();
        let p = ph.shapes[0].placed();
        let h = grid.spacing()[0];
        for iz in 0..40 {
            for ix in 0..40 {
                let i = grid.index(ix, 0, iz);
                if a.values[i] != b.values[i] {
                    // some corner of the voxel lies on the other side
                    let c = [grid.coord(Axis::X, ix), 0.0, grid.coord(Axis::Z, iz)];
                    let inside: Vec<bool> = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                        .iter()
                        .map(|(sx, sz)| p.contains([c[0] + sx * h / 2.0, 0.0, c[2] + sz * h / 2.0]))
                        .collect();
                    assert!(inside.iter().any(|v| *v) && inside.iter().any(|v| !*v), "voxel {ix},{iz}");
                }
            }
        }
    }

    #[test]
    fn chord_examples() {
        let grid = GridSpec::square_2d(32, 4.0).unwrap();
        let geom = ScanGeometry { n_bins: 33, ..geom2d(&grid, 3, 33) };
        let empty = PhantomSpec::new(vec![Shape::ellipse([10.0, 10.0], [0.5, 0.5], 0.0, 1.0)]);
        assert!(analytic_sinogram(&empty, &geom).unwrap().values.iter().all(|v| *v == 0.0));
        let disk = PhantomSpec::new(vec![Shape::ellipse([0.0, 0.0], [0.7, 0.7], 0.0, 0.3)]);
        let s = analytic_sinogram(&disk, &geom).unwrap();
        for v in 0..3 {
            // bin 16 is the central ray
            assert!((s.values[s.index(v, 0, 16)] - 2.0 * 0.7 * 0.3).abs() < 1e-12);
        }
        let sq = PhantomSpec::new(vec![Shape::rectangle([0.0, 0.0], [0.5, 0.8], 0.0, 1.0)]);
        let g1 = ScanGeometry { n_views: 1, ..geom.clone() };
        let s = analytic_sinogram(&sq, &g1).unwrap();
        assert!((s.values[16] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn line_integrals_are_linear_in_values() {
        let grid = GridSpec::square_2d(32, 8.0).unwrap();
        let geom = geom2d(&grid, 7, 64);
        let a = breast_2d();
        let mut b = a.clone();
        b.shapes.iter_mut().for_each(|s| s.value *= 2.5);
        let sa = analytic_sinogram(&a, &geom).unwrap();
        let sb = analytic_sinogram(&b, &geom).unwrap();
        for (x, y) in sa.values.iter().zip(&sb.values) {
            assert!((2.5 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn rotating_phantom_and_scan_together() {
        let grid = GridSpec::square_2d(32, 8.0).unwrap();
        let geom = geom2d(&grid, 5, 48);
        let ph = PhantomSpec::new(vec![
            Shape::ellipse([0.8, -0.3], [0.9, 0.4], 0.0, 0.2),
            Shape::rectangle([-1.0, 0.5], [0.3, 0.6], 0.0, 0.1),
        ]);
        // Rotating the scan by φ = 90° maps (x, z) -> (z, -x); axis-aligned
        // shapes follow by moving the center and swapping the half-widths.
        let rotated = PhantomSpec::new(
            ph.shapes
                .iter()
                .map(|s| Shape {
                    center: vec![s.center[1], -s.center[0]],
                    semi_axes: vec![s.semi_axes[1], s.semi_axes[0]],
                    ..s.clone()
                })
                .collect(),
        );
        let base = analytic_sinogram(&ph, &geom).unwrap();
        let angles: Vec<f64> = geom.view_angles().iter().map(|t| t + 90.0).collect();
        let turned = analytic_sinogram_at(&rotated, &geom, &angles).unwrap();
        for (a, b) in base.values.iter().zip(&turned.values) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn ellipsoid_slices() {
        let grid = GridSpec::new_3d([16, 8, 16], [0.25; 3]).unwrap();
        let geom = ScanGeometry { n_rows: 5, row_pitch: 0.25, ..ScanGeometry::fitted(&grid, 1, 0.0, 33).unwrap() };
        let ph = PhantomSpec::new(vec![Shape::sphere([0.0, 0.0, 0.0], 0.6, 1.0)]);
        let s = analytic_sinogram(&ph, &geom).unwrap();
        for r in 0..5 {
            let y = geom.row_position(r);
            let want = 2.0 * (0.36 - y * y).max(0.0).sqrt();
            assert!((s.values[s.index(0, r, 16)] - want).abs() < 1e-12);
        }
        let bx = PhantomSpec::new(vec![Shape::cuboid([0.0, 0.0, 0.0], [0.4, 0.3, 0.5], 0.0, 1.0)]);
        let s = analytic_sinogram(&bx, &geom).unwrap();
        assert!((s.values[s.index(0, 2, 16)] - 1.0).abs() < 1e-12);
        assert_eq!(s.values[s.index(0, 0, 16)], 0.0);
    }

    #[test]
    fn analytic_matches_projected_rasterization() {
        let grid = GridSpec::square_2d(256, 4.0).unwrap();
        let geom = geom2d(&grid, 5, 64);
        let ph = PhantomSpec::new(vec![Shape::ellipse([0.2, -0.1], [1.0, 1.0], 0.0, 0.4)]);
        let img = rasterize(&ph, &grid, 4).unwrap();
        let disc = make_projector(&grid, &geom).unwrap().apply(&img.values).unwrap();
        let exact = analytic_sinogram(&ph, &geom).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = disc.iter().zip(&exact.values).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) < 0.01 * rms(&exact.values), "{}", rms(&diff) / rms(&exact.values));
    }

    #[test]
    fn noise_is_deterministic_and_unbiased_at_high_fluence() {
        let grid = GridSpec::square_2d(16, 4.0).unwrap();
        let geom = geom2d(&grid, 3, 32);
        let g = analytic_sinogram(&PhantomSpec::new(vec![Shape::ellipse([0.0, 0.0], [1.0, 1.0], 0.0, 0.5)]), &geom).unwrap();
        let a = add_poisson_noise(&g, 5e4, 7).unwrap();
        let b = add_poisson_noise(&g, 5e4, 7).unwrap();
        let c = add_poisson_noise(&g, 5e4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let big = add_poisson_noise(&g, 1e9, 1).unwrap();
        for (x, y) in big.values.iter().zip(&g.values) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_counts_are_clamped() {
        let geom = ScanGeometry { n_views: 1, n_bins: 4, ..geom2d(&GridSpec::square_2d(8, 2.0).unwrap(), 1, 4) };
        let g = Sinogram::new(geom, vec![50.0; 4]).unwrap();
        let n = add_poisson_noise(&g, 10.0, 3).unwrap();
        for v in n.values {
            assert!((v - (-(1.0f64 / 10.0).ln())).abs() < 1e-12);
        }
        assert!(add_poisson_noise(&Sinogram::zeros(ScanGeometry { n_bins: 4, ..geom2d(&GridSpec::square_2d(8, 2.0).unwrap(), 1, 4) }), 0.0, 1).is_err());
    }

    #[test]
    fn noise_moments() {
        let n0 = 5e4;
        let count = 100_000;
        for level in [0.0, 1.0] {
            let geom = ScanGeometry { n_views: 1, n_rows: 1, ..geom2d(&GridSpec::square_2d(8, 2.0).unwrap(), 1, count) };
            let g = Sinogram::new(geom, vec![level; count]).unwrap();
            let noisy = add_poisson_noise(&g, n0, 11).unwrap();
            let d: Vec<f64> = noisy.values.iter().map(|v| v - level).collect();
            let mean = d.iter().sum::<f64>() / count as f64;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64;
            let want = libm::exp(level) / n0;
            assert!(mean.abs() < 5.0 * (want / count as f64).sqrt() + want, "mean {mean}");
            assert!((var / want - 1.0).abs() < 0.1, "var {var} vs {want}");
        }
    }

    #[test]
    fn catalog_properties() {
        let names: Vec<&str> = builtin_phantoms().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["breast2d", "geometric3d", "sphere3d"]);
        for (_, p) in builtin_phantoms() {
            p.validate().unwrap();
            assert!(p.within_bounds());
        }
        let grid = GridSpec::square_2d(512, 8.0).unwrap();
        let img = rasterize(&breast_2d(), &grid, 1).unwrap();
        let (lo, hi) = img.values.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(lo >= 0.0 && hi <= 0.6, "{lo} {hi}");
        assert!(hi > 0.5);

        let g3 = geometric_3d();
        let spheres: Vec<&Shape> = g3
            .shapes
            .iter()
            .filter(|s| s.kind == ShapeKind::Ellipsoid && s.semi_axes.iter().all(|a| *a == s.semi_axes[0]))
            .filter(|s| s.center[0] == 1.0 && s.center[1] == 0.0)
            .collect();
        assert!(spheres.len() >= 3);
        let mut zs: Vec<f64> = spheres.iter().map(|s| s.center[2]).collect();
        zs.dedup();
        assert_eq!(zs.len(), spheres.len());
    }

    #[test]
    fn shape_validation() {
        let bad = PhantomSpec::new(vec![Shape::ellipse([0.0, 0.0], [0.0, 1.0], 0.0, 1.0)]);
        assert!(bad.validate().is_err());
        let mixed = PhantomSpec::new(vec![Shape::ellipse([0.0, 0.0], [1.0, 1.0], 0.0, 1.0), Shape::sphere([0.0; 3], 1.0, 1.0)]);
        assert!(mixed.validate().is_err());
        let wrong = PhantomSpec::new(vec![Shape { kind: ShapeKind::Box, ..Shape::ellipse([0.0, 0.0], [1.0, 1.0], 0.0, 1.0) }]);
        assert!(wrong.validate().is_err());
    }
}
