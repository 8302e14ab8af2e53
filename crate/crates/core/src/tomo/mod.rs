//! Image grids, scan geometry and the concrete imaging operators.
//!
//! Coordinates are in cm. `x` is the in-plane direction along the source arc,
//! `z` is depth (the arc sits above the object at `+z`), and `y` is the
//! in-plane direction perpendicular to the arc. Voxel arrays are stored
//! x-fastest: `ix + nx * (iy + ny * iz)`. A 2D grid is a 3D grid with `ny = 1`.

mod blur;
mod diff;
mod filter;
mod projector;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linop::{OpRef, OperatorError};

pub use blur::{blur_sinogram, GaussianBlur};
pub use diff::{cos_sin_deg, FiniteDiff};
pub use filter::{hanning_multiplier, HanningSqrtFilter};
pub use projector::FanBeamProjector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid scan geometry: {0}")]
    Scan(String),
    #[error("{0}")]
    Operator(#[from] OperatorError),
}

/// Grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Shape and placement of a regular 2D `(x, z)` or 3D `(x, y, z)` grid.
///
/// Serialized as `{"dims": [nx, nz], "spacing": [dx, dz], "origin": [ox, oz]}`
/// in 2D and with three entries each in 3D. `origin` is the position of the
/// grid center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRepr", into = "GridSpecRepr")]
pub struct GridSpec {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    is_3d: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecRepr {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<Vec<f64>>,
}

impl TryFrom<GridSpecRepr> for GridSpec {
    type Error = GeometryError;

    fn try_from(r: GridSpecRepr) -> Result<Self, Self::Error> {
        let n = r.dims.len();
        if !(n == 2 || n == 3) {
            return Err(GeometryError::Grid(alloc::format!("dims must have 2 or 3 entries, got {n}")));
        }
        if r.spacing.len() != n {
            return Err(GeometryError::Grid(alloc::format!("spacing must have {n} entries")));
        }
        let origin = r.origin.unwrap_or_else(|| vec![0.0; n]);
        if origin.len() != n {
            return Err(GeometryError::Grid(alloc::format!("origin must have {n} entries")));
        }
        let g = if n == 2 {
            GridSpec::new_2d(r.dims[0], r.dims[1], r.spacing[0], r.spacing[1])?
        } else {
            GridSpec::new_3d([r.dims[0], r.dims[1], r.dims[2]], [r.spacing[0], r.spacing[1], r.spacing[2]])?
        };
        Ok(if n == 2 { g.with_origin([origin[0], 0.0, origin[1]]) } else { g.with_origin([origin[0], origin[1], origin[2]]) })
    }
}

impl From<GridSpec> for GridSpecRepr {
    fn from(g: GridSpec) -> Self {
        let pick = |a: [f64; 3]| if g.is_3d { a.to_vec() } else { vec![a[0], a[2]] };
        let dims = if g.is_3d { g.dims.to_vec() } else { vec![g.dims[0], g.dims[2]] };
        GridSpecRepr { dims, spacing: pick(g.spacing), origin: Some(pick(g.origin)) }
    }
}

fn check_spacing(s: &[f64]) -> Result<(), GeometryError> {
    if s.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::Grid(alloc::format!("spacing must be positive and finite, got {s:?}")))
    }
}

impl GridSpec {
    pub fn new_2d(nx: usize, nz: usize, dx: f64, dz: f64) -> Result<Self, GeometryError> {
        if nx == 0 || nz == 0 {
            return Err(GeometryError::Grid("grid dimensions must be positive".into()));
        }
        check_spacing(&[dx, dz])?;
        Ok(Self { dims: [nx, 1, nz], spacing: [dx, 1.0, dz], origin: [0.0; 3], is_3d: false })
    }

    pub fn new_3d(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, GeometryError> {
        if dims.contains(&0) {
            return Err(GeometryError::Grid("grid dimensions must be positive".into()));
        }
        check_spacing(&spacing)?;
        Ok(Self { dims, spacing, origin: [0.0; 3], is_3d: true })
    }

    /// Square 2D grid of `n x n` pixels covering `width` cm.
    pub fn square_2d(n: usize, width: f64) -> Result<Self, GeometryError> {
        Self::new_2d(n, n, width / n as f64, width / n as f64)
    }

    /// Grid center position `[x, y, z]`; the `y` entry is ignored in 2D.
    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        if !self.is_3d {
            self.origin[1] = 0.0;
        }
        self
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    /// `[nx, ny, nz]` with `ny = 1` in 2D.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn is_3d(&self) -> bool {
        self.is_3d
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    /// Center coordinate of voxel `i` along `axis`.
    pub fn coord(&self, axis: Axis, i: usize) -> f64 {
        let a = axis_index(axis);
        self.origin[a] + (i as f64 - (self.dims[a] as f64 - 1.0) * 0.5) * self.spacing[a]
    }

    /// Physical extent `n * spacing` along `axis`.
    pub fn extent(&self, axis: Axis) -> f64 {
        let a = axis_index(axis);
        self.dims[a] as f64 * self.spacing[a]
    }

    /// Whether `axis` is one of this grid's dimensions.
    pub fn has_axis(&self, axis: Axis) -> bool {
        self.is_3d || axis != Axis::Y
    }

    /// Grid refined by integer `factors` (`[fx, fz]` in 2D, `[fx, fy, fz]` in 3D)
    /// over the same physical region.
    pub fn refined(&self, factors: &[usize]) -> Result<Self, GeometryError> {
        let f = self.expand_factors(factors)?;
        let mut out = self.clone();
        for a in 0..3 {
            out.dims[a] *= f[a];
            out.spacing[a] /= f[a] as f64;
        }
        if !self.is_3d {
            out.spacing[1] = 1.0;
        }
        Ok(out)
    }

    pub(crate) fn expand_factors(&self, factors: &[usize]) -> Result<[usize; 3], GeometryError> {
        let f = match (self.is_3d, factors.len()) {
            (false, 2) => [factors[0], 1, factors[1]],
            (true, 3) => [factors[0], factors[1], factors[2]],
            _ => {
                return Err(GeometryError::Grid(alloc::format!(
                    "expected {} factors, got {}",
                    if self.is_3d { 3 } else { 2 },
                    factors.len()
                )))
            }
        };
        if f.contains(&0) {
            return Err(GeometryError::Grid("factors must be at least 1".into()));
        }
        Ok(f)
    }

    /// Radius of the smallest circle about the rotation axis containing the
    /// grid's `(x, z)` footprint.
    pub fn bounding_radius(&self) -> f64 {
        let hx = self.extent(Axis::X) * 0.5 + libm::fabs(self.origin[0]);
        let hz = self.extent(Axis::Z) * 0.5 + libm::fabs(self.origin[2]);
        libm::sqrt(hx * hx + hz * hz)
    }
}

pub(crate) fn axis_index(axis: Axis) -> usize {
    match axis {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    }
}

/// Dense scalar field on a [`GridSpec`] (attenuation, cm⁻¹).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != spec.len() {
            return Err(GeometryError::Grid(alloc::format!(
                "{} values for a grid of {} voxels",
                values.len(),
                spec.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        Self { spec, values: vec![0.0; n] }
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.spec.index(ix, iy, iz)]
    }

    /// Per-voxel root-mean-square difference from `other`.
    pub fn rmse(&self, other: &ImageGrid) -> f64 {
        crate::vecops::rmse(&self.values, &other.values)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn default_rows() -> usize {
    1
}

fn default_row_pitch() -> f64 {
    1.0
}

/// Circular-arc fan-beam scan. The source sits at angle `θ` on a circle of
/// radius `source_radius` above the object and a flat detector rotates
/// opposite it at distance `detector_radius` from the rotation center. Views
/// are equally spaced over `[-arc_half_angle, +arc_half_angle]` degrees.
///
/// 3D scans stack `n_rows` parallel fan-beam planes at `y` positions
/// `(r - (n_rows - 1) / 2) * row_pitch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub n_views: usize,
    /// Degrees.
    pub arc_half_angle: f64,
    pub source_radius: f64,
    pub detector_radius: f64,
    pub n_bins: usize,
    pub bin_width: f64,
    #[serde(default = "default_rows")]
    pub n_rows: usize,
    #[serde(default = "default_row_pitch")]
    pub row_pitch: f64,
}

impl ScanGeometry {
    /// Geometry sized to `grid`: source radius twice and detector radius once
    /// the grid width, and a bin width chosen so that every view sees the
    /// whole grid with a 2% margin. 3D grids get one detector row per `y`
    /// slice.
    pub fn fitted(grid: &GridSpec, n_views: usize, arc_half_angle: f64, n_bins: usize) -> Result<Self, GeometryError> {
        let width = grid.extent(Axis::X).max(grid.extent(Axis::Z));
        let mut g = ScanGeometry {
            n_views,
            arc_half_angle,
            source_radius: 2.0 * width,
            detector_radius: width,
            n_bins,
            bin_width: 1.0,
            n_rows: if grid.is_3d() { grid.ny() } else { 1 },
            row_pitch: if grid.is_3d() { grid.spacing()[1] } else { 1.0 },
        };
        let half_span = g.max_projected_offset(grid);
        g.bin_width = 2.0 * half_span * 1.02 / n_bins as f64;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::Scan(m.into()));
        if self.n_views == 0 {
            return bad("n_views must be at least 1");
        }
        if self.n_bins == 0 || self.n_rows == 0 {
            return bad("n_bins and n_rows must be positive");
        }
        if !(self.arc_half_angle >= 0.0 && self.arc_half_angle < 90.0) {
            return bad("arc_half_angle must lie in [0, 90) degrees");
        }
        for (name, v) in [
            ("source_radius", self.source_radius),
            ("detector_radius", self.detector_radius),
            ("bin_width", self.bin_width),
            ("row_pitch", self.row_pitch),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GeometryError::Scan(alloc::format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Errors when the source circle or the detector reaches into `grid`.
    pub fn check_grid(&self, grid: &GridSpec) -> Result<(), GeometryError> {
        self.validate()?;
        let r = grid.bounding_radius();
        if self.source_radius <= r {
            return Err(GeometryError::Scan(alloc::format!(
                "source radius {} places the source inside the grid (grid radius {r})",
                self.source_radius
            )));
        }
        if self.detector_radius <= r {
            return Err(GeometryError::Scan(alloc::format!(
                "detector radius {} places the detector inside the grid (grid radius {r})",
                self.detector_radius
            )));
        }
        Ok(())
    }

    /// View angles in degrees.
    pub fn view_angles(&self) -> Vec<f64> {
        if self.n_views == 1 {
            return vec![0.0];
        }
        let step = 2.0 * self.arc_half_angle / (self.n_views - 1) as f64;
        (0..self.n_views).map(|v| -self.arc_half_angle + v as f64 * step).collect()
    }

    /// Number of sinogram samples `n_views * n_rows * n_bins`.
    pub fn data_len(&self) -> usize {
        self.n_views * self.n_rows * self.n_bins
    }

    /// Detector coordinate of bin `b`, measured from the central ray.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.n_bins as f64 - 1.0) * 0.5) * self.bin_width
    }

    /// `y` position of detector row `r`.
    pub fn row_position(&self, r: usize) -> f64 {
        (r as f64 - (self.n_rows as f64 - 1.0) * 0.5) * self.row_pitch
    }

    /// Source position and ray direction (unnormalized, source to bin center)
    /// in the `(x, z)` plane for view `v`, bin `b`.
    pub fn ray(&self, v: usize, b: usize) -> ([f64; 2], [f64; 2]) {
        let theta = self.view_angles()[v];
        self.ray_at(theta, b)
    }

    pub(crate) fn ray_at(&self, theta_deg: f64, b: usize) -> ([f64; 2], [f64; 2]) {
        let (c, s) = cos_sin_deg(theta_deg);
        let src = [self.source_radius * s, self.source_radius * c];
        let u = self.bin_offset(b);
        let det = [-self.detector_radius * s + u * c, -self.detector_radius * c - u * s];
        (src, [det[0] - src[0], det[1] - src[1]])
    }

    /// Largest detector offset at which any grid corner projects, over all views.
    pub fn max_projected_offset(&self, grid: &GridSpec) -> f64 {
        let hx = grid.extent(Axis::X) * 0.5;
        let hz = grid.extent(Axis::Z) * 0.5;
        let o = grid.origin();
        let mag = self.source_radius + self.detector_radius;
        let mut worst: f64 = 0.0;
        for theta in self.view_angles() {
            let (c, s) = cos_sin_deg(theta);
            let src = [self.source_radius * s, self.source_radius * c];
            for (cx, cz) in [(-hx, -hz), (-hx, hz), (hx, -hz), (hx, hz)] {
                let q = [o[0] + cx - src[0], o[2] + cz - src[1]];
                let along = -(q[0] * s + q[1] * c);
                let lateral = q[0] * c - q[1] * s;
                worst = worst.max(libm::fabs(lateral * mag / along));
            }
        }
        worst
    }
}

/// Line-integral data on a [`ScanGeometry`], stored bin-fastest:
/// `b + n_bins * (r + n_rows * v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: ScanGeometry, values: Vec<f64>) -> Result<Self, GeometryError> {
        geometry.validate()?;
        if values.len() != geometry.data_len() {
            return Err(GeometryError::Scan(alloc::format!(
                "{} sinogram values for geometry with {} samples",
                values.len(),
                geometry.data_len()
            )));
        }
        if !crate::vecops::all_finite(&values) {
            return Err(GeometryError::Scan("sinogram values must be finite".into()));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: ScanGeometry) -> Self {
        let n = geometry.data_len();
        Self { geometry, values: vec![0.0; n] }
    }

    pub fn index(&self, view: usize, row: usize, bin: usize) -> usize {
        bin + self.geometry.n_bins * (row + self.geometry.n_rows * view)
    }
}

/// Fan-beam projector `X` mapping images on `grid` to sinograms on `geom`.
pub fn make_projector(grid: &GridSpec, geom: &ScanGeometry) -> Result<OpRef, GeometryError> {
    Ok(Arc::new(FanBeamProjector::new(grid.clone(), geom.clone())?))
}

/// Forward difference along `axis`, zero in the last slice.
pub fn make_finite_diff(grid: &GridSpec, axis: Axis) -> Result<OpRef, GeometryError> {
    Ok(Arc::new(FiniteDiff::new(grid, axis)?))
}

/// `cos θ ∂x + sin θ ∂z` with `θ` in degrees.
pub fn make_directional_diff(grid: &GridSpec, theta_deg: f64) -> Result<OpRef, GeometryError> {
    let (c, s) = cos_sin_deg(theta_deg);
    let dx = make_finite_diff(grid, Axis::X)?;
    let dz = make_finite_diff(grid, Axis::Z)?;
    Ok(Arc::new(crate::linop::LinearCombination::new(vec![(c, dx), (s, dz)])?))
}

/// Per-row square-root Hanning filter along the detector axis with cutoff
/// `c` as a fraction of Nyquist.
pub fn make_hanning_sqrt_filter(geom: &ScanGeometry, cutoff: f64) -> Result<OpRef, GeometryError> {
    Ok(Arc::new(HanningSqrtFilter::new(geom.n_bins, geom.n_views * geom.n_rows, cutoff)?))
}

/// Separable Gaussian blur with per-axis standard deviation `sigma` in cm
/// (`[sx, sz]` in 2D, `[sx, sy, sz]` in 3D).
pub fn make_gaussian_blur(grid: &GridSpec, sigma: &[f64]) -> Result<OpRef, GeometryError> {
    Ok(Arc::new(GaussianBlur::new(grid, sigma)?))
}
