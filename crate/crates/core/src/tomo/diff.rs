use super::{axis_index, Axis, GeometryError, GridSpec};
use crate::linop::{assert_io, LinearOperator, OperatorShape};

/// `cos` and `sin` of an angle in degrees, exact at multiples of 90°.
pub fn cos_sin_deg(theta_deg: f64) -> (f64, f64) {
    let r = theta_deg % 360.0;
    let r = if r < 0.0 { r + 360.0 } else { r };
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let t = theta_deg.to_radians();
        (libm::cos(t), libm::sin(t))
    }
}

/// Unit-step forward difference `f[i+1] - f[i]` along one axis, with a zero
/// output in the last slice. Voxel spacing is not applied.
#[derive(Debug, Clone)]
pub struct FiniteDiff {
    dims: [usize; 3],
    axis: usize,
}

impl FiniteDiff {
    pub fn new(grid: &GridSpec, axis: Axis) -> Result<Self, GeometryError> {
        if !grid.has_axis(axis) {
            return Err(GeometryError::Grid(alloc::format!("axis {axis:?} is absent from a 2D grid")));
        }
        let a = axis_index(axis);
        if grid.dims()[a] < 2 {
            return Err(GeometryError::Grid(alloc::format!(
                "finite difference along {axis:?} needs at least 2 samples"
            )));
        }
        Ok(Self { dims: grid.dims(), axis: a })
    }

    fn stride(&self) -> usize {
        match self.axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

impl LinearOperator for FiniteDiff {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.len(), codomain_len: self.len() }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        let stride = self.stride();
        let n = self.dims[self.axis];
        // Outer blocks of `n * stride` elements, each holding `n` slices.
        for (xb, yb) in x.chunks_exact(n * stride).zip(y.chunks_exact_mut(n * stride)) {
            for i in 0..n - 1 {
                let (cur, next) = (i * stride, (i + 1) * stride);
                for j in 0..stride {
                    yb[cur + j] = xb[next + j] - xb[cur + j];
                }
            }
            yb[(n - 1) * stride..].fill(0.0);
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        let stride = self.stride();
        let n = self.dims[self.axis];
        for (yb, xb) in y.chunks_exact(n * stride).zip(x.chunks_exact_mut(n * stride)) {
            for j in 0..stride {
                xb[j] = -yb[j];
            }
            for i in 1..n - 1 {
                let (cur, prev) = (i * stride, (i - 1) * stride);
                for j in 0..stride {
                    xb[cur + j] = yb[prev + j] - yb[cur + j];
                }
            }
            let (last, prev) = ((n - 1) * stride, (n - 2) * stride);
            xb[last..last + stride].copy_from_slice(&yb[prev..prev + stride]);
        }
    }
}
