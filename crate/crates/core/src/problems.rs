//! Directional-TV reconstruction problems and the least-squares baselines.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linop::{compose, op_norm, stack_with_norms, LinearOperator, OpRef, OperatorError, PowerConfig};
use crate::pdhg::{solve, ConvergenceLog, DualTerm, NullClock, PrimalTerm, ProblemSpec, SolveError, SolveOptions, StepConfig};
use crate::prox::L2BallData;
use crate::tomo::{
    make_directional_diff, make_finite_diff, make_gaussian_blur, make_hanning_sqrt_filter, make_projector, Axis,
    GeometryError, GridSpec, ImageGrid, ScanGeometry, Sinogram,
};
use crate::vecops;

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("invalid problem configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{0}")]
    NoConvergence(String),
}

/// Penalty weights. `y` is used only by 3D problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtvWeights {
    pub x: f64,
    pub a: f64,
    pub b: f64,
    pub one: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

impl DtvWeights {
    pub fn sum(&self) -> f64 {
        self.x + self.a + self.b + self.one + self.y.unwrap_or(0.0)
    }

    /// The same weights rescaled to unit sum.
    pub fn normalized(&self) -> Self {
        let s = self.sum();
        Self { x: self.x / s, a: self.a / s, b: self.b / s, one: self.one / s, y: self.y.map(|v| v / s) }
    }
}

fn default_cutoff() -> f64 {
    0.5
}

/// Settings of the constrained DTV problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtvConfig {
    pub alphas: DtvWeights,
    /// Data RMSE bound in the units of the filtered sinogram.
    pub epsilon: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    /// Degrees; defaults to `-arc_half_angle`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_a: Option<f64>,
    /// Degrees; defaults to `+arc_half_angle`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_b: Option<f64>,
    /// Latent-image blur widths (standard deviations in cm, one per axis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_blur: Option<Vec<f64>>,
}

impl DtvConfig {
    pub fn with_weights(alphas: DtvWeights, epsilon: f64) -> Self {
        Self { alphas, epsilon, cutoff: default_cutoff(), theta_a: None, theta_b: None, latent_blur: None }
    }

    pub fn validate(&self, is_3d: bool) -> Result<(), ProblemError> {
        let a = &self.alphas;
        let all = [a.x, a.a, a.b, a.one, a.y.unwrap_or(0.0)];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(ProblemError::Config(alloc::format!("penalty weights must be non-negative, got {a:?}")));
        }
        if libm::fabs(a.sum() - 1.0) > 1e-9 {
            return Err(ProblemError::Config(alloc::format!("penalty weights must sum to 1, got {}", a.sum())));
        }
        if is_3d && a.y.is_none() {
            return Err(ProblemError::Config("3D problems need a y weight".into()));
        }
        if !is_3d && a.y.is_some_and(|v| v != 0.0) {
            return Err(ProblemError::Config("2D problems have no y weight".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(ProblemError::Config(alloc::format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn angles(&self, geom: &ScanGeometry) -> (f64, f64) {
        (self.theta_a.unwrap_or(-geom.arc_half_angle), self.theta_b.unwrap_or(geom.arc_half_angle))
    }
}

/// Role of a block in a DTV problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Data,
    DiffX,
    DiffY,
    DirA,
    DirB,
    Identity,
}

/// An assembled DTV problem with its block roles.
#[derive(Debug, Clone)]
pub struct DtvProblem {
    pub problem: ProblemSpec,
    pub roles: Vec<BlockRole>,
    pub grid: GridSpec,
}

impl DtvProblem {
    /// `L_0 = ‖R X G‖₂`.
    pub fn data_norm(&self) -> f64 {
        self.problem.k.norms()[0]
    }

    /// Radius `ε′` of the normalized data ball.
    pub fn radius(&self) -> f64 {
        match &self.problem.dual_terms[0] {
            DualTerm::DataBall(b) => b.radius,
            DualTerm::LinfClip { .. } => unreachable!(),
        }
    }

    /// `Σ α_i ‖D_i f‖₁` over the penalty blocks.
    pub fn penalty(&self, f: &[f64]) -> f64 {
        self.problem.penalty(f)
    }
}

/// Data operator `R[c] X` (followed by the latent blur when given).
pub fn data_operator(geom: &ScanGeometry, grid: &GridSpec, cutoff: f64, blur: Option<&[f64]>) -> Result<OpRef, ProblemError> {
    let x = make_projector(grid, geom)?;
    let r = make_hanning_sqrt_filter(geom, cutoff)?;
    let fwd = match blur {
        Some(d) if d.iter().any(|v| *v != 0.0) => compose(x, make_gaussian_blur(grid, d)?)?,
        Some(d) => {
            make_gaussian_blur(grid, d)?;
            x
        }
        None => x,
    };
    Ok(compose(r, fwd)?)
}

fn check_data(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram) -> Result<(), ProblemError> {
    geom.check_grid(grid)?;
    if g.geometry != *geom {
        return Err(ProblemError::Config("sinogram geometry differs from the scan geometry".into()));
    }
    Ok(())
}

fn build_dtv(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram, cfg: &DtvConfig, power: &PowerConfig) -> Result<DtvProblem, ProblemError> {
    cfg.validate(grid.is_3d())?;
    check_data(geom, grid, g)?;
    let data = data_operator(geom, grid, cfg.cutoff, cfg.latent_blur.as_deref())?;
    let (ta, tb) = cfg.angles(geom);
    let a = &cfg.alphas;

    let mut blocks: Vec<OpRef> = vec![data];
    let mut roles = vec![BlockRole::Data];
    let mut weights = vec![0.0];
    let mut push = |op: OpRef, role, w: f64| {
        // A zero weight pins the block's dual at zero; the block is dropped.
        if w > 0.0 {
            blocks.push(op);
            roles.push(role);
            weights.push(w);
        }
    };
    push(make_finite_diff(grid, Axis::X)?, BlockRole::DiffX, a.x);
    if grid.is_3d() {
        push(make_finite_diff(grid, Axis::Y)?, BlockRole::DiffY, a.y.unwrap_or(0.0));
    }
    push(make_directional_diff(grid, ta)?, BlockRole::DirA, a.a);
    push(make_directional_diff(grid, tb)?, BlockRole::DirB, a.b);
    push(crate::linop::identity(grid.len())?, BlockRole::Identity, a.one);

    let nb = blocks.len();
    let k = stack_with_norms(blocks, vec![1.0; nb], power)?;
    let ls = k.norms()[0];
    let r = make_hanning_sqrt_filter(geom, cfg.cutoff)?;
    let mut center = r.apply(&g.values)?;
    vecops::scale(&mut center, 1.0 / ls);
    let radius = cfg.epsilon * libm::sqrt(g.values.len() as f64) / ls;

    let mut terms = vec![DualTerm::DataBall(L2BallData { center, radius })];
    terms.extend(weights[1..].iter().map(|w| DualTerm::LinfClip { weight: *w }));
    let problem = ProblemSpec::new(k, terms, PrimalTerm::NonNegative)?;
    Ok(DtvProblem { problem, roles, grid: grid.clone() })
}

/// 2D constrained DTV: blocks `R X`, `∂x`, `∂a`, `∂b`, `I` (zero-weight
/// penalties omitted).
pub fn build_dtv_2d(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram, cfg: &DtvConfig, power: &PowerConfig) -> Result<DtvProblem, ProblemError> {
    if grid.is_3d() {
        return Err(ProblemError::Config("build_dtv_2d needs a 2D grid".into()));
    }
    build_dtv(geom, grid, g, cfg, power)
}

/// 3D constrained DTV: blocks `R X G[d]`, `∂x`, `∂y`, `∂a`, `∂b`, `I`.
pub fn build_dtv_3d(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram, cfg: &DtvConfig, power: &PowerConfig) -> Result<DtvProblem, ProblemError> {
    if !grid.is_3d() {
        return Err(ProblemError::Config("build_dtv_3d needs a 3D grid".into()));
    }
    build_dtv(geom, grid, g, cfg, power)
}

/// Builds the 2D or 3D problem to match `grid`.
pub fn build_dtv_auto(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram, cfg: &DtvConfig, power: &PowerConfig) -> Result<DtvProblem, ProblemError> {
    build_dtv(geom, grid, g, cfg, power)
}

/// Conjugate gradient for a symmetric positive definite `apply`, starting
/// from `x`. Returns the iteration count.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize, ProblemError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = vecops::norm2(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let mut p = r.clone();
    let mut rr = vecops::dot(&r, &r);
    for it in 0..max_iter {
        if libm::sqrt(rr) <= tol * bnorm {
            return Ok(it);
        }
        apply(&p, &mut ap);
        let alpha = rr / vecops::dot(&p, &ap);
        vecops::axpy(x, alpha, &p);
        vecops::axpy(&mut r, -alpha, &ap);
        let rr_new = vecops::dot(&r, &r);
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    if libm::sqrt(rr) <= tol * bnorm {
        return Ok(max_iter);
    }
    Err(ProblemError::NoConvergence(alloc::format!(
        "conjugate gradient reached {max_iter} iterations with relative residual {}",
        libm::sqrt(rr) / bnorm
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsqTikOptions {
    /// Fixed ridge weight; ignored when `target_discrepancy` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Desired `‖X f - g‖₂ / ‖g‖₂` (0.001 for 0.1%).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_discrepancy: Option<f64>,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
}

fn default_cg_tol() -> f64 {
    1e-10
}

fn default_cg_max_iter() -> usize {
    20_000
}

impl Default for LsqTikOptions {
    fn default() -> Self {
        Self { alpha: None, target_discrepancy: Some(1e-3), cg_tol: default_cg_tol(), cg_max_iter: default_cg_max_iter() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqTikResult {
    pub image: ImageGrid,
    pub alpha: f64,
    /// `‖X f - g‖₂ / ‖g‖₂`.
    pub discrepancy: f64,
    pub cg_iterations: usize,
}

struct Ridge {
    x: OpRef,
    xtg: Vec<f64>,
    g: Vec<f64>,
    gnorm: f64,
    tmp: Vec<f64>,
}

impl Ridge {
    fn solve(&mut self, alpha: f64, f: &mut [f64], opts: &LsqTikOptions) -> Result<usize, ProblemError> {
        let x = &self.x;
        let tmp = &mut self.tmp;
        conjugate_gradient(
            |v, out| {
                x.apply_into(v, tmp);
                x.adjoint_into(tmp, out);
                vecops::axpy(out, alpha, v);
            },
            &self.xtg,
            f,
            opts.cg_tol,
            opts.cg_max_iter,
        )
    }

    fn discrepancy(&mut self, f: &[f64]) -> f64 {
        self.x.apply_into(f, &mut self.tmp);
        let ss: f64 = self.tmp.iter().zip(&self.g).map(|(a, b)| (a - b) * (a - b)).sum();
        libm::sqrt(ss) / self.gnorm
    }
}

/// Ridge-regularized least squares `½‖X f - g‖² + (α/2)‖f‖²` by conjugate
/// gradient on the normal equations. With a target discrepancy, `α` is
/// bisected in log scale until the relative discrepancy is within 5% of it.
pub fn solve_lsq_tik(geom: &ScanGeometry, grid: &GridSpec, g: &Sinogram, opts: &LsqTikOptions, power: &PowerConfig) -> Result<LsqTikResult, ProblemError> {
    check_data(geom, grid, g)?;
    let x = make_projector(grid, geom)?;
    solve_lsq_tik_with(x, grid, &g.values, opts, power)
}

/// As [`solve_lsq_tik`] for an arbitrary forward operator on `grid`.
pub fn solve_lsq_tik_with(x: OpRef, grid: &GridSpec, g: &[f64], opts: &LsqTikOptions, power: &PowerConfig) -> Result<LsqTikResult, ProblemError> {
    let s = x.shape();
    if s.domain_len != grid.len() || s.codomain_len != g.len() {
        return Err(ProblemError::Config("operator shape does not match the grid and data".into()));
    }
    let xtg = x.adjoint(g)?;
    let gnorm = vecops::norm2(g);
    let mut ridge = Ridge { tmp: vec![0.0; g.len()], x: x.clone(), xtg, g: g.to_vec(), gnorm };
    let mut f = vec![0.0; grid.len()];

    let Some(target) = opts.target_discrepancy else {
        let alpha = opts.alpha.ok_or_else(|| ProblemError::Config("give alpha or a target discrepancy".into()))?;
        if !(alpha > 0.0) {
            return Err(ProblemError::Config(alloc::format!("alpha must be positive, got {alpha}")));
        }
        let it = ridge.solve(alpha, &mut f, opts)?;
        let d = if gnorm > 0.0 { ridge.discrepancy(&f) } else { 0.0 };
        return Ok(LsqTikResult { image: ImageGrid::new(grid.clone(), f)?, alpha, discrepancy: d, cg_iterations: it });
    };
    if !(target > 0.0 && target < 1.0) {
        return Err(ProblemError::Config(alloc::format!("target discrepancy must lie in (0, 1), got {target}")));
    }
    if gnorm == 0.0 {
        return Err(ProblemError::Config("cannot tune against all-zero data".into()));
    }

    let l2 = {
        let n = op_norm(x.as_ref(), power)?;
        n * n
    };
    let mut total = 0;
    let mut eval = |alpha: f64, f: &mut Vec<f64>, ridge: &mut Ridge| -> Result<f64, ProblemError> {
        total += ridge.solve(alpha, f, opts)?;
        Ok(ridge.discrepancy(f))
    };
    let close = |d: f64| libm::fabs(d / target - 1.0) <= 0.05;

    // Bracket in log10(α), walking down from a heavily regularized start so
    // that each solve warm-starts from a smoother one.
    let mut hi = libm::log10(l2);
    let mut d_hi = eval(libm::pow(10.0, hi), &mut f, &mut ridge)?;
    if close(d_hi) {
        return finish(grid, f, libm::pow(10.0, hi), d_hi, total);
    }
    while d_hi < target {
        hi += 2.0;
        d_hi = eval(libm::pow(10.0, hi), &mut f, &mut ridge)?;
    }
    let mut lo = hi;
    let mut d_lo = d_hi;
    let floor = libm::log10(l2) - 16.0;
    while d_lo > target {
        if close(d_lo) {
            return finish(grid, f, libm::pow(10.0, lo), d_lo, total);
        }
        lo -= 1.0;
        if lo < floor {
            return Err(ProblemError::NoConvergence(alloc::format!(
                "target discrepancy {target} is below the attainable floor {d_lo}"
            )));
        }
        d_lo = eval(libm::pow(10.0, lo), &mut f, &mut ridge)?;
    }
    if close(d_lo) {
        return finish(grid, f, libm::pow(10.0, lo), d_lo, total);
    }
    hi = lo + 1.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let d = eval(libm::pow(10.0, mid), &mut f, &mut ridge)?;
        if close(d) {
            return finish(grid, f, libm::pow(10.0, mid), d, total);
        }
        if d > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(ProblemError::NoConvergence(alloc::format!("bisection on alpha did not reach discrepancy {target}")))
}

fn finish(grid: &GridSpec, f: Vec<f64>, alpha: f64, d: f64, its: usize) -> Result<LsqTikResult, ProblemError> {
    Ok(LsqTikResult { image: ImageGrid::new(grid.clone(), f)?, alpha, discrepancy: d, cg_iterations: its })
}

/// `‖(cos θ ∂x + sin θ ∂z) f‖₁` for a 2D image.
pub fn dtv_theta(f: &ImageGrid, theta_deg: f64) -> Result<f64, ProblemError> {
    if f.spec.is_3d() {
        return Err(ProblemError::Config("DTV(θ) is defined for 2D images".into()));
    }
    let d = make_directional_diff(&f.spec, theta_deg)?;
    Ok(d.apply(&f.values)?.iter().map(|v| libm::fabs(*v)).sum())
}

/// Gradient descent on `½‖A f - b‖²` with a fixed step.
pub fn gradient_descent_lsq(a: &dyn LinearOperator, b: &[f64], f0: &[f64], step: f64, n_iter: usize) -> Result<Vec<f64>, ProblemError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(ProblemError::Config(alloc::format!("step must be positive, got {step}")));
    }
    let s = a.shape();
    if f0.len() != s.domain_len || b.len() != s.codomain_len {
        return Err(ProblemError::Config("initial image or data length does not match the operator".into()));
    }
    let mut f = f0.to_vec();
    let mut resid = vec![0.0; s.codomain_len];
    let mut grad = vec![0.0; s.domain_len];
    for it in 0..n_iter {
        a.apply_into(&f, &mut resid);
        resid.iter_mut().zip(b).for_each(|(r, bi)| *r -= bi);
        a.adjoint_into(&resid, &mut grad);
        f.iter_mut().zip(&grad).for_each(|(fi, gi)| *fi -= step * gi);
        if !vecops::all_finite(&f) {
            return Err(ProblemError::NoConvergence(alloc::format!("gradient descent diverged at iteration {}", it + 1)));
        }
    }
    Ok(f)
}

/// First gradient-descent iterate from zero on `½‖R[c](X f - g)‖²`, i.e.
/// `step · Xᵀ Rᵀ R g`. The default step is `1/‖R X‖²`.
pub fn fbp_first_iterate(
    geom: &ScanGeometry,
    grid: &GridSpec,
    g: &Sinogram,
    cutoff: f64,
    step: Option<f64>,
    power: &PowerConfig,
) -> Result<(ImageGrid, f64), ProblemError> {
    check_data(geom, grid, g)?;
    let a = data_operator(geom, grid, cutoff, None)?;
    let r = make_hanning_sqrt_filter(geom, cutoff)?;
    let rg = r.apply(&g.values)?;
    let step = match step {
        Some(s) => s,
        None => {
            let l = op_norm(a.as_ref(), power)?;
            1.0 / (l * l)
        }
    };
    let f = gradient_descent_lsq(a.as_ref(), &rg, &vec![0.0; grid.len()], step, 1)?;
    Ok((ImageGrid::new(grid.clone(), f)?, step))
}

fn default_alpha_tik() -> f64 {
    0.05
}

fn default_hr_iters() -> usize {
    10
}

/// High-resolution ridge refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighResConfig {
    #[serde(default = "default_alpha_tik")]
    pub alpha_tik: f64,
    #[serde(default = "default_hr_iters")]
    pub n_iter: usize,
    /// Latent blur on the high-resolution grid (standard deviations, cm).
    pub blur: Vec<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

/// `½‖R(X G h - g)‖² + (α/2)‖G h - h₀‖²` on a high-resolution grid.
pub struct HighResObjective {
    a: OpRef,
    blur: OpRef,
    rg: Vec<f64>,
    h0: Vec<f64>,
    alpha: f64,
}

impl HighResObjective {
    pub fn new(geom: &ScanGeometry, g: &Sinogram, h0: &ImageGrid, cfg: &HighResConfig) -> Result<Self, ProblemError> {
        check_data(geom, &h0.spec, g)?;
        if !(cfg.alpha_tik >= 0.0 && cfg.alpha_tik.is_finite()) {
            return Err(ProblemError::Config(alloc::format!("alpha_tik must be non-negative, got {}", cfg.alpha_tik)));
        }
        let grid = &h0.spec;
        let blur = make_gaussian_blur(grid, &cfg.blur)?;
        let a = compose(data_operator(geom, grid, cfg.cutoff, None)?, blur.clone())?;
        let rg = make_hanning_sqrt_filter(geom, cfg.cutoff)?.apply(&g.values)?;
        Ok(Self { a, blur, rg, h0: h0.values.clone(), alpha: cfg.alpha_tik })
    }

    pub fn value(&self, h: &[f64]) -> f64 {
        let r = self.a.apply(h).unwrap();
        let d: f64 = r.iter().zip(&self.rg).map(|(a, b)| (a - b) * (a - b)).sum();
        let gh = self.blur.apply(h).unwrap();
        let p: f64 = gh.iter().zip(&self.h0).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * d + 0.5 * self.alpha * p
    }

    pub fn gradient(&self, h: &[f64], out: &mut [f64]) {
        let mut r = self.a.apply(h).unwrap();
        r.iter_mut().zip(&self.rg).for_each(|(a, b)| *a -= b);
        self.a.adjoint_into(&r, out);
        if self.alpha != 0.0 {
            let mut gh = self.blur.apply(h).unwrap();
            gh.iter_mut().zip(&self.h0).for_each(|(a, b)| *a -= b);
            let back = self.blur.adjoint(&gh).unwrap();
            vecops::axpy(out, self.alpha, &back);
        }
    }

    /// `1 / (‖R X G‖² + α ‖G‖²)`.
    pub fn step_size(&self, power: &PowerConfig) -> Result<f64, ProblemError> {
        let l = op_norm(self.a.as_ref(), power)?;
        let gn = op_norm(self.blur.as_ref(), power)?;
        Ok(1.0 / (l * l + self.alpha * gn * gn))
    }

    /// Fixed-step gradient descent from `start`.
    pub fn descend(&self, start: &[f64], n_iter: usize, power: &PowerConfig) -> Result<Vec<f64>, ProblemError> {
        let step = self.step_size(power)?;
        let mut h = start.to_vec();
        let mut grad = vec![0.0; h.len()];
        for it in 0..n_iter {
            self.gradient(&h, &mut grad);
            vecops::axpy(&mut h, -step, &grad);
            if !vecops::all_finite(&h) {
                return Err(ProblemError::NoConvergence(alloc::format!("high-resolution descent diverged at iteration {}", it + 1)));
            }
        }
        Ok(h)
    }
}

/// Gradient descent on the high-resolution ridge objective, started at `h0`.
pub fn lsq_tik_highres(geom: &ScanGeometry, g: &Sinogram, h0: &ImageGrid, cfg: &HighResConfig, power: &PowerConfig) -> Result<ImageGrid, ProblemError> {
    let obj = HighResObjective::new(geom, g, h0, cfg)?;
    let h = obj.descend(&h0.values, cfg.n_iter, power)?;
    Ok(ImageGrid::new(h0.spec.clone(), h)?)
}

/// Replicates every voxel `factors[a]` times along each axis
/// (`[fx, fz]` in 2D, `[fx, fy, fz]` in 3D).
pub fn upsample_nearest(f: &ImageGrid, factors: &[usize]) -> Result<ImageGrid, ProblemError> {
    let fac = f.spec.expand_factors(factors)?;
    let spec = f.spec.refined(factors)?;
    let [nx, ny, nz] = spec.dims();
    let mut out = Vec::with_capacity(spec.len());
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                out.push(f.get(ix / fac[0], iy / fac[1], iz / fac[2]));
            }
        }
    }
    Ok(ImageGrid::new(spec, out)?)
}

/// Settings of the low-resolution DTV plus high-resolution refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageConfig {
    pub low_grid: GridSpec,
    pub dtv: DtvConfig,
    pub steps: StepConfig,
    pub n_iter: usize,
    pub factors: Vec<usize>,
    pub high: HighResConfig,
}

#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    /// Low-resolution latent image.
    pub low: ImageGrid,
    pub low_log: ConvergenceLog,
    /// Upsampled, blurred prior.
    pub prior: ImageGrid,
    pub high: ImageGrid,
}

/// Low-resolution DTV, nearest upsampling, blur with the low-resolution
/// latent blur to form the prior, then high-resolution ridge descent.
pub fn two_stage_pipeline(geom: &ScanGeometry, g: &Sinogram, cfg: &TwoStageConfig, opts: &SolveOptions) -> Result<TwoStageOutput, ProblemError> {
    let problem = build_dtv_auto(geom, &cfg.low_grid, g, &cfg.dtv, &opts.power)?;
    let solve_opts = SolveOptions { n_iter: cfg.n_iter, ..*opts };
    let out = solve(&problem.problem, &cfg.steps, &solve_opts, None, &mut NullClock)?;
    let low = ImageGrid::new(cfg.low_grid.clone(), out.state.x)?;
    let up = upsample_nearest(&low, &cfg.factors)?;
    let prior_values = match &cfg.dtv.latent_blur {
        Some(d) => make_gaussian_blur(&up.spec, d)?.apply(&up.values)?,
        None => up.values.clone(),
    };
    let prior = ImageGrid::new(up.spec.clone(), prior_values)?;
    let high = lsq_tik_highres(geom, g, &prior, &cfg.high, &opts.power)?;
    Ok(TwoStageOutput { low, low_log: out.log, prior, high })
}

/// The high-resolution stage with `h₀ = 0`.
pub fn zeroinit_highres(geom: &ScanGeometry, g: &Sinogram, grid: &GridSpec, cfg: &HighResConfig, power: &PowerConfig) -> Result<ImageGrid, ProblemError> {
    lsq_tik_highres(geom, g, &ImageGrid::zeros(grid.clone()), cfg, power)
}

/// Wraps an operator in a shared handle.
pub fn shared<T: LinearOperator + 'static>(op: T) -> OpRef {
    Arc::new(op)
}
