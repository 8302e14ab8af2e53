//! Stacked PDHG with per-block step weights and predictor-corrector
//! relaxation.
//!
//! Block `i` of the stacked operator acts as `ν_i K̂_i` with
//! `K̂_i = K_i / ‖K_i‖₂`. Step parameters follow from two tuning knobs: the
//! ratio `β = σ_i / τ` shared by all blocks and the extra weight `γ` given to
//! block 0, which is always the data-fidelity block.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linop::{psd_top_eigenvalue, BlockOperator, OperatorError, PowerConfig};
use crate::prox::{prox_l2ball_conj, prox_linf_clip, prox_nonneg, L2BallData};
use crate::vecops;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("iterate diverged at iteration {iteration} in {location}")]
    Diverged { iteration: usize, location: IterateLocation, log: Box<ConvergenceLog> },
}

/// Which part of the iterate first went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterateLocation {
    Primal,
    Dual(usize),
}

impl core::fmt::Display for IterateLocation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            IterateLocation::Primal => f.write_str("the primal image"),
            IterateLocation::Dual(i) => write!(f, "dual block {i}"),
        }
    }
}

/// Tuning parameters: `beta > 0`, `gamma >= 1`, `1 <= rho < 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0, rho: 1.0 }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SolveError::Config(alloc::format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(SolveError::Config(alloc::format!("gamma must be at least 1, got {}", self.gamma)));
        }
        if !(self.rho >= 1.0 && self.rho < 2.0) {
            return Err(SolveError::Config(alloc::format!("rho must lie in [1, 2), got {}", self.rho)));
        }
        Ok(())
    }
}

/// Derived step sizes. `w_hat`, `r`, `sigma` and `nu` hold one entry per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub w: f64,
    pub w_hat: Vec<f64>,
    pub r: Vec<f64>,
    pub tau: f64,
    pub sigma: Vec<f64>,
    pub nu: Vec<f64>,
}

impl StepParams {
    pub fn num_blocks(&self) -> usize {
        self.nu.len()
    }

    /// Per-block products `τ σ_i ν_i²`.
    pub fn weights(&self) -> Vec<f64> {
        self.sigma.iter().zip(&self.nu).map(|(s, n)| self.tau * s * n * n).collect()
    }

    /// `τ ‖Σ σ_i ν_i² K̂_iᵀ K̂_i‖₂`, which the derivation sets to one.
    pub fn condition_value(&self, k: &BlockOperator, cfg: &PowerConfig) -> Result<f64, SolveError> {
        let coeffs: Vec<f64> = self.sigma.iter().zip(&self.nu).map(|(s, n)| s * n * n).collect();
        Ok(self.tau * weighted_gram_norm(k, &coeffs, cfg)?)
    }
}

/// Largest eigenvalue of `Σ c_i K̂_iᵀ K̂_i`, evaluated matrix-free.
pub fn weighted_gram_norm(k: &BlockOperator, coeffs: &[f64], cfg: &PowerConfig) -> Result<f64, SolveError> {
    if coeffs.len() != k.num_blocks() {
        return Err(SolveError::Config(alloc::format!(
            "{} coefficients for {} blocks",
            coeffs.len(),
            k.num_blocks()
        )));
    }
    let n = k.domain_len();
    let mut mids: Vec<Vec<f64>> = (0..k.num_blocks()).map(|i| vec![0.0; k.block_len(i)]).collect();
    let mut tmp = vec![0.0; n];
    let est = psd_top_eigenvalue(
        n,
        |v, out| {
            out.fill(0.0);
            for (i, mid) in mids.iter_mut().enumerate() {
                let b = k.block(i);
                b.apply_into(v, mid);
                b.adjoint_into(mid, &mut tmp);
                let l = k.norms()[i];
                vecops::axpy(out, coeffs[i] / (l * l), &tmp);
            }
        },
        cfg,
    )?;
    Ok(est.value)
}

/// Step sizes from `(β, γ)`: `ŵ_0 = γ`, `ŵ_i = 1` otherwise, `r_i = β`,
/// `w = 1/‖Σ ŵ_i K̂_iᵀ K̂_i‖₂`, `τ = √(w ŵ_0 / r_0)`, `σ_i = r_i τ` and
/// `ν_i = √(w ŵ_i / r_i) / τ`, so that `ν_0 = 1`.
pub fn derive_step_params(k: &BlockOperator, config: &StepConfig, cfg: &PowerConfig) -> Result<StepParams, SolveError> {
    config.validate()?;
    let nb = k.num_blocks();
    let mut w_hat = vec![1.0; nb];
    w_hat[0] = config.gamma;
    let r = vec![config.beta; nb];
    let w = 1.0 / weighted_gram_norm(k, &w_hat, cfg)?;
    let tau = libm::sqrt(w * w_hat[0] / r[0]);
    let sigma: Vec<f64> = r.iter().map(|ri| ri * tau).collect();
    let mut nu: Vec<f64> = w_hat.iter().zip(&r).map(|(wh, ri)| libm::sqrt(w * wh / ri) / tau).collect();
    nu[0] = 1.0;
    Ok(StepParams { w, w_hat, r, tau, sigma, nu })
}

/// Conjugate-side term for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DualTerm {
    /// Indicator of `‖y - g′‖₂ <= ε′` on the unscaled block output `K̂ x`.
    DataBall(L2BallData),
    /// `weight · L_i · ‖K̂_i x‖₁`. The clip bound used by the iteration is
    /// `weight · L_i / ν_i`.
    LinfClip { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimalTerm {
    NonNegative,
    Free,
}

/// A stacked problem `min Σ F_i(ν_i K̂_i x) + G(x)`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub k: BlockOperator,
    pub dual_terms: Vec<DualTerm>,
    pub primal_term: PrimalTerm,
}

impl ProblemSpec {
    pub fn new(k: BlockOperator, dual_terms: Vec<DualTerm>, primal_term: PrimalTerm) -> Result<Self, SolveError> {
        if dual_terms.len() != k.num_blocks() {
            return Err(SolveError::Config(alloc::format!(
                "{} dual terms for {} blocks",
                dual_terms.len(),
                k.num_blocks()
            )));
        }
        for (i, t) in dual_terms.iter().enumerate() {
            match t {
                DualTerm::DataBall(b) => {
                    if b.center.len() != k.block_len(i) {
                        return Err(SolveError::Config(alloc::format!(
                            "block {i}: data length {} does not match block output length {}",
                            b.center.len(),
                            k.block_len(i)
                        )));
                    }
                    if !(b.radius >= 0.0 && b.radius.is_finite()) {
                        return Err(SolveError::Config(alloc::format!("block {i}: radius must be non-negative")));
                    }
                }
                DualTerm::LinfClip { weight } => {
                    if !(*weight >= 0.0 && weight.is_finite()) {
                        return Err(SolveError::Config(alloc::format!("block {i}: weight must be non-negative")));
                    }
                }
            }
        }
        if !matches!(dual_terms[0], DualTerm::DataBall(_)) {
            return Err(SolveError::Config("block 0 must be the data-fidelity block".into()));
        }
        Ok(Self { k, dual_terms, primal_term })
    }

    pub fn domain_len(&self) -> usize {
        self.k.domain_len()
    }

    fn data(&self) -> &L2BallData {
        match &self.dual_terms[0] {
            DualTerm::DataBall(b) => b,
            DualTerm::LinfClip { .. } => unreachable!("validated in ProblemSpec::new"),
        }
    }

    /// Data RMSE in the units of the original constraint:
    /// `L_0 ‖K̂_0 x - g′‖₂ / √m`, with `m` the data length.
    pub fn data_rmse(&self, x: &[f64]) -> f64 {
        let mut kx = vec![0.0; self.k.block_len(0)];
        self.data_rmse_with(x, &mut kx)
    }

    fn data_rmse_with(&self, x: &[f64], kx: &mut [f64]) -> f64 {
        self.k.apply_normalized(0, x, kx);
        self.k.norms()[0] * vecops::rmse(kx, &self.data().center)
    }

    /// Objective `Σ_i weight_i L_i ‖K̂_i x‖₁` of the clip blocks.
    pub fn penalty(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, t) in self.dual_terms.iter().enumerate() {
            if let DualTerm::LinfClip { weight } = t {
                let mut y = vec![0.0; self.k.block_len(i)];
                self.k.block(i).apply_into(x, &mut y);
                total += weight * y.iter().map(|v| libm::fabs(*v)).sum::<f64>();
            }
        }
        total
    }
}

/// Primal image, per-block duals and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub x: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub k: usize,
}

impl IterateState {
    pub fn zeros(problem: &ProblemSpec) -> Self {
        Self {
            x: vec![0.0; problem.domain_len()],
            lambda: (0..problem.k.num_blocks()).map(|i| vec![0.0; problem.k.block_len(i)]).collect(),
            k: 0,
        }
    }
}

/// Reusable iteration workspace for one problem and one set of steps.
pub struct Pdhg<'a> {
    problem: &'a ProblemSpec,
    steps: StepParams,
    rho: f64,
    /// Per-block `σ_i ν_i`.
    dual_gain: Vec<f64>,
    /// Per-block shrink radius or clip bound.
    bounds: Vec<f64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
    x_hat: Vec<f64>,
    x_tilde: Vec<f64>,
    lambda_hat: Vec<Vec<f64>>,
}

impl<'a> Pdhg<'a> {
    pub fn new(problem: &'a ProblemSpec, steps: StepParams, rho: f64) -> Result<Self, SolveError> {
        let nb = problem.k.num_blocks();
        if steps.num_blocks() != nb || steps.sigma.len() != nb {
            return Err(SolveError::Config(alloc::format!("step parameters for {} blocks, problem has {nb}", steps.num_blocks())));
        }
        if !(rho > 0.0 && rho < 2.0) {
            return Err(SolveError::Config(alloc::format!("rho must lie in (0, 2), got {rho}")));
        }
        let dual_gain = steps.sigma.iter().zip(&steps.nu).map(|(s, n)| s * n).collect();
        let bounds = problem
            .dual_terms
            .iter()
            .enumerate()
            .map(|(i, t)| match t {
                DualTerm::DataBall(b) => steps.nu[i] * b.radius,
                DualTerm::LinfClip { weight } => weight * problem.k.norms()[i] / steps.nu[i],
            })
            .collect();
        let n = problem.domain_len();
        Ok(Self {
            problem,
            steps,
            rho,
            dual_gain,
            bounds,
            grad: vec![0.0; n],
            scratch: vec![0.0; n],
            x_hat: vec![0.0; n],
            x_tilde: vec![0.0; n],
            lambda_hat: (0..nb).map(|i| vec![0.0; problem.k.block_len(i)]).collect(),
        })
    }

    pub fn steps(&self) -> &StepParams {
        &self.steps
    }

    /// Clip bound (or shrink radius for the data block) used for each block.
    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    /// One relaxed PDHG update of `state`.
    pub fn step(&mut self, state: &mut IterateState) -> Result<(), IterateLocation> {
        let p = self.problem;
        let tau = self.steps.tau;

        p.k.weighted_adjoint(&self.steps.nu, &state.lambda, &mut self.grad, &mut self.scratch);
        for ((xh, x), g) in self.x_hat.iter_mut().zip(&state.x).zip(&self.grad) {
            *xh = x - tau * g;
        }
        if p.primal_term == PrimalTerm::NonNegative {
            prox_nonneg(&mut self.x_hat);
        }
        for ((xt, xh), x) in self.x_tilde.iter_mut().zip(&self.x_hat).zip(&state.x) {
            *xt = 2.0 * xh - x;
        }

        for (i, term) in p.dual_terms.iter().enumerate() {
            let lh = &mut self.lambda_hat[i];
            p.k.apply_normalized(i, &self.x_tilde, lh);
            let c = self.dual_gain[i];
            let lam = &state.lambda[i];
            match term {
                DualTerm::DataBall(ball) => {
                    for ((v, l), g) in lh.iter_mut().zip(lam).zip(&ball.center) {
                        *v = l + c * (*v - g);
                    }
                    prox_l2ball_conj(lh, self.steps.sigma[i], self.bounds[i]);
                }
                DualTerm::LinfClip { .. } => {
                    for (v, l) in lh.iter_mut().zip(lam) {
                        *v = l + c * *v;
                    }
                    prox_linf_clip(lh, self.bounds[i]);
                }
            }
        }

        if self.rho == 1.0 {
            core::mem::swap(&mut state.x, &mut self.x_hat);
            for (l, lh) in state.lambda.iter_mut().zip(self.lambda_hat.iter_mut()) {
                core::mem::swap(l, lh);
            }
        } else {
            let rho = self.rho;
            relax(&mut state.x, &self.x_hat, rho);
            for (l, lh) in state.lambda.iter_mut().zip(&self.lambda_hat) {
                relax(l, lh, rho);
            }
        }
        state.k += 1;

        if !vecops::all_finite(&state.x) {
            return Err(IterateLocation::Primal);
        }
        for (i, l) in state.lambda.iter().enumerate() {
            if !vecops::all_finite(l) {
                return Err(IterateLocation::Dual(i));
            }
        }
        Ok(())
    }
}

fn relax(x: &mut [f64], target: &[f64], rho: f64) {
    for (a, b) in x.iter_mut().zip(target) {
        *a += rho * (b - *a);
    }
}

/// Single update with freshly allocated workspace.
pub fn pdhg_iterate(problem: &ProblemSpec, steps: &StepParams, rho: f64, state: &mut IterateState) -> Result<(), SolveError> {
    let mut engine = Pdhg::new(problem, steps.clone(), rho)?;
    let k = state.k;
    engine.step(state).map_err(|location| SolveError::Diverged {
        iteration: k + 1,
        location,
        log: Box::default(),
    })
}

/// Wall-clock source for the `elapsed_seconds` log column.
pub trait Clock {
    fn elapsed_seconds(&mut self) -> f64;
}

/// Clock that always reads zero, keeping logs reproducible.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullClock;

impl Clock for NullClock {
    fn elapsed_seconds(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSample {
    pub iter: usize,
    pub data_rmse: f64,
    /// NaN when no reference image was given.
    pub image_rmse: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub samples: Vec<LogSample>,
}

impl ConvergenceLog {
    pub fn last(&self) -> Option<&LogSample> {
        self.samples.last()
    }

    /// First logged iteration whose data RMSE is at or below `target`.
    pub fn first_below(&self, target: f64) -> Option<usize> {
        self.samples.iter().find(|s| s.data_rmse <= target).map(|s| s.iter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub n_iter: usize,
    pub log_every: usize,
    /// Stop at the first logged iteration with data RMSE at or below this.
    pub data_rmse_target: Option<f64>,
    pub power: PowerConfig,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { n_iter: 1000, log_every: 10, data_rmse_target: None, power: PowerConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub state: IterateState,
    pub log: ConvergenceLog,
    pub steps: StepParams,
}

/// Derives steps from `config` and runs up to `opts.n_iter` iterations from
/// zero.
pub fn solve(
    problem: &ProblemSpec,
    config: &StepConfig,
    opts: &SolveOptions,
    truth: Option<&[f64]>,
    clock: &mut dyn Clock,
) -> Result<SolveOutput, SolveError> {
    let steps = derive_step_params(&problem.k, config, &opts.power)?;
    solve_with_steps(problem, steps, config.rho, opts, truth, clock)
}

/// Runs the iteration with explicit step parameters.
pub fn solve_with_steps(
    problem: &ProblemSpec,
    steps: StepParams,
    rho: f64,
    opts: &SolveOptions,
    truth: Option<&[f64]>,
    clock: &mut dyn Clock,
) -> Result<SolveOutput, SolveError> {
    if opts.n_iter == 0 {
        return Err(SolveError::Config("n_iter must be at least 1".into()));
    }
    if opts.log_every == 0 {
        return Err(SolveError::Config("log_every must be at least 1".into()));
    }
    if let Some(t) = truth {
        if t.len() != problem.domain_len() {
            return Err(SolveError::Config(alloc::format!(
                "reference image has {} values, problem has {}",
                t.len(),
                problem.domain_len()
            )));
        }
    }
    let mut engine = Pdhg::new(problem, steps, rho)?;
    let mut state = IterateState::zeros(problem);
    let mut log = ConvergenceLog::default();
    let mut kx = vec![0.0; problem.k.block_len(0)];
    for it in 1..=opts.n_iter {
        if let Err(location) = engine.step(&mut state) {
            return Err(SolveError::Diverged { iteration: it, location, log: Box::new(log) });
        }
        if it % opts.log_every == 0 || it == opts.n_iter {
            let data_rmse = problem.data_rmse_with(&state.x, &mut kx);
            let image_rmse = truth.map_or(f64::NAN, |t| vecops::rmse(&state.x, t));
            log.samples.push(LogSample { iter: it, data_rmse, image_rmse, elapsed_seconds: clock.elapsed_seconds() });
            if opts.data_rmse_target.is_some_and(|t| data_rmse <= t) {
                break;
            }
        }
    }
    Ok(SolveOutput { state, log, steps: engine.steps })
}

/// Runs `n_iter` iterations and records every primal iterate.
fn trajectory(problem: &ProblemSpec, steps: StepParams, rho: f64, n_iter: usize) -> Result<Vec<Vec<f64>>, SolveError> {
    let mut engine = Pdhg::new(problem, steps, rho)?;
    let mut state = IterateState::zeros(problem);
    let mut out = Vec::with_capacity(n_iter);
    for it in 1..=n_iter {
        engine
            .step(&mut state)
            .map_err(|location| SolveError::Diverged { iteration: it, location, log: Box::default() })?;
        out.push(state.x.clone());
    }
    Ok(out)
}

fn max_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| libm::fabs(p - q)))
        .fold(0.0, f64::max)
}

/// Maximum primal deviation over `n_iter` iterations between `steps` and the
/// rescaled parameters `(k ν_i, σ_i / √k, τ / √k)`.
///
/// Both runs start from zero, so any dual rescaling is trivially satisfied at
/// initialisation.
pub fn check_scale_invariance(problem: &ProblemSpec, steps: &StepParams, rho: f64, k_scale: f64, n_iter: usize) -> Result<f64, SolveError> {
    let s = libm::sqrt(k_scale);
    compare_rescaled(problem, steps, rho, k_scale, 1.0 / s, 1.0 / s, n_iter)
}

/// As [`check_scale_invariance`] but with `(k ν_i, σ_i / k², τ)`, the
/// rescaling that maps the iteration onto itself with duals scaled by `1/k`.
pub fn check_scale_compensation(problem: &ProblemSpec, steps: &StepParams, rho: f64, k_scale: f64, n_iter: usize) -> Result<f64, SolveError> {
    compare_rescaled(problem, steps, rho, k_scale, 1.0 / (k_scale * k_scale), 1.0, n_iter)
}

fn compare_rescaled(
    problem: &ProblemSpec,
    steps: &StepParams,
    rho: f64,
    k_scale: f64,
    sigma_factor: f64,
    tau_factor: f64,
    n_iter: usize,
) -> Result<f64, SolveError> {
    if !(k_scale > 0.0 && k_scale.is_finite()) {
        return Err(SolveError::Config(alloc::format!("scale factor must be positive, got {k_scale}")));
    }
    let base = trajectory(problem, steps.clone(), rho, n_iter)?;
    if k_scale == 1.0 {
        return Ok(0.0);
    }
    let mut scaled = steps.clone();
    scaled.nu.iter_mut().for_each(|n| *n *= k_scale);
    scaled.sigma.iter_mut().for_each(|s| *s *= sigma_factor);
    scaled.tau *= tau_factor;
    let other = trajectory(problem, scaled, rho, n_iter)?;
    Ok(max_deviation(&base, &other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{stack, stack_with_norms, Dense, Identity, LinearOperator, OpRef};
    use alloc::sync::Arc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> PowerConfig {
        PowerConfig { tol: 1e-12, max_iter: 100_000, seed: 5 }
    }

    fn ident_blocks(n: usize, count: usize) -> BlockOperator {
        let blocks: Vec<OpRef> = (0..count).map(|_| Arc::new(Identity::new(n).unwrap()) as OpRef).collect();
        stack(blocks, vec![1.0; count], vec![1.0; count]).unwrap()
    }

    fn seeded_dense(rows: usize, cols: usize, seed: u64) -> Dense {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dense::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(StepConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(StepConfig { gamma: 0.5, ..Default::default() }.validate().is_err());
        assert!(StepConfig { rho: 2.0, ..Default::default() }.validate().is_err());
        assert!(StepConfig { beta: 50.0, gamma: 5.0, rho: 1.75 }.validate().is_ok());
    }

    #[test]
    fn single_block_collapses_to_scalar_rule() {
        let k = ident_blocks(5, 1);
        let p = derive_step_params(&k, &StepConfig { beta: 4.0, gamma: 1.0, rho: 1.0 }, &tight()).unwrap();
        assert!((p.w - 1.0).abs() < 1e-12);
        assert!((p.tau - 0.5).abs() < 1e-12);
        assert!((p.sigma[0] - 2.0).abs() < 1e-12);
        assert_eq!(p.nu[0], 1.0);
        assert!((p.sigma[0] * p.tau - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_identity_blocks() {
        let k = ident_blocks(4, 2);
        let p = derive_step_params(&k, &StepConfig { beta: 1.0, gamma: 1.0, rho: 1.0 }, &tight()).unwrap();
        let r = core::f64::consts::FRAC_1_SQRT_2;
        assert!((p.w - 0.5).abs() < 1e-12);
        assert!((p.tau - r).abs() < 1e-12);
        assert!(p.sigma.iter().all(|s| (s - r).abs() < 1e-12));
        assert!((p.nu[1] - 1.0).abs() < 1e-12);
        assert!((p.condition_value(&k, &tight()).unwrap() - 1.0).abs() < 1e-10);

        let p = derive_step_params(&k, &StepConfig { beta: 2.0, gamma: 3.0, rho: 1.0 }, &tight()).unwrap();
        let tau = (3.0f64 / 8.0).sqrt();
        assert!((p.w - 0.25).abs() < 1e-12);
        assert!((p.tau - tau).abs() < 1e-12);
        assert!(p.sigma.iter().all(|s| (s - 2.0 * tau).abs() < 1e-12));
        assert_eq!(p.nu[0], 1.0);
        assert!((p.nu[1] - (1.0f64 / 8.0).sqrt() / tau).abs() < 1e-12);
        // τ‖Σσν²I‖ evaluated directly
        let direct = p.tau * (p.sigma[0] * p.nu[0].powi(2) + p.sigma[1] * p.nu[1].powi(2));
        assert!((direct - 1.0).abs() < 1e-10);
        assert!((p.condition_value(&k, &tight()).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn weights_reproduce_relative_weights() {
        let blocks: Vec<OpRef> = vec![
            Arc::new(seeded_dense(6, 4, 1)),
            Arc::new(seeded_dense(3, 4, 2)),
            Arc::new(Identity::new(4).unwrap()),
        ];
        let k = stack_with_norms(blocks, vec![1.0; 3], &tight()).unwrap();
        let p = derive_step_params(&k, &StepConfig { beta: 7.0, gamma: 2.5, rho: 1.5 }, &tight()).unwrap();
        for (wi, wh) in p.weights().iter().zip(&p.w_hat) {
            assert!((wi - p.w * wh).abs() <= 1e-12 * p.w * wh);
        }
        assert!((p.condition_value(&k, &tight()).unwrap() - 1.0).abs() < 1e-9);
    }

    fn ls_problem(a: &Dense, g: &[f64]) -> ProblemSpec {
        let op: OpRef = Arc::new(a.clone());
        let k = stack_with_norms(vec![op], vec![1.0], &tight()).unwrap();
        let l = k.norms()[0];
        let center = g.iter().map(|v| v / l).collect();
        ProblemSpec::new(k, vec![DualTerm::DataBall(L2BallData { center, radius: 0.0 })], PrimalTerm::NonNegative).unwrap()
    }

    #[test]
    fn zero_data_stays_zero() {
        let a = seeded_dense(8, 4, 3);
        let p = ls_problem(&a, &[0.0; 8]);
        let steps = derive_step_params(&p.k, &StepConfig { beta: 1.0, gamma: 1.0, rho: 1.5 }, &tight()).unwrap();
        let mut s = IterateState::zeros(&p);
        for _ in 0..50 {
            pdhg_iterate(&p, &steps, 1.5, &mut s).unwrap();
            assert!(s.x.iter().all(|v| *v == 0.0));
        }
        assert_eq!(s.k, 50);
    }

    /// Projected gradient on ½‖Af - g‖² with f >= 0.
    fn projected_gradient(a: &Dense, g: &[f64], iters: usize) -> Vec<f64> {
        let l2 = {
            let m = nalgebra::DMatrix::from_row_slice(8, 4, a.data());
            let s = (m.transpose() * &m).symmetric_eigenvalues();
            s.iter().cloned().fold(0.0, f64::max)
        };
        let step = 1.0 / l2;
        let mut f = vec![0.0; 4];
        let mut r = vec![0.0; 8];
        let mut grad = vec![0.0; 4];
        for _ in 0..iters {
            a.apply_into(&f, &mut r);
            r.iter_mut().zip(g).for_each(|(ri, gi)| *ri -= gi);
            a.adjoint_into(&r, &mut grad);
            f.iter_mut().zip(&grad).for_each(|(fi, gi)| *fi = (*fi - step * gi).max(0.0));
        }
        f
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let a = seeded_dense(8, 4, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let g: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
        let oracle = projected_gradient(&a, &g, 1_000_000);
        let p = ls_problem(&a, &g);
        for rho in [1.0, 1.75] {
            let opts = SolveOptions { n_iter: 200_000, log_every: 1000, power: tight(), ..Default::default() };
            let out = solve(&p, &StepConfig { beta: 1.0, gamma: 1.0, rho }, &opts, None, &mut NullClock).unwrap();
            for (x, o) in out.state.x.iter().zip(&oracle) {
                assert!((x - o).abs() < 1e-6, "rho {rho}: {x} vs {o}");
            }
        }
    }

    #[test]
    fn unit_rho_matches_plain_iteration_bitwise() {
        let a = seeded_dense(8, 4, 11);
        let g: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let p = ls_problem(&a, &g);
        let steps = derive_step_params(&p.k, &StepConfig { beta: 3.0, gamma: 1.0, rho: 1.0 }, &tight()).unwrap();
        let l = p.k.norms()[0];
        let center = p.data().center.clone();
        let (tau, sigma) = (steps.tau, steps.sigma[0]);

        let mut x = vec![0.0; 4];
        let mut lam = vec![0.0; 8];
        let mut s = IterateState::zeros(&p);
        let mut engine = Pdhg::new(&p, steps.clone(), 1.0).unwrap();
        let mut kt = vec![0.0; 4];
        let mut kx = vec![0.0; 8];
        for _ in 0..100 {
            a.adjoint_into(&lam, &mut kt);
            let xh: Vec<f64> = x.iter().zip(&kt).map(|(xi, ki)| (xi - tau * (0.0 + (1.0 / l) * ki)).max(0.0)).collect();
            let xt: Vec<f64> = xh.iter().zip(&x).map(|(h, xi)| 2.0 * h - xi).collect();
            a.apply_into(&xt, &mut kx);
            kx.iter_mut().for_each(|v| *v *= 1.0 / l);
            lam = lam.iter().zip(&kx).zip(&center).map(|((li, ki), gi)| li + sigma * (ki - gi)).collect();
            x = xh;
            engine.step(&mut s).unwrap();
            assert_eq!(s.x, x);
            assert_eq!(s.lambda[0], lam);
        }
    }

    #[test]
    fn iterates_stay_nonnegative_and_log_is_deterministic() {
        let a = seeded_dense(8, 4, 9);
        let g: Vec<f64> = (0..8).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let p = ls_problem(&a, &g);
        let steps = derive_step_params(&p.k, &StepConfig { beta: 10.0, gamma: 1.0, rho: 1.0 }, &tight()).unwrap();
        let mut s = IterateState::zeros(&p);
        for _ in 0..200 {
            pdhg_iterate(&p, &steps, 1.0, &mut s).unwrap();
            assert!(s.x.iter().all(|v| *v >= 0.0));
        }
        // With over-relaxation only the projected point is guaranteed feasible.
        let mut e = Pdhg::new(&p, steps.clone(), 1.9).unwrap();
        let mut s = IterateState::zeros(&p);
        let mut saw_negative = false;
        for _ in 0..200 {
            e.step(&mut s).unwrap();
            assert!(e.x_hat.iter().all(|v| *v >= 0.0) || e.x_hat.is_empty());
            saw_negative |= s.x.iter().any(|v| *v < 0.0);
        }
        assert!(saw_negative);
        let opts = SolveOptions { n_iter: 300, log_every: 7, ..Default::default() };
        let cfg = StepConfig { beta: 2.0, gamma: 1.0, rho: 1.5 };
        let a1 = solve(&p, &cfg, &opts, Some(&[0.0; 4]), &mut NullClock).unwrap();
        let a2 = solve(&p, &cfg, &opts, Some(&[0.0; 4]), &mut NullClock).unwrap();
        assert_eq!(a1.log, a2.log);
        assert_eq!(a1.log.samples.len(), 300 / 7 + 1);
        assert_eq!(a1.log.last().unwrap().iter, 300);
    }

    #[test]
    fn zero_iterations_rejected() {
        let p = ls_problem(&seeded_dense(8, 4, 1), &[0.0; 8]);
        let opts = SolveOptions { n_iter: 0, ..Default::default() };
        assert!(matches!(solve(&p, &StepConfig::default(), &opts, None, &mut NullClock), Err(SolveError::Config(_))));
    }

    #[test]
    fn divergence_names_the_block() {
        let p = ls_problem(&seeded_dense(8, 4, 1), &[1.0; 8]);
        let mut steps = derive_step_params(&p.k, &StepConfig::default(), &tight()).unwrap();
        steps.tau = 1e200;
        steps.sigma[0] = 1e200;
        let opts = SolveOptions { n_iter: 50, log_every: 1, ..Default::default() };
        match solve_with_steps(&p, steps, 1.0, &opts, None, &mut NullClock) {
            Err(SolveError::Diverged { location, log, .. }) => {
                assert!(matches!(location, IterateLocation::Primal | IterateLocation::Dual(0)));
                assert!(log.samples.iter().all(|s| s.iter >= 1));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn target_stops_early() {
        let a = seeded_dense(8, 4, 21);
        let f: Vec<f64> = vec![0.5, 1.0, 0.2, 0.8];
        let g = a.apply(&f).unwrap();
        let p = ls_problem(&a, &g);
        let opts = SolveOptions { n_iter: 100_000, log_every: 10, data_rmse_target: Some(1e-6), ..Default::default() };
        let out = solve(&p, &StepConfig { beta: 1.0, gamma: 1.0, rho: 1.75 }, &opts, None, &mut NullClock).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.data_rmse <= 1e-6);
        assert!(last.iter < 100_000);
        assert_eq!(out.log.first_below(1e-6), Some(last.iter));
    }

    fn toy_dtv() -> ProblemSpec {
        let a = seeded_dense(12, 8, 77);
        let f: Vec<f64> = (0..8).map(|i| if (2..6).contains(&i) { 1.0 } else { 0.2 }).collect();
        let g = a.apply(&f).unwrap();
        let mut dx = vec![0.0; 64];
        for i in 0..7 {
            dx[i * 8 + i] = -1.0;
            dx[i * 8 + i + 1] = 1.0;
        }
        let blocks: Vec<OpRef> = vec![
            Arc::new(a),
            Arc::new(Dense::new(8, 8, dx).unwrap()),
            Arc::new(Identity::new(8).unwrap()),
        ];
        let k = stack_with_norms(blocks, vec![1.0; 3], &tight()).unwrap();
        let l = k.norms()[0];
        let center = g.iter().map(|v| v / l).collect();
        ProblemSpec::new(
            k,
            vec![
                DualTerm::DataBall(L2BallData { center, radius: 0.05 }),
                DualTerm::LinfClip { weight: 0.5 },
                DualTerm::LinfClip { weight: 0.5 },
            ],
            PrimalTerm::NonNegative,
        )
        .unwrap()
    }

    #[test]
    fn unit_scale_has_zero_deviation() {
        let p = toy_dtv();
        let steps = derive_step_params(&p.k, &StepConfig { beta: 5.0, gamma: 2.0, rho: 1.5 }, &tight()).unwrap();
        assert_eq!(check_scale_invariance(&p, &steps, 1.5, 1.0, 50).unwrap(), 0.0);
        assert_eq!(check_scale_compensation(&p, &steps, 1.5, 1.0, 50).unwrap(), 0.0);
    }

    #[test]
    fn exact_compensation_preserves_primal_trajectory() {
        let p = toy_dtv();
        let steps = derive_step_params(&p.k, &StepConfig { beta: 5.0, gamma: 2.0, rho: 1.5 }, &tight()).unwrap();
        for k in [4.0, 0.25] {
            let dev = check_scale_compensation(&p, &steps, 1.5, k, 50).unwrap();
            assert!(dev <= 1e-12, "k = {k}: {dev}");
        }
    }

    #[test]
    fn root_k_rescaling_changes_the_trajectory() {
        // τσν² grows by k under (kν, σ/√k, τ/√k), so the iterates differ.
        let p = toy_dtv();
        let steps = derive_step_params(&p.k, &StepConfig { beta: 5.0, gamma: 2.0, rho: 1.5 }, &tight()).unwrap();
        let dev = check_scale_invariance(&p, &steps, 1.5, 4.0, 50).unwrap();
        assert!(dev > 1e-3, "{dev}");
    }

    #[test]
    fn clip_bounds_divide_by_scaling() {
        let p = toy_dtv();
        let steps = derive_step_params(&p.k, &StepConfig { beta: 5.0, gamma: 2.0, rho: 1.0 }, &tight()).unwrap();
        let e = Pdhg::new(&p, steps.clone(), 1.0).unwrap();
        for i in 1..3 {
            assert!((e.bounds()[i] * steps.nu[i] / p.k.norms()[i] - 0.5).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn derived_steps_satisfy_condition(
            norms in prop::collection::vec(0.1..20.0f64, 1..5),
            beta in 0.01..1000.0f64,
            gamma in 1.0..10.0f64,
        ) {
            let nb = norms.len();
            let blocks: Vec<OpRef> = (0..nb).map(|i| {
                let d: Vec<f64> = (0..6).map(|j| norms[i] * (1.0 + ((i + j) % 3) as f64) / 3.0).collect();
                Arc::new(crate::linop::Diagonal::new(d).unwrap()) as OpRef
            }).collect();
            let k = stack_with_norms(blocks, vec![1.0; nb], &tight()).unwrap();
            let p = derive_step_params(&k, &StepConfig { beta, gamma, rho: 1.0 }, &tight()).unwrap();
            prop_assert_eq!(p.nu[0], 1.0);
            for s in &p.sigma {
                prop_assert!((s - beta * p.tau).abs() <= 1e-12 * s);
            }
            prop_assert!((p.condition_value(&k, &tight()).unwrap() - 1.0).abs() < 1e-8);
        }
    }
}
