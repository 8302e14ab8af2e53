//! Closed-form proximal maps for the primal and dual updates.
//!
//! All maps act in place on arguments that the solver has already formed
//! (e.g. `λ + σ ν K̂ x̃ - σ ν g′` for the data ball); they carry no state.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::vecops;

/// Center `g′` and radius `ε′` of the data-fidelity ball `‖y - g′‖₂ <= ε′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2BallData {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Projection onto the non-negative orthant: `max(x, 0)` componentwise.
pub fn prox_nonneg(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Resolvent of `σ F*` for `F*(λ) = ε′ ‖λ‖₂`:
/// `max(‖v‖₂ - σ ε′, 0) · v / ‖v‖₂`, with the zero vector mapped to zero.
pub fn prox_l2ball_conj(v: &mut [f64], sigma: f64, radius: f64) {
    let shrink = sigma * radius;
    if shrink == 0.0 {
        return;
    }
    let n = vecops::norm2(v);
    if n <= shrink {
        v.fill(0.0);
    } else {
        vecops::scale(v, (n - shrink) / n);
    }
}

/// Projection onto the box `‖v‖_∞ <= bound`, i.e.
/// `bound · v / max(bound, |v|)` componentwise.
pub fn prox_linf_clip(v: &mut [f64], bound: f64) {
    for x in v.iter_mut() {
        if libm::fabs(*x) > bound {
            *x = libm::copysign(bound, *x);
        }
    }
}

/// Proximal map under test by [`resolvent_identity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProxKind {
    NonNeg,
    LinfClip { bound: f64 },
    L2BallConj { sigma: f64, radius: f64 },
}

impl ProxKind {
    pub fn apply(&self, v: &mut [f64]) {
        match *self {
            ProxKind::NonNeg => prox_nonneg(v),
            ProxKind::LinfClip { bound } => prox_linf_clip(v, bound),
            ProxKind::L2BallConj { sigma, radius } => prox_l2ball_conj(v, sigma, radius),
        }
    }

    /// Maps an arbitrary vector into the set the projection targets, without
    /// using the proximal map itself.
    fn project(&self, c: &mut [f64]) {
        match *self {
            ProxKind::NonNeg => c.iter_mut().for_each(|x| *x = libm::fabs(*x)),
            ProxKind::LinfClip { bound } => {
                let m = c.iter().fold(0.0_f64, |m, x| m.max(libm::fabs(*x)));
                if m > bound {
                    vecops::scale(c, if m == 0.0 { 0.0 } else { bound / m });
                }
            }
            ProxKind::L2BallConj { sigma, radius } => {
                let r = sigma * radius;
                let n = vecops::norm2(c);
                if n > r {
                    vecops::scale(c, if n == 0.0 { 0.0 } else { r / n });
                }
            }
        }
    }
}

/// One failed variational inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub point: usize,
    pub test_point: usize,
    pub inner_product: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResolventReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ResolventReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the projection inequality `⟨v - P(v), q - P(v)⟩ <= 0` for every
/// point `v` and every test vector `q` mapped into the target set.
///
/// For the two projections `P` is the map itself. For the `ℓ2`-ball
/// conjugate resolvent, Moreau's identity gives `P(v) = v - prox(v)`, the
/// projection onto the ball of radius `σ ε′`.
pub fn resolvent_identity_check(kind: ProxKind, points: &[Vec<f64>], test_points: &[Vec<f64>]) -> ResolventReport {
    let mut report = ResolventReport::default();
    for (i, v) in points.iter().enumerate() {
        let mut p = v.clone();
        kind.apply(&mut p);
        let proj: Vec<f64> = match kind {
            ProxKind::L2BallConj { .. } => v.iter().zip(&p).map(|(a, b)| a - b).collect(),
            _ => p,
        };
        let resid: Vec<f64> = v.iter().zip(&proj).map(|(a, b)| a - b).collect();
        for (j, q) in test_points.iter().enumerate() {
            let mut q = q.clone();
            kind.project(&mut q);
            let diff: Vec<f64> = q.iter().zip(&proj).map(|(a, b)| a - b).collect();
            let ip = vecops::dot(&resid, &diff);
            let tol = 1e-12 * (1.0 + vecops::norm2(&resid) * vecops::norm2(&diff));
            report.checked += 1;
            if ip > tol {
                report.violations.push(Violation { point: i, test_point: j, inner_product: ip });
            }
        }
    }
    report
}
