//! Power-method estimation of spectral norms.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use super::{LinearOperator, OperatorError};
use crate::vecops;

/// Power-method settings. Convergence is declared once two successive
/// estimates differ by less than `tol * estimate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 5000, seed: 0 }
    }
}

/// Result of a power iteration on a symmetric positive semidefinite operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerEstimate {
    /// Largest eigenvalue estimate.
    pub value: f64,
    pub iterations: usize,
    /// Rayleigh quotient after every iteration; nondecreasing up to rounding.
    pub history: Vec<f64>,
}

/// Largest eigenvalue of the symmetric positive semidefinite map `apply`
/// acting on `R^n`, from a seeded pseudorandom start.
pub fn psd_top_eigenvalue<F>(n: usize, apply: F, cfg: &PowerConfig) -> Result<PowerEstimate, OperatorError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    power_iterate(n, apply, cfg, |rq| rq)
}

/// `‖K‖₂` by power iteration on `KᵀK`.
pub fn op_norm(op: &dyn LinearOperator, cfg: &PowerConfig) -> Result<f64, OperatorError> {
    let s = op.shape();
    let mut mid = vec![0.0; s.codomain_len];
    let est = power_iterate(
        s.domain_len,
        |v, out| {
            op.apply_into(v, &mut mid);
            op.adjoint_into(&mid, out);
        },
        cfg,
        |rq| libm::sqrt(rq.max(0.0)),
    )?;
    Ok(libm::sqrt(est.value.max(0.0)))
}

fn power_iterate<F, T>(n: usize, mut apply: F, cfg: &PowerConfig, monitored: T) -> Result<PowerEstimate, OperatorError>
where
    F: FnMut(&[f64], &mut [f64]),
    T: Fn(f64) -> f64,
{
    if !(cfg.tol > 0.0) {
        return Err(OperatorError::InvalidParameter(alloc::format!(
            "power-method tolerance must be positive, got {}",
            cfg.tol
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let nv = vecops::norm2(&v);
    vecops::scale(&mut v, 1.0 / nv);

    let mut av = vec![0.0; n];
    let mut history = Vec::new();
    let mut prev = f64::NAN;
    for it in 1..=cfg.max_iter {
        apply(&v, &mut av);
        let rq = vecops::dot(&v, &av);
        history.push(rq);
        let nrm = vecops::norm2(&av);
        if nrm == 0.0 {
            return Ok(PowerEstimate { value: 0.0, iterations: it, history });
        }
        let est = monitored(rq);
        if it > 1 && libm::fabs(est - prev) < cfg.tol * est {
            return Ok(PowerEstimate { value: rq, iterations: it, history });
        }
        prev = est;
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = ai / nrm;
        }
    }
    Err(OperatorError::NoConvergence { estimate: history.last().copied().unwrap_or(0.0), iterations: cfg.max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{Diagonal, Identity};

    #[test]
    fn identity_has_unit_norm() {
        let id = Identity::new(7).unwrap();
        let n = op_norm(&id, &PowerConfig::default()).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_norm_is_largest_entry() {
        let d = Diagonal::new(vec![1.0, 2.0, 5.0]).unwrap();
        let cfg = PowerConfig { tol: 1e-12, ..Default::default() };
        let n = op_norm(&d, &cfg).unwrap();
        assert!((n - 5.0).abs() < 1e-9, "{n}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let d = Diagonal::new(vec![1.0, 3.0, 2.9, 0.1]).unwrap();
        let cfg = PowerConfig { tol: 1e-3, seed: 17, ..Default::default() };
        assert_eq!(op_norm(&d, &cfg).unwrap().to_bits(), op_norm(&d, &cfg).unwrap().to_bits());
    }

    #[test]
    fn non_convergence_reports_last_estimate() {
        let d = Diagonal::new(vec![1.0, 0.999, 0.998, 0.5]).unwrap();
        let cfg = PowerConfig { tol: 1e-15, max_iter: 3, seed: 1 };
        match op_norm(&d, &cfg) {
            Err(OperatorError::NoConvergence { estimate, iterations }) => {
                assert_eq!(iterations, 3);
                assert!(estimate > 0.5 && estimate <= 1.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn rayleigh_quotients_are_monotone() {
        let diag: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64) * 0.37 % 3.1).collect();
        let d = Diagonal::new(diag).unwrap();
        let est = psd_top_eigenvalue(50, |v, o| d.apply_into(v, o), &PowerConfig { tol: 1e-14, max_iter: 10_000, seed: 4 })
            .unwrap();
        for w in est.history.windows(2) {
            assert!(w[1] >= w[0] * (1.0 - 1e-14), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rejects_bad_tolerance() {
        let id = Identity::new(2).unwrap();
        assert!(op_norm(&id, &PowerConfig { tol: 0.0, ..Default::default() }).is_err());
    }
}
