//! Matrix-free linear operators.
//!
//! Every operator maps a domain vector of length `domain_len` to a codomain
//! vector of length `codomain_len` and provides the exact algebraic transpose
//! of its own discretisation. Operators are immutable once built and are
//! shared through [`OpRef`].

mod block;
mod norm;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vecops;

pub use block::{stack, stack_with_norms, BlockOperator};
pub use norm::{op_norm, psd_top_eigenvalue, PowerConfig, PowerEstimate};

/// Shared handle to an immutable operator.
pub type OpRef = Arc<dyn LinearOperator>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OperatorError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operator shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("power method did not converge after {iterations} iterations (last estimate {estimate})")]
    NoConvergence { estimate: f64, iterations: usize },
    #[error("invalid operator parameter: {0}")]
    InvalidParameter(String),
}

/// Domain and codomain sizes of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OperatorShape {
    pub domain_len: usize,
    pub codomain_len: usize,
}

impl OperatorShape {
    pub fn new(domain_len: usize, codomain_len: usize) -> Result<Self, OperatorError> {
        if domain_len == 0 || codomain_len == 0 {
            return Err(OperatorError::InvalidParameter(alloc::format!(
                "operator dimensions must be positive, got {domain_len} -> {codomain_len}"
            )));
        }
        Ok(Self { domain_len, codomain_len })
    }

    /// Shape of the adjoint.
    pub fn transpose(self) -> Self {
        Self { domain_len: self.codomain_len, codomain_len: self.domain_len }
    }
}

/// A real linear map `K` with its transpose `K^T`.
///
/// `apply_into` and `adjoint_into` overwrite their output buffer and panic on
/// length mismatch; the checked [`apply`](LinearOperator::apply) and
/// [`adjoint`](LinearOperator::adjoint) wrappers report it as an error.
pub trait LinearOperator: Send + Sync {
    fn shape(&self) -> OperatorShape;

    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, OperatorError> {
        let s = self.shape();
        check_len(s.domain_len, x.len())?;
        let mut y = vec![0.0; s.codomain_len];
        self.apply_into(x, &mut y);
        Ok(y)
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>, OperatorError> {
        let s = self.shape();
        check_len(s.codomain_len, y.len())?;
        let mut x = vec![0.0; s.domain_len];
        self.adjoint_into(y, &mut x);
        Ok(x)
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<(), OperatorError> {
    if expected == got {
        Ok(())
    } else {
        Err(OperatorError::DimensionMismatch { expected, got })
    }
}

#[inline]
pub(crate) fn assert_io(shape: OperatorShape, x: &[f64], y: &[f64]) {
    assert_eq!(x.len(), shape.domain_len, "operator input length");
    assert_eq!(y.len(), shape.codomain_len, "operator output length");
}

/// The identity on `R^n`.
#[derive(Debug, Clone)]
pub struct Identity {
    n: usize,
}

impl Identity {
    pub fn new(n: usize) -> Result<Self, OperatorError> {
        OperatorShape::new(n, n)?;
        Ok(Self { n })
    }
}

impl LinearOperator for Identity {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.n, codomain_len: self.n }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        y.copy_from_slice(x);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        x.copy_from_slice(y);
    }
}

/// `factor * K`.
pub struct Scaled {
    op: OpRef,
    factor: f64,
}

impl LinearOperator for Scaled {
    fn shape(&self) -> OperatorShape {
        self.op.shape()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply_into(x, y);
        vecops::scale(y, self.factor);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.op.adjoint_into(y, x);
        vecops::scale(x, self.factor);
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, OperatorError> {
        OperatorShape::new(cols, rows)?;
        check_len(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, OperatorError> {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            check_len(ncols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), ncols, data)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl LinearOperator for Dense {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.cols, codomain_len: self.rows }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi = vecops::dot(row, x);
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        x.fill(0.0);
        for (yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            vecops::axpy(x, *yi, row);
        }
    }
}

/// Diagonal matrix.
#[derive(Debug, Clone)]
pub struct Diagonal {
    diag: Vec<f64>,
}

impl Diagonal {
    pub fn new(diag: Vec<f64>) -> Result<Self, OperatorError> {
        OperatorShape::new(diag.len(), diag.len())?;
        Ok(Self { diag })
    }
}

impl LinearOperator for Diagonal {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.diag.len(), codomain_len: self.diag.len() }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.diag) {
            *yi = d * xi;
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.apply_into(y, x);
    }
}

/// `outer ∘ inner`.
pub struct Composed {
    outer: OpRef,
    inner: OpRef,
}

impl LinearOperator for Composed {
    fn shape(&self) -> OperatorShape {
        OperatorShape {
            domain_len: self.inner.shape().domain_len,
            codomain_len: self.outer.shape().codomain_len,
        }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let mut mid = vec![0.0; self.inner.shape().codomain_len];
        self.inner.apply_into(x, &mut mid);
        self.outer.apply_into(&mid, y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let mut mid = vec![0.0; self.inner.shape().codomain_len];
        self.outer.adjoint_into(y, &mut mid);
        self.inner.adjoint_into(&mid, x);
    }
}

/// `Σ c_k K_k` over operators of identical shape.
///
/// The output is accumulated term by term in list order, so
/// `c0*K0 x + c1*K1 x` is reproduced bit for bit.
pub struct LinearCombination {
    terms: Vec<(f64, OpRef)>,
    shape: OperatorShape,
}

impl LinearCombination {
    pub fn new(terms: Vec<(f64, OpRef)>) -> Result<Self, OperatorError> {
        let shape = terms
            .first()
            .map(|(_, op)| op.shape())
            .ok_or_else(|| OperatorError::InvalidParameter("empty linear combination".into()))?;
        for (_, op) in &terms {
            if op.shape() != shape {
                return Err(OperatorError::ShapeMismatch(alloc::format!(
                    "combination terms must share a shape: {:?} vs {:?}",
                    shape,
                    op.shape()
                )));
            }
        }
        Ok(Self { terms, shape })
    }
}

impl LinearOperator for LinearCombination {
    fn shape(&self) -> OperatorShape {
        self.shape
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape, x, y);
        let mut tmp = vec![0.0; y.len()];
        let (c0, op0) = &self.terms[0];
        op0.apply_into(x, y);
        vecops::scale(y, *c0);
        for (c, op) in &self.terms[1..] {
            op.apply_into(x, &mut tmp);
            vecops::axpy(y, *c, &tmp);
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape, x, y);
        let mut tmp = vec![0.0; x.len()];
        let (c0, op0) = &self.terms[0];
        op0.adjoint_into(y, x);
        vecops::scale(x, *c0);
        for (c, op) in &self.terms[1..] {
            op.adjoint_into(y, &mut tmp);
            vecops::axpy(x, *c, &tmp);
        }
    }
}

pub fn identity(n: usize) -> Result<OpRef, OperatorError> {
    Ok(Arc::new(Identity::new(n)?))
}

pub fn scale(op: OpRef, factor: f64) -> OpRef {
    Arc::new(Scaled { op, factor })
}

/// `outer ∘ inner`; fails unless `inner`'s codomain is `outer`'s domain.
pub fn compose(outer: OpRef, inner: OpRef) -> Result<OpRef, OperatorError> {
    let (o, i) = (outer.shape(), inner.shape());
    if o.domain_len != i.codomain_len {
        return Err(OperatorError::ShapeMismatch(alloc::format!(
            "cannot compose: inner codomain {} != outer domain {}",
            i.codomain_len,
            o.domain_len
        )));
    }
    Ok(Arc::new(Composed { outer, inner }))
}

/// Writes the operator out as a row-major `codomain_len x domain_len` matrix,
/// one column per basis vector.
pub fn materialize(op: &dyn LinearOperator) -> Vec<f64> {
    let s = op.shape();
    let (m, n) = (s.codomain_len, s.domain_len);
    let mut out = vec![0.0; m * n];
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        op.apply_into(&e, &mut col);
        e[j] = 0.0;
        for (i, v) in col.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    out
}

/// Relative adjoint mismatch for one `(x, y)` pair:
/// `|<Kx,y> - <x,K^T y>| / (|Kx||y| + |x||K^T y|)`.
pub fn adjoint_mismatch(op: &dyn LinearOperator, x: &[f64], y: &[f64]) -> f64 {
    let kx = op.apply(x).expect("x has the domain length");
    let kty = op.adjoint(y).expect("y has the codomain length");
    let lhs = vecops::dot(&kx, y);
    let rhs = vecops::dot(x, &kty);
    let scale = vecops::norm2(&kx) * vecops::norm2(y) + vecops::norm2(x) * vecops::norm2(&kty);
    if scale == 0.0 {
        libm::fabs(lhs - rhs)
    } else {
        libm::fabs(lhs - rhs) / scale
    }
}

/// Worst [`adjoint_mismatch`] over `pairs` seeded standard-uniform pairs.
pub fn adjoint_test(op: &dyn LinearOperator, pairs: usize, seed: u64) -> f64 {
    let s = op.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..s.domain_len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..s.codomain_len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        worst = worst.max(adjoint_mismatch(op, &x, &y));
    }
    worst
}
