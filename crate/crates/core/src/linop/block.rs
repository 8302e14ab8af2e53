use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{assert_io, op_norm, LinearOperator, OpRef, OperatorError, OperatorShape, PowerConfig};
use crate::vecops;

/// Vertically stacked operators sharing one domain.
///
/// Block `i` acts as `nu_i * K_i / L_i` where `L_i = ‖K_i‖₂` is cached at
/// construction. Block `i` occupies a contiguous range of the stacked
/// codomain, in list order.
#[derive(Clone)]
pub struct BlockOperator {
    blocks: Vec<OpRef>,
    norms: Vec<f64>,
    scalings: Vec<f64>,
    offsets: Vec<usize>,
    domain_len: usize,
}

impl core::fmt::Debug for BlockOperator {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("BlockOperator")
            .field("shapes", &self.blocks.iter().map(|b| b.shape()).collect::<Vec<_>>())
            .field("norms", &self.norms)
            .field("scalings", &self.scalings)
            .finish()
    }
}

/// Stacks `blocks` with precomputed norms and scalings.
pub fn stack(blocks: Vec<OpRef>, norms: Vec<f64>, scalings: Vec<f64>) -> Result<BlockOperator, OperatorError> {
    let Some(first) = blocks.first() else {
        return Err(OperatorError::InvalidParameter("cannot stack zero blocks".into()));
    };
    if norms.len() != blocks.len() || scalings.len() != blocks.len() {
        return Err(OperatorError::InvalidParameter(alloc::format!(
            "{} blocks but {} norms and {} scalings",
            blocks.len(),
            norms.len(),
            scalings.len()
        )));
    }
    let domain_len = first.shape().domain_len;
    let mut offsets = Vec::with_capacity(blocks.len() + 1);
    offsets.push(0);
    for (i, b) in blocks.iter().enumerate() {
        let s = b.shape();
        if s.domain_len != domain_len {
            return Err(OperatorError::ShapeMismatch(alloc::format!(
                "block {i} has domain {} but block 0 has domain {domain_len}",
                s.domain_len
            )));
        }
        if !(norms[i] > 0.0 && norms[i].is_finite()) {
            return Err(OperatorError::InvalidParameter(alloc::format!(
                "block {i} norm must be positive and finite, got {}",
                norms[i]
            )));
        }
        offsets.push(offsets[i] + s.codomain_len);
    }
    Ok(BlockOperator { blocks, norms, scalings, offsets, domain_len })
}

/// Stacks `blocks`, estimating each `‖K_i‖₂` with the power method.
pub fn stack_with_norms(blocks: Vec<OpRef>, scalings: Vec<f64>, cfg: &PowerConfig) -> Result<BlockOperator, OperatorError> {
    let norms = blocks
        .iter()
        .map(|b| op_norm(b.as_ref(), cfg))
        .collect::<Result<Vec<_>, _>>()?;
    stack(blocks, norms, scalings)
}

impl BlockOperator {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn domain_len(&self) -> usize {
        self.domain_len
    }

    pub fn block(&self, i: usize) -> &OpRef {
        &self.blocks[i]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn scalings(&self) -> &[f64] {
        &self.scalings
    }

    pub fn set_scalings(&mut self, scalings: &[f64]) -> Result<(), OperatorError> {
        super::check_len(self.blocks.len(), scalings.len())?;
        self.scalings.copy_from_slice(scalings);
        Ok(())
    }

    /// Re-estimates every cached block norm.
    pub fn recompute_norms(&mut self, cfg: &PowerConfig) -> Result<(), OperatorError> {
        for (n, b) in self.norms.iter_mut().zip(&self.blocks) {
            *n = op_norm(b.as_ref(), cfg)?;
        }
        Ok(())
    }

    /// Codomain range of block `i` in the stacked vector.
    pub fn block_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn block_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// `K̂_i x = K_i x / L_i` (no scaling factor).
    pub fn apply_normalized(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.blocks[i].apply_into(x, out);
        vecops::scale(out, 1.0 / self.norms[i]);
    }

    /// `K̂_iᵀ y = K_iᵀ y / L_i`.
    pub fn adjoint_normalized(&self, i: usize, y: &[f64], out: &mut [f64]) {
        self.blocks[i].adjoint_into(y, out);
        vecops::scale(out, 1.0 / self.norms[i]);
    }

    /// `out = Σ_i c_i K̂_iᵀ y_i` for per-block coefficients `c`.
    pub fn weighted_adjoint(&self, coeffs: &[f64], duals: &[Vec<f64>], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        for (i, (c, y)) in coeffs.iter().zip(duals).enumerate() {
            self.blocks[i].adjoint_into(y, scratch);
            vecops::axpy(out, c / self.norms[i], scratch);
        }
    }
}

impl LinearOperator for BlockOperator {
    fn shape(&self) -> OperatorShape {
        OperatorShape { domain_len: self.domain_len, codomain_len: *self.offsets.last().unwrap() }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_io(self.shape(), x, y);
        for i in 0..self.blocks.len() {
            let out = &mut y[self.offsets[i]..self.offsets[i + 1]];
            self.blocks[i].apply_into(x, out);
            vecops::scale(out, self.scalings[i] / self.norms[i]);
        }
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        assert_io(self.shape(), x, y);
        let mut tmp = vec![0.0; self.domain_len];
        x.fill(0.0);
        for i in 0..self.blocks.len() {
            self.blocks[i].adjoint_into(&y[self.block_range(i)], &mut tmp);
            vecops::axpy(x, self.scalings[i] / self.norms[i], &tmp);
        }
    }
}
