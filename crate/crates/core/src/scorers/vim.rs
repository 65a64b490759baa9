//! Virtual-logit matching.
//!
//! Features are re-centred at the point `o` the head maps closest to zero
//! logits. The principal subspace of the centred training features is kept;
//! the norm of what falls outside it, scaled by `alpha`, acts as an extra
//! "OOD" logit. The score is `logsumexp(z) - alpha * r(h)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{row_logits, ScorerConfig};
use crate::error::{OodError, Result};
use crate::numeric::{logsumexp, max};
use crate::pack::{ClassifierHead, FeaturePack};

const PINV_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct VimState {
    pub principal_dim: usize,
    pub offset: Vec<f64>,
    /// D x (D - D') orthonormal basis of the residual space.
    pub residual: DMatrix<f64>,
    pub alpha: f64,
}

/// Minimum-norm least-squares `o` in feature space with `W o + b ~ 0`,
/// i.e. `o = -pinv(W) b`.
pub(crate) fn head_offset(head: &ClassifierHead) -> Result<Vec<f64>> {
    let (c, d) = (head.n_classes(), head.dim());
    let w = DMatrix::from_fn(c, d, |k, j| f64::from(head.weight().get(k, j)));
    let b = DVector::from_iterator(c, head.bias().iter().map(|&v| f64::from(v)));
    let pinv = w
        .svd(true, true)
        .pseudo_inverse(PINV_EPS)
        .map_err(|e| OodError::Degenerate(format!("pseudo-inverse failed: {e}")))?;
    Ok((-(pinv * b)).iter().copied().collect())
}

pub(super) fn fit(config: &ScorerConfig, train: &FeaturePack, head: &ClassifierHead) -> Result<VimState> {
    let d = head.dim();
    let principal_dim = config.vim_dim.unwrap_or(d / 2);
    if principal_dim == 0 || principal_dim >= d {
        return Err(OodError::Config(format!(
            "ViM principal dimension must be in [1, {d}), got {principal_dim}"
        )));
    }
    let offset = head_offset(head)?;
    let n = train.n_rows();

    // Second moment of the centred features around the offset.
    let centred = DMatrix::from_fn(n, d, |i, j| f64::from(train.features().get(i, j)) - offset[j]);
    let cov = centred.tr_mul(&centred) / n as f64;

    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .total_cmp(&eigen.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let residual_cols: Vec<usize> = order[principal_dim..].to_vec();
    let residual = DMatrix::from_fn(d, residual_cols.len(), |r, c| {
        eigen.eigenvectors[(r, residual_cols[c])]
    });

    let mut state = VimState {
        principal_dim,
        offset,
        residual,
        alpha: 1.0,
    };
    let mut sum_max_logit = 0.0;
    let mut sum_residual = 0.0;
    for i in 0..n {
        let h = train.features().row_f64(i);
        sum_max_logit += max(&row_logits(train, head, i, &h));
        sum_residual += state.residual_norm(&h);
    }
    if sum_residual <= 0.0 {
        return Err(OodError::Degenerate(
            "training features have no residual component".into(),
        ));
    }
    let alpha = sum_max_logit / sum_residual;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(OodError::Degenerate(format!(
            "ViM scale alpha={alpha} is not positive (mean max-logit must be > 0)"
        )));
    }
    state.alpha = alpha;
    Ok(state)
}

impl VimState {
    /// `||R^T (h - o)||_2`.
    pub fn residual_norm(&self, h: &[f64]) -> f64 {
        let x = DVector::from_iterator(h.len(), h.iter().zip(&self.offset).map(|(a, o)| a - o));
        (self.residual.tr_mul(&x)).norm()
    }

    pub(super) fn score(&self, h: &[f64], z: &[f64]) -> f64 {
        logsumexp(z) - self.alpha * self.residual_norm(h)
    }
}
