//! Core set of state-action pairs with its regularized Gram matrix,
//! incrementally maintained inverse, ridge-regression extension of measured
//! values, and cover membership tests.
//!
//! The inverse is kept in sync through rank-one updates and downdates.
//! Every 64th update the incremental inverse is re-verified against a fresh
//! direct inverse; strict mode (used by debug-certified planner runs)
//! verifies every update.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mdp::FeatureMap;

/// Slack on the cover threshold `phi^T V^{-1} phi <= 1`, so membership is
/// stable across the incremental and direct inverses.
pub const COVER_SLACK: f64 = 1e-12;
/// Frobenius tolerance between the incremental and direct inverses.
pub const INVERSE_DRIFT_TOL: f64 = 1e-8;
/// Smallest admissible downdate denominator `1 - phi^T V^{-1} phi`.
pub const DOWNDATE_MIN_DENOM: f64 = 1e-12;

const DRIFT_CHECK_PERIOD: usize = 64;

#[derive(Debug, Error)]
pub enum CoreSetError {
    #[error("pair (s={state}, a={action}) not present in the core set")]
    NotPresent { state: usize, action: usize },
    #[error("rank-one downdate denominator {denom:e} below {DOWNDATE_MIN_DENOM:e}")]
    NumericalBreakdown { denom: f64 },
    #[error("value list has {values} entries for {pairs} core pairs")]
    LengthMismatch { pairs: usize, values: usize },
    #[error("incremental inverse drifted {drift:e} from the direct inverse")]
    InverseDrift { drift: f64 },
    #[error("feature vector has dimension {got}, core set expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("direct inversion of the Gram matrix failed")]
    DirectInversion,
}

/// Rank-one Sherman-Morrison update of an inverse: `(V + phi phi^T)^{-1}`.
/// The denominator `1 + phi^T V^{-1} phi` is positive for positive definite
/// `V`, so this cannot fail.
pub fn sherman_morrison_update(v_inv: &mut DMatrix<f64>, phi: &DVector<f64>) {
    let vphi = &*v_inv * phi;
    let denom = 1.0 + phi.dot(&vphi);
    let scale = 1.0 / denom;
    v_inv.ger(-scale, &vphi, &vphi, 1.0);
}

/// Rank-one Sherman-Morrison downdate: `(V - phi phi^T)^{-1}`. Fails when
/// the removal would make the matrix (numerically) singular, which cannot
/// happen when removing a pair that is genuinely part of the Gram sum.
pub fn sherman_morrison_downdate(
    v_inv: &mut DMatrix<f64>,
    phi: &DVector<f64>,
) -> Result<(), CoreSetError> {
    let vphi = &*v_inv * phi;
    let denom = 1.0 - phi.dot(&vphi);
    if denom <= DOWNDATE_MIN_DENOM {
        return Err(CoreSetError::NumericalBreakdown { denom });
    }
    let scale = 1.0 / denom;
    v_inv.ger(scale, &vphi, &vphi, 1.0);
    Ok(())
}

/// Core-set size bound from the elliptical potential argument:
/// `4 d ln(1 + 4 L^2 / lambda)`.
pub fn d_tilde(d: usize, feature_bound: f64, lambda: f64) -> f64 {
    4.0 * d as f64 * (1.0 + 4.0 * feature_bound * feature_bound / lambda).ln()
}

/// Ridge parameter `lambda = omega^2 / B^2`.
pub fn ridge_lambda(omega: f64, param_bound: f64) -> f64 {
    (omega / param_bound) * (omega / param_bound)
}

/// Ordered list of (state, action) pairs with `V(C) = lambda I + sum phi phi^T`
/// and its inverse maintained incrementally.
#[derive(Debug, Clone)]
pub struct CoreSet {
    dim: usize,
    lambda: f64,
    pairs: Vec<(usize, usize)>,
    phis: Vec<DVector<f64>>,
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    updates: usize,
    strict_checks: bool,
}

impl CoreSet {
    pub fn new(dim: usize, lambda: f64) -> Self {
        assert!(lambda > 0.0, "ridge parameter must be positive");
        Self {
            dim,
            lambda,
            pairs: Vec::new(),
            phis: Vec::new(),
            v: DMatrix::identity(dim, dim) * lambda,
            v_inv: DMatrix::identity(dim, dim) / lambda,
            updates: 0,
            strict_checks: false,
        }
    }

    /// Verify every rank-one update against a direct inverse instead of
    /// every 64th.
    pub fn set_strict_checks(&mut self, strict: bool) {
        self.strict_checks = strict;
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn contains(&self, state: usize, action: usize) -> bool {
        self.pairs.contains(&(state, action))
    }

    pub fn v_matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn v_inverse(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    fn check_dim(&self, phi: &[f64]) -> Result<(), CoreSetError> {
        if phi.len() != self.dim {
            return Err(CoreSetError::DimensionMismatch { got: phi.len(), expected: self.dim });
        }
        Ok(())
    }

    fn after_update(&mut self) -> Result<(), CoreSetError> {
        self.updates += 1;
        if self.strict_checks || self.updates.is_multiple_of(DRIFT_CHECK_PERIOD) {
            self.verify_inverse()?;
        }
        Ok(())
    }

    /// Re-verify the incremental inverse against a fresh direct inverse:
    /// both the identity residual `|V V^-1 - I|_F` and the relative
    /// Frobenius distance to the direct inverse must stay below
    /// `INVERSE_DRIFT_TOL`.
    pub fn verify_inverse(&self) -> Result<f64, CoreSetError> {
        let direct = self
            .v
            .clone()
            .try_inverse()
            .ok_or(CoreSetError::DirectInversion)?;
        let residual = (&self.v * &self.v_inv - DMatrix::identity(self.dim, self.dim)).norm();
        let relative = (&direct - &self.v_inv).norm() / direct.norm().max(1.0);
        let drift = residual.max(relative);
        if drift > INVERSE_DRIFT_TOL {
            return Err(CoreSetError::InverseDrift { drift });
        }
        Ok(drift)
    }

    pub fn append(
        &mut self,
        state: usize,
        action: usize,
        features: &FeatureMap,
    ) -> Result<(), CoreSetError> {
        let phi = features.phi(state, action).to_vec();
        self.append_with_phi(state, action, phi)
    }

    pub fn append_with_phi(
        &mut self,
        state: usize,
        action: usize,
        phi: Vec<f64>,
    ) -> Result<(), CoreSetError> {
        self.check_dim(&phi)?;
        let phi = DVector::from_vec(phi);
        self.v.ger(1.0, &phi, &phi, 1.0);
        sherman_morrison_update(&mut self.v_inv, &phi);
        self.pairs.push((state, action));
        self.phis.push(phi);
        self.after_update()
    }

    /// Remove the first occurrence of `(state, action)` and downdate the
    /// Gram matrix and its inverse.
    pub fn remove(&mut self, state: usize, action: usize) -> Result<(), CoreSetError> {
        let idx = self
            .pairs
            .iter()
            .position(|&p| p == (state, action))
            .ok_or(CoreSetError::NotPresent { state, action })?;
        let phi = self.phis[idx].clone();
        sherman_morrison_downdate(&mut self.v_inv, &phi)?;
        self.v.ger(-1.0, &phi, &phi, 1.0);
        self.pairs.remove(idx);
        self.phis.remove(idx);
        self.after_update()
    }

    /// `phi^T V(C)^{-1} phi` for an arbitrary feature vector.
    pub fn weighted_norm_sq(&self, phi: &[f64]) -> f64 {
        debug_assert_eq!(phi.len(), self.dim);
        let phi = DVector::from_column_slice(phi);
        phi.dot(&(&self.v_inv * &phi))
    }

    pub fn in_action_cover(&self, state: usize, action: usize, features: &FeatureMap) -> bool {
        self.weighted_norm_sq(features.phi(state, action)) <= 1.0 + COVER_SLACK
    }

    pub fn in_cover(&self, state: usize, features: &FeatureMap) -> bool {
        (0..features.n_actions()).all(|a| self.in_action_cover(state, a, features))
    }

    /// Ridge-regression weight vector `V(C)^{-1} sum_i phi_i qbar_i`.
    pub fn lse_theta(&self, qbar: &[f64]) -> Result<DVector<f64>, CoreSetError> {
        if qbar.len() != self.pairs.len() {
            return Err(CoreSetError::LengthMismatch { pairs: self.pairs.len(), values: qbar.len() });
        }
        let mut acc = DVector::zeros(self.dim);
        for (phi, &value) in self.phis.iter().zip(qbar.iter()) {
            acc.axpy(value, phi, 1.0);
        }
        Ok(&self.v_inv * acc)
    }

    /// Least-squares extension of the measured values to `(state, action)`;
    /// zero for the empty core set.
    pub fn lse(
        &self,
        qbar: &[f64],
        state: usize,
        action: usize,
        features: &FeatureMap,
    ) -> Result<f64, CoreSetError> {
        let theta = self.lse_theta(qbar)?;
        let phi = DVector::from_column_slice(features.phi(state, action));
        Ok(phi.dot(&theta))
    }
}
