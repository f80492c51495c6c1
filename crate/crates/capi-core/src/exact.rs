//! Ground-truth solvers for small tabular MDPs: exact policy evaluation,
//! exact optimal values/policies, and a realizability-error upper bound.
//!
//! Everything here is a pure function of immutable inputs and sized for
//! instances with at most a few hundred states; the stochastic parts of the
//! crate are validated against these solvers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mdp::{FeatureMap, QTable, TabularMdp, TablePolicy};

/// Maximum allowed Bellman residual of an exact solve, per entry.
pub const BELLMAN_RESIDUAL_TOL: f64 = 1e-9;
/// Documented tolerance of the norm-constrained max-error fit.
pub const FIT_SOLVER_TOL: f64 = 1e-6;
/// Guard on deterministic-policy enumeration: `n_actions ^ n_states`.
pub const MAX_ENUMERATED_POLICIES: u128 = 1 << 20;

const FIT_SUBGRADIENT_STEPS: usize = 2000;

#[derive(Debug, Error)]
pub enum ExactError {
    /// Cannot happen for a valid discount (the system matrix is strictly
    /// diagonally dominant); reported rather than silently mis-solved.
    #[error("linear system for policy evaluation is singular")]
    SingularSystem,
    #[error("Bellman residual {residual:e} exceeds {BELLMAN_RESIDUAL_TOL:e}")]
    ResidualExceeded { residual: f64 },
    #[error("policy enumeration would visit {total} policies (limit {MAX_ENUMERATED_POLICIES})")]
    TooManyPolicies { total: u128 },
    #[error("policy has {policy} states, MDP has {mdp}")]
    PolicyShape { policy: usize, mdp: usize },
}

/// Exact state and action values of a fixed deterministic policy.
#[derive(Debug, Clone)]
pub struct PolicyValues {
    pub v: Vec<f64>,
    pub q: QTable,
}

/// Exact optimal values and an optimal deterministic policy.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub v_star: Vec<f64>,
    pub q_star: QTable,
    pub policy: TablePolicy,
}

/// Solve `(I - gamma * P_pi) v = r_pi` directly and fill in the action
/// values from the Bellman equation.
pub fn exact_values(mdp: &TabularMdp, policy: &TablePolicy) -> Result<PolicyValues, ExactError> {
    let n = mdp.n_states();
    if policy.n_states() != n {
        return Err(ExactError::PolicyShape { policy: policy.n_states(), mdp: n });
    }
    let gamma = mdp.gamma();

    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let act = policy.action(s);
        let row = mdp.transition_row(s, act);
        for (sp, &p) in row.iter().enumerate() {
            a[(s, sp)] -= gamma * p;
        }
        r[s] = mdp.expected_reward(s, act);
    }

    let v = a.clone().lu().solve(&r).ok_or(ExactError::SingularSystem)?;
    let residual = (&a * &v - &r).amax();
    if residual > BELLMAN_RESIDUAL_TOL {
        return Err(ExactError::ResidualExceeded { residual });
    }

    let mut q = QTable::zeros(n, mdp.n_actions());
    for s in 0..n {
        for act in 0..mdp.n_actions() {
            let row = mdp.transition_row(s, act);
            let future: f64 = row.iter().zip(v.iter()).map(|(&p, &vs)| p * vs).sum();
            q.set(s, act, mdp.expected_reward(s, act) + gamma * future);
        }
    }
    Ok(PolicyValues { v: v.as_slice().to_vec(), q })
}

/// Exact policy iteration to a fixed point. Greedy ties are broken by the
/// lowest action index, so the output is unique.
pub fn exact_optimal(mdp: &TabularMdp) -> Result<OptimalSolution, ExactError> {
    let n = mdp.n_states();
    let mut policy = TablePolicy::constant(n, 0);
    // Policy iteration visits each deterministic policy at most once.
    let max_rounds = 10_000usize;
    let mut values = exact_values(mdp, &policy)?;
    for _ in 0..max_rounds {
        let mut improved = policy.clone();
        for s in 0..n {
            improved.set_action(s, values.q.argmax_row(s));
        }
        if improved == policy {
            break;
        }
        policy = improved;
        values = exact_values(mdp, &policy)?;
    }

    // Bellman optimality residual certifies the fixed point.
    let mut residual = 0.0f64;
    for s in 0..n {
        residual = residual.max((values.v[s] - values.q.max_row(s)).abs());
    }
    if residual > BELLMAN_RESIDUAL_TOL {
        return Err(ExactError::ResidualExceeded { residual });
    }
    Ok(OptimalSolution { v_star: values.v, q_star: values.q, policy })
}

/// `v*(state) - v^pi(state)`; nonnegative up to solver tolerance.
pub fn suboptimality(
    mdp: &TabularMdp,
    policy: &TablePolicy,
    state: usize,
) -> Result<f64, ExactError> {
    let optimal = exact_optimal(mdp)?;
    let values = exact_values(mdp, policy)?;
    Ok(optimal.v_star[state] - values.v[state])
}

/// Upper bound on the uniform policy value-function approximation error of
/// `(mdp, features)`: enumerate every deterministic policy and fit its exact
/// action values with a norm-constrained weight vector.
///
/// The inner minimization (least absolute deviation over the `B`-ball) is
/// solved approximately: a minimum-norm least-squares warm start projected
/// onto the ball, refined by projected subgradient descent. Any feasible
/// weight vector yields a valid upper bound; accuracy is `FIT_SOLVER_TOL`
/// on the realizable instances used in tests.
pub fn fit_qpi_error_upper_bound(
    mdp: &TabularMdp,
    features: &FeatureMap,
) -> Result<f64, ExactError> {
    let n_states = mdp.n_states();
    let n_actions = mdp.n_actions();
    let total = (n_actions as u128)
        .checked_pow(n_states as u32)
        .filter(|&t| t <= MAX_ENUMERATED_POLICIES)
        .ok_or(ExactError::TooManyPolicies {
            total: (n_actions as u128).checked_pow(n_states as u32).unwrap_or(u128::MAX),
        })?;

    let d = features.dim();
    let rows = n_states * n_actions;
    let mut phi_mat = DMatrix::<f64>::zeros(rows, d);
    for s in 0..n_states {
        for a in 0..n_actions {
            for (k, &x) in features.phi(s, a).iter().enumerate() {
                phi_mat[(s * n_actions + a, k)] = x;
            }
        }
    }
    let b = features.param_bound();

    let mut worst = 0.0f64;
    let mut assignment = vec![0usize; n_states];
    for idx in 0..total {
        let mut rem = idx;
        for slot in assignment.iter_mut() {
            *slot = (rem % n_actions as u128) as usize;
            rem /= n_actions as u128;
        }
        let policy = TablePolicy::new(assignment.clone(), n_actions).expect("in-range by construction");
        let values = exact_values(mdp, &policy)?;
        let mut target = DVector::<f64>::zeros(rows);
        for s in 0..n_states {
            for a in 0..n_actions {
                target[s * n_actions + a] = values.q.get(s, a);
            }
        }
        let err = fit_max_error(&phi_mat, &target, b);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn max_abs_residual(phi: &DMatrix<f64>, target: &DVector<f64>, theta: &DVector<f64>) -> (f64, usize) {
    let residual = target - phi * theta;
    let mut best = 0usize;
    let mut val = 0.0f64;
    for (i, &r) in residual.iter().enumerate() {
        if r.abs() > val {
            val = r.abs();
            best = i;
        }
    }
    (val, best)
}

fn project_ball(theta: &mut DVector<f64>, radius: f64) {
    let norm = theta.norm();
    if norm > radius && norm > 0.0 {
        *theta *= radius / norm;
    }
}

fn fit_max_error(phi: &DMatrix<f64>, target: &DVector<f64>, radius: f64) -> f64 {
    // Warm start: minimum-norm least squares, projected onto the ball.
    let svd = phi.clone().svd(true, true);
    let mut theta = svd
        .solve(target, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(phi.ncols()));
    project_ball(&mut theta, radius);

    let (mut best, _) = max_abs_residual(phi, target, &theta);
    let mut current = theta.clone();
    for t in 0..FIT_SUBGRADIENT_STEPS {
        let (value, worst_row) = max_abs_residual(phi, target, &current);
        if value < best {
            best = value;
        }
        if best <= 1e-13 {
            break;
        }
        let r = target[worst_row] - phi.row(worst_row).transpose().dot(&current);
        let grad = phi.row(worst_row).transpose() * (-r.signum());
        let grad_norm = grad.norm();
        if grad_norm == 0.0 {
            break;
        }
        let step = (radius.max(1.0) / grad_norm) / ((t + 1) as f64).sqrt();
        current -= grad * step;
        project_ball(&mut current, radius);
    }
    best
}
