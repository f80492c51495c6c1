//! Benchmark MDP generators: the two-state linear family with sign-vector
//! actions, bandit-style two-state fixtures, and seeded random tabular
//! instances with one-hot features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mdp::{FeatureMap, MdpError, RewardSpec, TabularMdp, TablePolicy};

/// Guard on enumerating the full sign-vector action set.
pub const MAX_SIGN_DIMS: usize = 16;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("{count} sign dimensions exceed the enumeration guard ({MAX_SIGN_DIMS}); pass an explicit action subset")]
    TooManyActions { count: usize },
    #[error("invalid instance spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Parameters of the two-state linear family: a hidden sign vector `beta`,
/// discount, and a gap parameter small enough to keep the transition kernel
/// valid.
#[derive(Debug, Clone)]
pub struct HardLinearSpec {
    beta: Vec<f64>,
    gamma: f64,
    delta: f64,
    d: usize,
}

impl HardLinearSpec {
    /// `signs[i]` gives the sign of `beta_i`; entries are `+-1/sqrt(d-2)`.
    pub fn new(d: usize, gamma: f64, delta: f64, signs: &[bool]) -> Result<Self, InstanceError> {
        if d < 3 {
            return Err(InstanceError::InvalidSpec(format!("d must be >= 3, got {d}")));
        }
        if signs.len() != d - 2 {
            return Err(InstanceError::InvalidSpec(format!(
                "expected {} sign entries, got {}",
                d - 2,
                signs.len()
            )));
        }
        if !(7.0 / 12.0..1.0).contains(&gamma) {
            return Err(InstanceError::InvalidSpec(format!(
                "gamma must lie in [7/12, 1), got {gamma}"
            )));
        }
        if delta < 0.0 || delta > 0.2 * (1.0 - gamma) + 1e-12 {
            return Err(InstanceError::InvalidSpec(format!(
                "delta {delta} exceeds 0.2 * (1 - gamma) = {}",
                0.2 * (1.0 - gamma)
            )));
        }
        let scale = 1.0 / ((d - 2) as f64).sqrt();
        let beta: Vec<f64> = signs.iter().map(|&s| if s { scale } else { -scale }).collect();
        let norm: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
        debug_assert!((norm - 1.0).abs() <= 1e-12);
        Ok(Self { beta, gamma, delta, d })
    }

    /// Build from the canonical action index of `beta` itself.
    pub fn from_action_index(
        d: usize,
        gamma: f64,
        delta: f64,
        index: usize,
    ) -> Result<Self, InstanceError> {
        if d < 3 {
            return Err(InstanceError::InvalidSpec(format!("d must be >= 3, got {d}")));
        }
        let bits = d - 2;
        if bits <= usize::BITS as usize && index >= (1usize << bits.min(63)) {
            return Err(InstanceError::InvalidSpec(format!(
                "beta index {index} out of range for {bits} sign bits"
            )));
        }
        let signs: Vec<bool> = (0..bits).map(|j| (index >> j) & 1 == 0).collect();
        Self::new(d, gamma, delta, &signs)
    }

    pub fn random(d: usize, gamma: f64, delta: f64, seed: u64) -> Result<Self, InstanceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs: Vec<bool> = (0..d.saturating_sub(2)).map(|_| rng.random()).collect();
        Self::new(d, gamma, delta, &signs)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Index of `beta` in the canonical sign-vector enumeration.
    pub fn beta_action_index(&self) -> usize {
        let mut idx = 0usize;
        for (j, &b) in self.beta.iter().enumerate() {
            if b < 0.0 {
                idx |= 1 << j;
            }
        }
        idx
    }
}

/// Canonical enumeration of the sign-vector action set
/// `{ +-1/sqrt(n) }^n`: bit `j` of the action index clears (+) or sets (-)
/// coordinate `j`.
pub fn sign_actions(n: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (n as f64).sqrt();
    (0..(1usize << n))
        .map(|k| {
            (0..n)
                .map(|j| if (k >> j) & 1 == 0 { scale } else { -scale })
                .collect()
        })
        .collect()
}

fn hard_linear_from_actions(
    spec: &HardLinearSpec,
    actions: &[Vec<f64>],
) -> Result<(TabularMdp, FeatureMap), InstanceError> {
    let d = spec.d;
    let n_actions = actions.len();
    let mut transition = vec![Vec::with_capacity(n_actions), Vec::with_capacity(n_actions)];
    let mut phi = vec![Vec::with_capacity(n_actions), Vec::with_capacity(n_actions)];
    for a in actions {
        let dot: f64 = a.iter().zip(spec.beta.iter()).map(|(x, y)| x * y).sum();
        let p_stay = spec.gamma + spec.delta * dot;
        if !(0.0..=1.0).contains(&p_stay) {
            return Err(InstanceError::InvalidSpec(format!(
                "transition probability {p_stay} outside [0,1]"
            )));
        }
        transition[0].push(vec![p_stay, 1.0 - p_stay]);
        transition[1].push(vec![0.0, 1.0]);

        let mut f0 = Vec::with_capacity(d);
        f0.push(1.0);
        f0.push(0.0);
        f0.extend_from_slice(a);
        phi[0].push(f0);
        let mut f1 = vec![0.0; d];
        f1[1] = 1.0;
        phi[1].push(f1);
    }
    let rewards = vec![
        vec![RewardSpec::Deterministic(1.0); n_actions],
        vec![RewardSpec::Deterministic(0.0); n_actions],
    ];
    let mdp = TabularMdp::new(spec.gamma, 0, transition, rewards)?;

    // Every policy's action values are linear in these features; the worst
    // parameter norm is attained by the policy playing beta, so that value
    // (an l1 overestimate of the l2 norm) is a safe weight bound.
    let v_max = analytic_value(spec, 1.0);
    let b = 1.0 + spec.gamma * spec.gamma * v_max + spec.gamma * spec.delta * v_max;
    let features = FeatureMap::new(phi, 2.0f64.sqrt(), b)?;
    Ok((mdp, features))
}

/// Two-state instance over the full sign-vector action set.
pub fn make_hard_linear(spec: &HardLinearSpec) -> Result<(TabularMdp, FeatureMap), InstanceError> {
    let bits = spec.d - 2;
    if bits > MAX_SIGN_DIMS {
        return Err(InstanceError::TooManyActions { count: bits });
    }
    hard_linear_from_actions(spec, &sign_actions(bits))
}

/// Variant with a uniformly subsampled action set for larger `d`. The subset
/// always includes `beta` itself, so the optimal policy stays available;
/// this changes the instance class and is labeled as such by callers.
pub fn make_hard_linear_subsampled(
    spec: &HardLinearSpec,
    n_actions: usize,
    seed: u64,
) -> Result<(TabularMdp, FeatureMap), InstanceError> {
    if n_actions == 0 {
        return Err(InstanceError::InvalidSpec("need at least one action".into()));
    }
    let bits = spec.d - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (bits as f64).sqrt();
    let mut actions = vec![spec.beta.to_vec()];
    while actions.len() < n_actions {
        let a: Vec<f64> = (0..bits)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect();
        if !actions.contains(&a) {
            actions.push(a);
        }
    }
    hard_linear_from_actions(spec, &actions)
}

/// Closed-form state value at the rewarding state as a function of the
/// alignment `t = pi^T beta` of the played action with `beta`.
pub fn analytic_value(spec: &HardLinearSpec, pi_beta_dot: f64) -> f64 {
    1.0 / (1.0 - spec.gamma * spec.gamma - spec.gamma * spec.delta * pi_beta_dot)
}

/// Closed-form suboptimality gap at the rewarding state for alignment `t`.
pub fn analytic_gap(spec: &HardLinearSpec, pi_beta_dot: f64) -> f64 {
    let g = spec.gamma;
    let d = spec.delta;
    g * d * (1.0 - pi_beta_dot) / ((1.0 - g * g - g * d) * (1.0 - g * g - g * d * pi_beta_dot))
}

/// Per-coordinate sign disagreement of an action with `beta`, and the total.
/// For deterministic policies the entries are 0/1 and
/// `1 - a^T beta = 2 * total / n` holds exactly.
pub fn err_decomposition(action: &[f64], beta: &[f64]) -> (Vec<f64>, f64) {
    let errs: Vec<f64> = action
        .iter()
        .zip(beta.iter())
        .map(|(&a, &b)| if a.signum() != b.signum() { 1.0 } else { 0.0 })
        .collect();
    let total = errs.iter().sum();
    (errs, total)
}

/// Convenience form reading the played action vector out of the feature map
/// (coordinates 2.. of `phi(s0, a)`).
pub fn policy_err_decomposition(
    policy: &TablePolicy,
    features: &FeatureMap,
    beta: &[f64],
) -> (Vec<f64>, f64) {
    let action = &features.phi(0, policy.action(0))[2..];
    err_decomposition(action, beta)
}

/// Two-state bandit-style fixture: reward `alpha_prime` on the optimal
/// action at the start state, zero elsewhere. `looping` keeps returning to
/// the start state; otherwise everything falls into the absorbing state
/// after one step.
///
/// The emitted features are a one-hot placeholder: these fixtures back
/// exact-oracle and value-formula tests, not misspecification experiments.
pub fn make_bandit_mdp(
    optimal_action: usize,
    k: usize,
    alpha_prime: f64,
    gamma: f64,
    looping: bool,
) -> Result<(TabularMdp, FeatureMap), InstanceError> {
    if k == 0 || optimal_action >= k {
        return Err(InstanceError::InvalidSpec(format!(
            "optimal action {optimal_action} out of range for {k} actions"
        )));
    }
    if !(0.0..=1.0).contains(&alpha_prime) {
        return Err(InstanceError::InvalidSpec(format!(
            "alpha' must lie in [0,1], got {alpha_prime}"
        )));
    }
    let row = if looping { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let transition = vec![vec![row.clone(); k], vec![row; k]];
    let mut r0 = vec![RewardSpec::Deterministic(0.0); k];
    r0[optimal_action] = RewardSpec::Deterministic(alpha_prime);
    let rewards = vec![r0, vec![RewardSpec::Deterministic(0.0); k]];
    let mdp = TabularMdp::new(gamma, 0, transition, rewards)?;
    let features = one_hot_features(2, k, gamma);
    Ok((mdp, features))
}

/// Seeded random dense MDP: exponential-weight transition rows (Dirichlet
/// with unit concentration) and deterministic uniform rewards.
pub fn random_tabular(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states);
    let mut rewards = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut rows = Vec::with_capacity(n_actions);
        let mut rrow = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| -(rng.random::<f64>().max(1e-12)).ln())
                .collect();
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
            rows.push(row);
            rrow.push(RewardSpec::Deterministic(rng.random::<f64>()));
        }
        transition.push(rows);
        rewards.push(rrow);
    }
    TabularMdp::new(gamma, 0, transition, rewards).expect("generated tables are valid")
}

/// One-hot tabular features with a weight bound large enough to realize
/// every policy's action-value table exactly (entries are at most
/// `1/(1-gamma)`, so `sqrt(S*A)/(1-gamma)` covers the stacked table).
pub fn one_hot_features(n_states: usize, n_actions: usize, gamma: f64) -> FeatureMap {
    let b = ((n_states * n_actions) as f64).sqrt() / (1.0 - gamma);
    FeatureMap::one_hot(n_states, n_actions, b)
}

/// Canonical five-state planning benchmark (one-hot features, gamma = 0.75).
pub fn five_state_instance() -> (TabularMdp, FeatureMap) {
    let mdp = random_tabular(1405, 5, 2, 0.75);
    let features = one_hot_features(5, 2, 0.75);
    (mdp, features)
}

/// Canonical six-state fixture for rollout-estimation statistics.
pub fn six_state_instance() -> TabularMdp {
    random_tabular(2203, 6, 3, 0.75)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_values, fit_qpi_error_upper_bound, suboptimality, FIT_SOLVER_TOL};
    use approx::assert_relative_eq;

    #[test]
    fn hard_linear_kernel_matches_closed_form() {
        let spec = HardLinearSpec::from_action_index(4, 0.75, 0.02, 0).unwrap();
        let (mdp, features) = make_hard_linear(&spec).unwrap();
        let beta_idx = spec.beta_action_index();
        assert_eq!(beta_idx, 0);
        let row = mdp.transition_row(0, beta_idx);
        assert_relative_eq!(row[0], 0.77, epsilon = 1e-12);
        assert_relative_eq!(row[1], 0.23, epsilon = 1e-12);
        for a in 0..mdp.n_actions() {
            let sum: f64 = mdp.transition_row(0, a).iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            assert_eq!(mdp.transition_row(1, a), &[0.0, 1.0]);
        }
        assert_eq!(features.phi(0, 0)[0], 1.0);
        assert_eq!(features.phi(1, 3), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_linear_is_realizable() {
        let spec = HardLinearSpec::from_action_index(4, 0.75, 0.02, 2).unwrap();
        let (mdp, features) = make_hard_linear(&spec).unwrap();
        let err = fit_qpi_error_upper_bound(&mdp, &features).unwrap();
        assert!(err <= FIT_SOLVER_TOL, "err {err}");
    }

    #[test]
    fn analytic_value_examples() {
        let spec = HardLinearSpec::from_action_index(4, 0.75, 0.02, 0).unwrap();
        assert_relative_eq!(analytic_value(&spec, 1.0), 1.0 / 0.4225, epsilon = 1e-12);
        let flat = HardLinearSpec::from_action_index(4, 0.75, 0.0, 0).unwrap();
        assert_relative_eq!(analytic_value(&flat, -0.37), 1.0 / (1.0 - 0.75 * 0.75), epsilon = 1e-12);
        assert_relative_eq!(analytic_value(&flat, 0.9), 1.0 / (1.0 - 0.75 * 0.75), epsilon = 1e-12);
    }

    #[test]
    fn analytic_value_matches_exact_solver() {
        let spec = HardLinearSpec::from_action_index(5, 0.8, 0.03, 5).unwrap();
        let (mdp, _) = make_hard_linear(&spec).unwrap();
        let actions = sign_actions(3);
        for (idx, action) in actions.iter().enumerate() {
            let policy = TablePolicy::constant(2, idx);
            let values = exact_values(&mdp, &policy).unwrap();
            let dot: f64 = action.iter().zip(spec.beta().iter()).map(|(x, y)| x * y).sum();
            assert_relative_eq!(values.v[0], analytic_value(&spec, dot), epsilon = 1e-9);
            assert_relative_eq!(values.v[1], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn analytic_gap_matches_exact_solver() {
        let spec = HardLinearSpec::from_action_index(4, 0.75, 0.02, 1).unwrap();
        let (mdp, _) = make_hard_linear(&spec).unwrap();
        // The action opposite to beta has alignment -1.
        let anti = spec.beta_action_index() ^ 0b11;
        let policy = TablePolicy::constant(2, anti);
        let gap = suboptimality(&mdp, &policy, 0).unwrap();
        let g = spec.gamma();
        let d = spec.delta();
        let expect = g * d * 2.0 / ((1.0 - g * g - g * d) * (1.0 - g * g + g * d));
        assert_relative_eq!(gap, expect, epsilon = 1e-9);
        assert_relative_eq!(analytic_gap(&spec, -1.0), expect, epsilon = 1e-12);
    }

    #[test]
    fn err_decomposition_identity() {
        let spec = HardLinearSpec::from_action_index(6, 0.75, 0.02, 9).unwrap();
        let actions = sign_actions(4);
        let beta = spec.beta();
        let (errs, total) = err_decomposition(&actions[spec.beta_action_index()], beta);
        assert!(errs.iter().all(|&e| e == 0.0));
        assert_eq!(total, 0.0);
        let anti = spec.beta_action_index() ^ 0b1111;
        let (errs, total) = err_decomposition(&actions[anti], beta);
        assert!(errs.iter().all(|&e| e == 1.0));
        assert_eq!(total, 4.0);
        for (k, action) in actions.iter().enumerate() {
            let (_, total) = err_decomposition(action, beta);
            let dot: f64 = action.iter().zip(beta.iter()).map(|(x, y)| x * y).sum();
            assert!((1.0 - dot - 2.0 * total / 4.0).abs() <= 1e-12, "action {k}");
        }
    }

    #[test]
    fn bandit_fixture_values() {
        let (looping, _) = make_bandit_mdp(2, 4, 0.6, 0.8, true).unwrap();
        let sol = crate::exact::exact_optimal(&looping).unwrap();
        assert_relative_eq!(sol.v_star[0], 0.6 / 0.2, epsilon = 1e-9);
        assert_eq!(sol.policy.action(0), 2);
        let gap = suboptimality(&looping, &TablePolicy::constant(2, 2), 0).unwrap();
        assert!(gap.abs() <= 1e-9);

        let (single, _) = make_bandit_mdp(1, 3, 0.4, 0.8, false).unwrap();
        let sol = crate::exact::exact_optimal(&single).unwrap();
        assert_relative_eq!(sol.v_star[0], 0.4, epsilon = 1e-9);
    }

    #[test]
    fn sign_action_guard() {
        let spec = HardLinearSpec::random(20, 0.75, 0.01, 3).unwrap();
        assert!(matches!(
            make_hard_linear(&spec),
            Err(InstanceError::TooManyActions { .. })
        ));
        let (mdp, features) = make_hard_linear_subsampled(&spec, 8, 11).unwrap();
        assert_eq!(mdp.n_actions(), 8);
        // beta itself is always action 0 in the subsampled set.
        assert_eq!(&features.phi(0, 0)[2..], spec.beta());
    }

    #[test]
    fn delta_guard_enforced() {
        assert!(HardLinearSpec::from_action_index(4, 0.75, 0.06, 0).is_err());
        assert!(HardLinearSpec::from_action_index(4, 0.5, 0.01, 0).is_err());
    }

    #[test]
    fn generated_instances_validate() {
        for seed in 0..20u64 {
            let mdp = random_tabular(seed, 6, 3, 0.9);
            assert_eq!(mdp.n_states(), 6);
            for s in 0..6 {
                for a in 0..3 {
                    let sum: f64 = mdp.transition_row(s, a).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
