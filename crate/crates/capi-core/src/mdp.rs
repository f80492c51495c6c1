//! Finite discounted MDP model: transition/reward tables, linear feature
//! maps, deterministic table policies, and the JSON instance format.
//!
//! States and actions are dense integer indices. Transition rows are
//! validated to sum to one and rewards are restricted to `[0, 1]`, matching
//! the transition-reward kernel the rest of the crate assumes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for each transition row summing to one.
pub const PROB_ROW_TOL: f64 = 1e-12;
/// Slack allowed when checking feature norms against the declared bound.
pub const FEATURE_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("discount factor must lie in (0,1), got {0}")]
    BadDiscount(f64),
    #[error("initial state {0} out of range for {1} states")]
    BadInitialState(usize, usize),
    #[error("transition table has inconsistent shape at state {state}, action {action}")]
    BadShape { state: usize, action: usize },
    #[error("transition row (s={state}, a={action}) sums to {sum} (must be 1 within {PROB_ROW_TOL:e})")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("negative transition probability {p} at (s={state}, a={action}, s'={next})")]
    NegativeProbability { state: usize, action: usize, next: usize, p: f64 },
    #[error("reward parameter {value} at (s={state}, a={action}) outside [0,1]")]
    RewardRange { state: usize, action: usize, value: f64 },
    #[error("empty state or action space")]
    EmptySpace,
    #[error("feature table shape mismatch at (s={state}, a={action})")]
    FeatureShape { state: usize, action: usize },
    #[error("feature norm {norm} at (s={state}, a={action}) exceeds bound {bound}")]
    FeatureNorm { state: usize, action: usize, norm: f64, bound: f64 },
    #[error("feature map is for {fs} states x {fa} actions, MDP has {ms} x {ma}")]
    FeatureMdpMismatch { fs: usize, fa: usize, ms: usize, ma: usize },
    #[error("policy action {action} out of range for {n_actions} actions (state {state})")]
    PolicyAction { state: usize, action: usize, n_actions: usize },
    #[error("unknown reward kind {0:?} (expected \"det\" or \"bern\")")]
    RewardKind(String),
}

/// Reward distribution attached to a state-action pair. Both forms have
/// support inside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardSpec {
    /// Always pays the given value.
    Deterministic(f64),
    /// Pays 1 with the given probability, 0 otherwise.
    Bernoulli(f64),
}

impl RewardSpec {
    pub fn mean(&self) -> f64 {
        match *self {
            RewardSpec::Deterministic(v) => v,
            RewardSpec::Bernoulli(p) => p,
        }
    }

    fn validate(&self, state: usize, action: usize) -> Result<(), MdpError> {
        let v = self.mean();
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(MdpError::RewardRange { state, action, value: v });
        }
        Ok(())
    }
}

/// Finite MDP with explicit tables, a discount in `(0,1)`, and a designated
/// initial state.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    // flattened [s][a][s'] row-major
    transition: Vec<f64>,
    rewards: Vec<RewardSpec>,
    gamma: f64,
    initial_state: usize,
}

impl TabularMdp {
    pub fn new(
        gamma: f64,
        initial_state: usize,
        transition: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<RewardSpec>>,
    ) -> Result<Self, MdpError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MdpError::BadDiscount(gamma));
        }
        let n_states = transition.len();
        if n_states == 0 {
            return Err(MdpError::EmptySpace);
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(MdpError::EmptySpace);
        }
        if initial_state >= n_states {
            return Err(MdpError::BadInitialState(initial_state, n_states));
        }
        if rewards.len() != n_states {
            return Err(MdpError::BadShape { state: rewards.len(), action: 0 });
        }

        let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(MdpError::BadShape { state: s, action: per_action.len() });
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != n_states {
                    return Err(MdpError::BadShape { state: s, action: a });
                }
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        return Err(MdpError::NegativeProbability { state: s, action: a, next, p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_ROW_TOL {
                    return Err(MdpError::RowSum { state: s, action: a, sum });
                }
                flat.extend_from_slice(row);
            }
        }

        let mut flat_rewards = Vec::with_capacity(n_states * n_actions);
        for (s, per_action) in rewards.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(MdpError::BadShape { state: s, action: per_action.len() });
            }
            for (a, spec) in per_action.iter().enumerate() {
                spec.validate(s, a)?;
                flat_rewards.push(*spec);
            }
        }

        Ok(Self { n_states, n_actions, transition: flat, rewards: flat_rewards, gamma, initial_state })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Transition distribution `P(.|s,a)` as a probability row over states.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let base = (state * self.n_actions + action) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, state: usize, action: usize) -> RewardSpec {
        self.rewards[state * self.n_actions + action]
    }

    /// Expected immediate reward `r(s,a)`.
    pub fn expected_reward(&self, state: usize, action: usize) -> f64 {
        self.reward(state, action).mean()
    }

    pub fn in_range(&self, state: usize, action: usize) -> bool {
        state < self.n_states && action < self.n_actions
    }
}

/// Linear feature map `phi(s,a)` with declared norm bound `L` and parameter
/// (weight vector) bound `B`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    dim: usize,
    n_states: usize,
    n_actions: usize,
    // flattened [s][a][k]
    data: Vec<f64>,
    feature_bound: f64,
    param_bound: f64,
}

impl FeatureMap {
    pub fn new(
        phi: Vec<Vec<Vec<f64>>>,
        feature_bound: f64,
        param_bound: f64,
    ) -> Result<Self, MdpError> {
        let n_states = phi.len();
        if n_states == 0 {
            return Err(MdpError::EmptySpace);
        }
        let n_actions = phi[0].len();
        if n_actions == 0 {
            return Err(MdpError::EmptySpace);
        }
        let dim = phi[0][0].len();
        let mut data = Vec::with_capacity(n_states * n_actions * dim);
        for (s, per_action) in phi.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(MdpError::FeatureShape { state: s, action: per_action.len() });
            }
            for (a, vec) in per_action.iter().enumerate() {
                if vec.len() != dim {
                    return Err(MdpError::FeatureShape { state: s, action: a });
                }
                let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > feature_bound + FEATURE_NORM_TOL {
                    return Err(MdpError::FeatureNorm { state: s, action: a, norm, bound: feature_bound });
                }
                data.extend_from_slice(vec);
            }
        }
        Ok(Self { dim, n_states, n_actions, data, feature_bound, param_bound })
    }

    /// Tabular one-hot features: `phi(s,a) = e_{s * n_actions + a}`, so every
    /// action-value table is realized exactly by its own entries.
    pub fn one_hot(n_states: usize, n_actions: usize, param_bound: f64) -> Self {
        let dim = n_states * n_actions;
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, n_states, n_actions, data, feature_bound: 1.0, param_bound }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn param_bound(&self) -> f64 {
        self.param_bound
    }

    pub fn phi(&self, state: usize, action: usize) -> &[f64] {
        let base = (state * self.n_actions + action) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn matches_mdp(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(MdpError::FeatureMdpMismatch {
                fs: self.n_states,
                fa: self.n_actions,
                ms: mdp.n_states(),
                ma: mdp.n_actions(),
            });
        }
        Ok(())
    }
}

/// Deterministic stationary memoryless policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePolicy {
    actions: Vec<usize>,
}

impl TablePolicy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self, MdpError> {
        for (state, &action) in actions.iter().enumerate() {
            if action >= n_actions {
                return Err(MdpError::PolicyAction { state, action, n_actions });
            }
        }
        Ok(Self { actions })
    }

    pub fn constant(n_states: usize, action: usize) -> Self {
        Self { actions: vec![action; n_states] }
    }

    pub fn action(&self, state: usize) -> usize {
        self.actions[state]
    }

    pub fn set_action(&mut self, state: usize, action: usize) {
        self.actions[state] = action;
    }

    pub fn n_states(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

/// Dense per-(state, action) table of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.n_actions + action] = value;
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let base = state * self.n_actions;
        &self.values[base..base + self.n_actions]
    }

    /// Greedy action for a state; ties broken by the lowest action index.
    pub fn argmax_row(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_row(&self, state: usize) -> f64 {
        self.row(state)[self.argmax_row(state)]
    }
}

// --- JSON instance format -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardSpecJson {
    Det { value: f64 },
    Bern { value: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureMapJson {
    pub d: usize,
    #[serde(rename = "L")]
    pub feature_bound: f64,
    #[serde(rename = "B")]
    pub param_bound: f64,
    pub phi: Vec<Vec<Vec<f64>>>,
}

/// On-disk MDP instance. Probabilities are plain decimal doubles; loading
/// re-runs every model invariant check.
#[derive(Debug, Serialize, Deserialize)]
pub struct MdpInstanceFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub initial_state: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<RewardSpecJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureMapJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl MdpInstanceFile {
    pub fn from_parts(
        mdp: &TabularMdp,
        features: Option<&FeatureMap>,
        metadata: Option<serde_json::Value>,
    ) -> Self {
        let transition = (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| mdp.transition_row(s, a).to_vec())
                    .collect()
            })
            .collect();
        let rewards = (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| match mdp.reward(s, a) {
                        RewardSpec::Deterministic(value) => RewardSpecJson::Det { value },
                        RewardSpec::Bernoulli(value) => RewardSpecJson::Bern { value },
                    })
                    .collect()
            })
            .collect();
        let features = features.map(|f| FeatureMapJson {
            d: f.dim(),
            feature_bound: f.feature_bound(),
            param_bound: f.param_bound(),
            phi: (0..f.n_states())
                .map(|s| (0..f.n_actions()).map(|a| f.phi(s, a).to_vec()).collect())
                .collect(),
        });
        Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            gamma: mdp.gamma(),
            initial_state: mdp.initial_state(),
            transition,
            rewards,
            features,
            metadata,
        }
    }

    /// Validate and convert into model objects.
    pub fn into_parts(self) -> Result<(TabularMdp, Option<FeatureMap>), MdpError> {
        let rewards = self
            .rewards
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|r| match r {
                        RewardSpecJson::Det { value } => RewardSpec::Deterministic(value),
                        RewardSpecJson::Bern { value } => RewardSpec::Bernoulli(value),
                    })
                    .collect()
            })
            .collect();
        let mdp = TabularMdp::new(self.gamma, self.initial_state, self.transition, rewards)?;
        if mdp.n_states() != self.n_states || mdp.n_actions() != self.n_actions {
            return Err(MdpError::BadShape { state: self.n_states, action: self.n_actions });
        }
        let features = match self.features {
            None => None,
            Some(f) => {
                let map = FeatureMap::new(f.phi, f.feature_bound, f.param_bound)?;
                if map.dim() != f.d {
                    return Err(MdpError::FeatureShape { state: 0, action: 0 });
                }
                map.matches_mdp(&mdp)?;
                Some(map)
            }
        };
        Ok((mdp, features))
    }
}
