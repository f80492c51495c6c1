//! Simulator access models with query metering and keyed random streams.
//!
//! Two access protocols are provided. [`LocalAccessSimulator`] only accepts
//! queries at states it has already revealed (plus the initial state) and is
//! the protocol the planner is written against; [`RandomAccessSimulator`]
//! accepts any state and exists for generative-model experiments.
//!
//! Randomness is counter-based: every query draws from a ChaCha stream
//! keyed by `(seed, stream, step)`, where the stream index is allocated per
//! episode. Rollouts therefore reproduce bit-identically regardless of how
//! episodes are scheduled across workers, as long as episode indices match.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mdp::{RewardSpec, TabularMdp, TablePolicy};

/// Stream id used for ad-hoc queries issued outside any episode.
const ADHOC_STREAM: u64 = u64::MAX;
/// Fixed per-step budget of ChaCha 32-bit words (2 words per f64 draw).
const WORDS_PER_STEP: u128 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    /// The local-access contract was violated: the queried state has never
    /// been revealed by the simulator. A planner must never trigger this.
    #[error("local-access violation: state {state} has not been seen")]
    AccessViolation { state: usize },
    #[error("query index out of range: state {state}, action {action}")]
    IndexOutOfRange { state: usize, action: usize },
}

/// Errors surfaced while evaluating a policy during a rollout. Table
/// policies never fail; replayed recursive policies can report numerical
/// breakdown in their rank-one downdates.
#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("rank-one downdate denominator {denom:e} too small during policy replay")]
    NumericalBreakdown { denom: f64 },
    #[error("replay mask references a pair absent from the scratch core set")]
    MaskInconsistency,
    #[error("replayed inverse drifted {drift:e} from the direct inverse")]
    ReplayDrift { drift: f64 },
    #[error("state {state} out of range for policy evaluation")]
    StateOutOfRange { state: usize },
}

/// Action source followed during rollouts. Evaluation may mutate internal
/// scratch (memoization, replay state), hence `&mut self`.
pub trait RolloutPolicy {
    fn action(&mut self, state: usize) -> Result<usize, PolicyError>;
}

impl RolloutPolicy for TablePolicy {
    fn action(&mut self, state: usize) -> Result<usize, PolicyError> {
        if state >= self.n_states() {
            return Err(PolicyError::StateOutOfRange { state });
        }
        Ok(TablePolicy::action(self, state))
    }
}

#[derive(Debug, Clone)]
struct SimCore {
    rng: ChaCha8Rng,
    stream: u64,
    step: u64,
    episodes_started: u64,
    query_count: u64,
}

impl SimCore {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            stream: ADHOC_STREAM,
            step: 0,
            episodes_started: 0,
            query_count: 0,
        }
    }

    fn start_episode(&mut self) -> u64 {
        let idx = self.episodes_started;
        self.episodes_started += 1;
        self.set_episode(idx);
        idx
    }

    fn set_episode(&mut self, idx: u64) {
        self.stream = idx;
        self.step = 0;
        self.episodes_started = self.episodes_started.max(idx + 1);
    }

    /// Sample one (next_state, reward) step keyed by (seed, stream, step).
    fn sample(&mut self, mdp: &TabularMdp, state: usize, action: usize) -> (usize, f64) {
        self.rng.set_stream(self.stream);
        self.rng.set_word_pos(self.step as u128 * WORDS_PER_STEP);
        self.step += 1;
        self.query_count += 1;

        let u: f64 = self.rng.random();
        let row = mdp.transition_row(state, action);
        let mut next = row.len() - 1;
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }

        let reward = match mdp.reward(state, action) {
            RewardSpec::Deterministic(v) => v,
            RewardSpec::Bernoulli(p) => {
                let ur: f64 = self.rng.random();
                if ur < p {
                    1.0
                } else {
                    0.0
                }
            }
        };
        (next, reward)
    }
}

/// Shared simulator surface: metered sampling plus episode stream control.
pub trait Simulator {
    fn mdp(&self) -> &TabularMdp;

    /// Sample a transition and reward at `(state, action)`. Increments the
    /// query counter by exactly one on acceptance; rejected queries consume
    /// no randomness and no budget.
    fn query(&mut self, state: usize, action: usize) -> Result<(usize, f64), SimError>;

    fn query_count(&self) -> u64;

    /// Allocate the next episode stream and make it active. Returns the
    /// episode index backing the stream.
    fn start_episode(&mut self) -> u64;

    /// Make an explicit episode stream active (for parallel workers that
    /// partition episode indices among themselves).
    fn start_episode_at(&mut self, index: u64);
}

/// Simulator enforcing the local-access protocol: a query at `s` is accepted
/// only if `s` is the initial state or was returned by an earlier query.
#[derive(Debug, Clone)]
pub struct LocalAccessSimulator<'m> {
    mdp: &'m TabularMdp,
    seen: Vec<bool>,
    core: SimCore,
}

impl<'m> LocalAccessSimulator<'m> {
    pub fn new(mdp: &'m TabularMdp, seed: u64) -> Self {
        let mut seen = vec![false; mdp.n_states()];
        seen[mdp.initial_state()] = true;
        Self { mdp, seen, core: SimCore::new(seed) }
    }

    pub fn is_seen(&self, state: usize) -> bool {
        state < self.seen.len() && self.seen[state]
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|&&b| b).count()
    }

    /// The simulated MDP with the simulator's own borrow lifetime, so the
    /// model stays usable while the simulator is mutably driven.
    pub fn mdp_ref(&self) -> &'m TabularMdp {
        self.mdp
    }
}

impl Simulator for LocalAccessSimulator<'_> {
    fn mdp(&self) -> &TabularMdp {
        self.mdp
    }

    fn query(&mut self, state: usize, action: usize) -> Result<(usize, f64), SimError> {
        if !self.mdp.in_range(state, action) {
            return Err(SimError::IndexOutOfRange { state, action });
        }
        if !self.seen[state] {
            return Err(SimError::AccessViolation { state });
        }
        let (next, reward) = self.core.sample(self.mdp, state, action);
        self.seen[next] = true;
        Ok((next, reward))
    }

    fn query_count(&self) -> u64 {
        self.core.query_count
    }

    fn start_episode(&mut self) -> u64 {
        self.core.start_episode()
    }

    fn start_episode_at(&mut self, index: u64) {
        self.core.set_episode(index);
    }
}

/// Generative-model simulator: any in-range state-action pair is accepted.
#[derive(Debug, Clone)]
pub struct RandomAccessSimulator<'m> {
    mdp: &'m TabularMdp,
    core: SimCore,
}

impl<'m> RandomAccessSimulator<'m> {
    pub fn new(mdp: &'m TabularMdp, seed: u64) -> Self {
        Self { mdp, core: SimCore::new(seed) }
    }
}

impl Simulator for RandomAccessSimulator<'_> {
    fn mdp(&self) -> &TabularMdp {
        self.mdp
    }

    fn query(&mut self, state: usize, action: usize) -> Result<(usize, f64), SimError> {
        if !self.mdp.in_range(state, action) {
            return Err(SimError::IndexOutOfRange { state, action });
        }
        Ok(self.core.sample(self.mdp, state, action))
    }

    fn query_count(&self) -> u64 {
        self.core.query_count
    }

    fn start_episode(&mut self) -> u64 {
        self.core.start_episode()
    }

    fn start_episode_at(&mut self, index: u64) {
        self.core.set_episode(index);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutOutcome {
    /// Completed the full horizon; one reward per step, in step order.
    Trajectory(Vec<f64>),
    /// Hit a state rejected by the filter before acting there.
    Escaped(usize),
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Roll `(s, a)` then follow `policy` for up to `horizon - 1` further steps.
///
/// Visited states are checked against `seen_filter` before an action is
/// taken there; the first rejected state aborts the episode. The start state
/// itself is not checked. Every accepted simulator step counts one query.
pub fn sample_episode_prefix<S, P, F>(
    sim: &mut S,
    state: usize,
    action: usize,
    policy: &mut P,
    horizon: usize,
    seen_filter: &F,
) -> Result<RolloutOutcome, RolloutError>
where
    S: Simulator,
    P: RolloutPolicy + ?Sized,
    F: Fn(usize) -> bool + ?Sized,
{
    let mut rewards = Vec::with_capacity(horizon);
    let (mut current, r0) = sim.query(state, action)?;
    rewards.push(r0);
    for _ in 1..horizon {
        if !seen_filter(current) {
            return Ok(RolloutOutcome::Escaped(current));
        }
        let a = policy.action(current)?;
        let (next, r) = sim.query(current, a)?;
        rewards.push(r);
        current = next;
    }
    Ok(RolloutOutcome::Trajectory(rewards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardSpec;
    use proptest::prelude::*;

    fn one_state(reward: RewardSpec) -> TabularMdp {
        TabularMdp::new(0.9, 0, vec![vec![vec![1.0]]], vec![vec![reward]]).unwrap()
    }

    fn two_chain() -> TabularMdp {
        // s0 -> s1 deterministically, s1 absorbing
        TabularMdp::new(
            0.5,
            0,
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![
                vec![RewardSpec::Deterministic(1.0)],
                vec![RewardSpec::Deterministic(0.0)],
            ],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_one_state_query() {
        let mdp = one_state(RewardSpec::Deterministic(1.0));
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        assert_eq!(sim.query_count(), 0);
        let (next, r) = sim.query(0, 0).unwrap();
        assert_eq!((next, r), (0, 1.0));
        assert_eq!(sim.query_count(), 1);
    }

    #[test]
    fn unseen_state_is_rejected() {
        let mdp = two_chain();
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        assert_eq!(sim.query(1, 0), Err(SimError::AccessViolation { state: 1 }));
        assert_eq!(sim.query_count(), 0);
        // After visiting s1 it becomes queryable.
        sim.query(0, 0).unwrap();
        assert!(sim.is_seen(1));
        sim.query(1, 0).unwrap();
        assert_eq!(sim.query_count(), 2);
    }

    #[test]
    fn out_of_range_is_an_index_error() {
        let mdp = one_state(RewardSpec::Deterministic(1.0));
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        assert_eq!(sim.query(0, 3), Err(SimError::IndexOutOfRange { state: 0, action: 3 }));
        assert_eq!(sim.query(4, 0), Err(SimError::IndexOutOfRange { state: 4, action: 0 }));
    }

    #[test]
    fn bernoulli_reward_monte_carlo_mean() {
        let mdp = one_state(RewardSpec::Bernoulli(0.5));
        let mut sim = LocalAccessSimulator::new(&mdp, 123);
        let mut total = 0.0;
        for ep in 0..10_000u64 {
            sim.start_episode_at(ep);
            let (_, r) = sim.query(0, 0).unwrap();
            total += r;
        }
        let mean = total / 10_000.0;
        assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
        assert_eq!(sim.query_count(), 10_000);
    }

    #[test]
    fn rollout_one_state_three_steps() {
        let mdp = one_state(RewardSpec::Deterministic(1.0));
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        let mut policy = TablePolicy::constant(1, 0);
        let out = sample_episode_prefix(&mut sim, 0, 0, &mut policy, 3, &|_| true).unwrap();
        assert_eq!(out, RolloutOutcome::Trajectory(vec![1.0, 1.0, 1.0]));
        assert_eq!(sim.query_count(), 3);
    }

    #[test]
    fn rollout_escapes_on_filtered_state() {
        let mdp = two_chain();
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        let mut policy = TablePolicy::constant(2, 0);
        let out = sample_episode_prefix(&mut sim, 0, 0, &mut policy, 5, &|s| s == 0).unwrap();
        assert_eq!(out, RolloutOutcome::Escaped(1));
        assert_eq!(sim.query_count(), 1);
    }

    #[test]
    fn rollout_horizon_one_is_a_single_query() {
        let mdp = two_chain();
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        let mut policy = TablePolicy::constant(2, 0);
        let out = sample_episode_prefix(&mut sim, 0, 0, &mut policy, 1, &|_| false).unwrap();
        assert_eq!(out, RolloutOutcome::Trajectory(vec![1.0]));
        assert_eq!(sim.query_count(), 1);
    }

    #[test]
    fn seen_set_only_grows_and_contains_initial() {
        let mdp = two_chain();
        let mut sim = LocalAccessSimulator::new(&mdp, 7);
        assert!(sim.is_seen(0));
        let before = sim.seen_count();
        sim.query(0, 0).unwrap();
        assert!(sim.seen_count() >= before);
        assert!(sim.is_seen(0));
    }

    fn random_walk_mdp() -> TabularMdp {
        TabularMdp::new(
            0.9,
            0,
            vec![
                vec![vec![0.5, 0.25, 0.25], vec![0.2, 0.3, 0.5]],
                vec![vec![0.1, 0.8, 0.1], vec![0.4, 0.4, 0.2]],
                vec![vec![0.3, 0.3, 0.4], vec![0.0, 0.5, 0.5]],
            ],
            vec![
                vec![RewardSpec::Bernoulli(0.3), RewardSpec::Deterministic(0.5)],
                vec![RewardSpec::Bernoulli(0.9), RewardSpec::Deterministic(0.1)],
                vec![RewardSpec::Deterministic(1.0), RewardSpec::Bernoulli(0.5)],
            ],
        )
        .unwrap()
    }

    proptest! {
        // Two simulators with equal seeds and equal call sequences are
        // indistinguishable, and the meter counts accepted calls exactly.
        #[test]
        fn determinism_and_metering(seed in 0u64..1000, calls in proptest::collection::vec((0usize..3, 0usize..2, proptest::bool::ANY), 1..40)) {
            let mdp = random_walk_mdp();
            let mut a = RandomAccessSimulator::new(&mdp, seed);
            let mut b = RandomAccessSimulator::new(&mdp, seed);
            let mut accepted = 0u64;
            for (s, act, new_episode) in calls {
                if new_episode {
                    let ia = a.start_episode();
                    let ib = b.start_episode();
                    prop_assert_eq!(ia, ib);
                }
                let ra = a.query(s, act);
                let rb = b.query(s, act);
                prop_assert_eq!(&ra, &rb);
                if ra.is_ok() {
                    accepted += 1;
                }
            }
            prop_assert_eq!(a.query_count(), accepted);
            prop_assert_eq!(b.query_count(), accepted);
        }

        // Episode streams are position-keyed: replaying the same episode
        // index reproduces the same draws even after other episodes ran.
        #[test]
        fn episode_streams_are_replayable(seed in 0u64..1000) {
            let mdp = random_walk_mdp();
            let mut sim = LocalAccessSimulator::new(&mdp, seed);
            sim.start_episode_at(5);
            let first = sim.query(0, 0).unwrap();
            sim.start_episode_at(9);
            let _ = sim.query(0, 1).unwrap();
            sim.start_episode_at(5);
            let replay = sim.query(0, 0).unwrap();
            prop_assert_eq!(first, replay);
        }
    }
}
