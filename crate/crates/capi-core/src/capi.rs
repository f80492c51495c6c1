//! Policy-update operators for approximate policy iteration, with and
//! without the confidence gate, plus the iteration driver and the
//! noisy-exact estimation oracles used to exercise it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exact::{exact_values, ExactError};
use crate::mdp::{QTable, TabularMdp, TablePolicy};

/// Greedy policy update: `pi(s) = argmax_a q_hat(s,a)`, ties to the lowest
/// action index.
pub fn api_update(q_hat: &QTable) -> TablePolicy {
    let mut actions = Vec::with_capacity(q_hat.n_states());
    for s in 0..q_hat.n_states() {
        actions.push(q_hat.argmax_row(s));
    }
    TablePolicy::new(actions, q_hat.n_actions()).expect("argmax is in range")
}

/// Confidence-gated policy update. Outside the fixed set, the policy
/// switches to the greedy action only when the estimated improvement clears
/// the `2 * omega` uncertainty band; otherwise (and on the fixed set) it
/// keeps the previous action.
pub fn capi_update<F>(
    q_hat: &QTable,
    prev: &TablePolicy,
    s_fix: &F,
    omega: f64,
) -> TablePolicy
where
    F: Fn(usize) -> bool + ?Sized,
{
    let mut next = prev.clone();
    for s in 0..q_hat.n_states() {
        if s_fix(s) {
            continue;
        }
        let best = q_hat.argmax_row(s);
        let held = q_hat.get(s, prev.action(s));
        if held + omega < q_hat.get(s, best) - omega {
            next.set_action(s, best);
        }
    }
    next
}

/// Iteration count `ceil(ln omega / ln gamma)`, clamped to at least one
/// round (the ratio is nonpositive for omega >= 1, where a single round is
/// used).
pub fn auto_iterations(omega: f64, gamma: f64) -> usize {
    if omega >= 1.0 {
        return 1;
    }
    let raw = (omega.ln() / gamma.ln()).ceil();
    (raw as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationCount {
    /// `ceil(ln omega / ln gamma)` rounds.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Api,
    Capi,
}

/// Run `I` rounds of estimate-then-update starting from `initial`.
pub fn run_capi<E, X, F>(
    mut estimate: E,
    gamma: f64,
    omega: f64,
    s_fix: &F,
    initial: TablePolicy,
    iterations: IterationCount,
    rule: UpdateRule,
) -> Result<TablePolicy, X>
where
    E: FnMut(&TablePolicy) -> Result<QTable, X>,
    F: Fn(usize) -> bool + ?Sized,
{
    let rounds = match iterations {
        IterationCount::Auto => auto_iterations(omega, gamma),
        IterationCount::Fixed(i) => i,
    };
    let mut policy = initial;
    for _ in 0..rounds {
        let q_hat = estimate(&policy)?;
        policy = match rule {
            UpdateRule::Api => api_update(&q_hat),
            UpdateRule::Capi => capi_update(&q_hat, &policy, s_fix, omega),
        };
    }
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    /// Independent uniform noise on `[-omega, omega]` per entry per call.
    Uniform,
    /// Worst-case-within-band perturbation: `+omega` on the held action,
    /// `-omega` on the (exact) greedy action.
    Adversarial,
}

/// Estimation oracle returning the exact action values of the queried
/// policy perturbed within the `omega` band, for stress-testing the update
/// operators against their stated guarantees.
pub fn noisy_exact_oracle(
    mdp: &TabularMdp,
    omega: f64,
    noise: NoiseModel,
    seed: u64,
) -> impl FnMut(&TablePolicy) -> Result<QTable, ExactError> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |policy: &TablePolicy| {
        let values = exact_values(mdp, policy)?;
        let mut q = values.q.clone();
        match noise {
            NoiseModel::Uniform => {
                for s in 0..q.n_states() {
                    for a in 0..q.n_actions() {
                        let u: f64 = rng.random();
                        q.set(s, a, q.get(s, a) + omega * (2.0 * u - 1.0));
                    }
                }
            }
            NoiseModel::Adversarial => {
                for s in 0..q.n_states() {
                    let held = policy.action(s);
                    let best = values.q.argmax_row(s);
                    q.set(s, held, q.get(s, held) + omega);
                    if best != held {
                        q.set(s, best, q.get(s, best) - omega);
                    }
                }
            }
        }
        Ok(q)
    }
}
