//! Truncated Monte-Carlo action-value estimation with escape detection.
//!
//! `measure` rolls a fixed number of fixed-horizon episodes from a
//! state-action pair and averages the truncated discounted returns. If any
//! rollout reaches a state outside the caller's membership predicate before
//! acting there, estimation aborts immediately and reports that state.

use thiserror::Error;

use crate::sim::{sample_episode_prefix, RolloutError, RolloutOutcome, RolloutPolicy, Simulator};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid estimation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureOutcome {
    /// Mean truncated discounted return over all episodes.
    Success { q_tilde: f64 },
    /// A rollout left the membership predicate at this state.
    Discover { state: usize },
}

/// Effective horizon `ceil(ln((omega/4)(1-gamma)) / ln gamma)`.
pub fn horizon(omega: f64, gamma: f64) -> Result<usize, MeasureError> {
    if omega.is_nan() || omega <= 0.0 || gamma.is_nan() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(MeasureError::InvalidParams(format!(
            "need omega > 0 and gamma in (0,1), got omega={omega}, gamma={gamma}"
        )));
    }
    let target = (omega / 4.0) * (1.0 - gamma);
    if target >= 1.0 {
        return Err(MeasureError::InvalidParams(format!(
            "(omega/4)(1-gamma) = {target} must be below 1"
        )));
    }
    Ok((target.ln() / gamma.ln()).ceil() as usize)
}

/// Episode count `ceil((omega/4)^-2 (1-gamma)^-2 ln(2/zeta) / 2)`.
pub fn num_episodes(omega: f64, gamma: f64, zeta: f64) -> Result<usize, MeasureError> {
    if zeta.is_nan() || zeta <= 0.0 || zeta > 1.0 {
        return Err(MeasureError::InvalidParams(format!(
            "failure probability must lie in (0,1], got {zeta}"
        )));
    }
    if omega.is_nan() || omega <= 0.0 || gamma.is_nan() || gamma <= 0.0 || gamma >= 1.0 {
        return Err(MeasureError::InvalidParams(format!(
            "need omega > 0 and gamma in (0,1), got omega={omega}, gamma={gamma}"
        )));
    }
    let scale = (4.0 / omega) * (4.0 / omega) / ((1.0 - gamma) * (1.0 - gamma));
    Ok((scale * (2.0 / zeta).ln() / 2.0).ceil() as usize)
}

#[derive(Debug, Clone)]
pub struct MeasureParams {
    pub omega: f64,
    pub zeta: f64,
    /// Overrides the episode count for smoke tests. Using it voids the
    /// estimation guarantee; harness records carry an `unsound` marker.
    pub n_override: Option<usize>,
}

impl MeasureParams {
    pub fn new(omega: f64, zeta: f64) -> Self {
        Self { omega, zeta, n_override: None }
    }
}

/// Estimate `q^pi(s, a)` by `n` episodes of length `H`, or report the first
/// state escaping `s_prime`.
///
/// Episode randomness is keyed by the simulator's episode counter, so a
/// serial run and any episode-partitioned parallel run produce bit-identical
/// estimates under the fixed (episode-order) reduction.
pub fn measure<S, P, F>(
    sim: &mut S,
    state: usize,
    action: usize,
    policy: &mut P,
    s_prime: &F,
    params: &MeasureParams,
) -> Result<MeasureOutcome, MeasureError>
where
    S: Simulator,
    P: RolloutPolicy + ?Sized,
    F: Fn(usize) -> bool + ?Sized,
{
    let h = horizon(params.omega, sim.mdp().gamma())?;
    let n = match params.n_override {
        Some(0) => {
            return Err(MeasureError::InvalidParams("episode override must be positive".into()))
        }
        Some(n) => n,
        None => num_episodes(params.omega, sim.mdp().gamma(), params.zeta)?,
    };

    let gamma = sim.mdp().gamma();
    let mut discounts = Vec::with_capacity(h);
    let mut w = 1.0;
    for _ in 0..h {
        discounts.push(w);
        w *= gamma;
    }

    let mut total = 0.0;
    for _ in 0..n {
        sim.start_episode();
        match sample_episode_prefix(sim, state, action, policy, h, s_prime)? {
            RolloutOutcome::Escaped(escapee) => {
                return Ok(MeasureOutcome::Discover { state: escapee })
            }
            RolloutOutcome::Trajectory(rewards) => {
                total += rewards
                    .iter()
                    .zip(discounts.iter())
                    .map(|(&r, &d)| r * d)
                    .sum::<f64>();
            }
        }
    }
    Ok(MeasureOutcome::Success { q_tilde: total / n as f64 })
}
