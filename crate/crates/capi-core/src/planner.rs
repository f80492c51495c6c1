//! Local-access planner: leveled core sets with confidence-gated policy
//! updates, chained policy records, and the replay evaluator for the
//! recursively defined output policy.
//!
//! The planner never materializes its policies as dense tables. Each policy
//! update appends one construction record (a weight vector, the level, the
//! two parent policy indices, and bitmasks of the two relevant core sets);
//! evaluation replays the chain of records, downdating scratch Gram
//! inverses to each record's core-set masks. An optional debug mode
//! maintains dense snapshots alongside and certifies every replayed action,
//! every incremental inverse, and the per-level optimality schedule against
//! the exact solver.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coreset::{
    d_tilde, ridge_lambda, sherman_morrison_downdate, CoreSet, CoreSetError, COVER_SLACK,
    INVERSE_DRIFT_TOL,
};
use crate::exact::{exact_optimal, exact_values, ExactError, PolicyValues};
use crate::measure::{self, measure, MeasureError, MeasureOutcome, MeasureParams};
use crate::mdp::{FeatureMap, TablePolicy};
use crate::sim::{LocalAccessSimulator, PolicyError, RolloutPolicy, Simulator};

/// Tolerance used by debug-mode optimality certification.
pub const CERTIFY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("query budget exceeded: {queries} queries against cap {cap:.0}")]
    QueryBudgetExceeded { queries: u64, cap: f64 },
    #[error("debug certification failed: {0}")]
    Certification(String),
    #[error("no uncovered action at discovered state {state}: cover chain out of sync")]
    CoverInconsistency { state: usize },
    #[error("planner invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    CoreSet(#[from] CoreSetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Exact(#[from] ExactError),
}

#[derive(Debug, Error)]
pub enum PolicyFileError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid recursive policy file: {0}")]
    Invalid(String),
}

// --- bitmasks over the pair registry ---------------------------------------

/// Growable bitmask over registry indices. Bits beyond the stored length
/// read as unset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitmask {
    bits: Vec<u64>,
}

impl Bitmask {
    pub fn new() -> Self {
        Self { bits: Vec::new() }
    }

    pub fn ones(n: usize) -> Self {
        let mut mask = Self::new();
        for i in 0..n {
            mask.set(i);
        }
        mask
    }

    pub fn set(&mut self, index: usize) {
        let word = index / 64;
        if word >= self.bits.len() {
            self.bits.resize(word + 1, 0);
        }
        self.bits[word] |= 1u64 << (index % 64);
    }

    pub fn clear(&mut self, index: usize) {
        let word = index / 64;
        if word < self.bits.len() {
            self.bits[word] &= !(1u64 << (index % 64));
        }
    }

    pub fn get(&self, index: usize) -> bool {
        let word = index / 64;
        word < self.bits.len() && (self.bits[word] >> (index % 64)) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Hex encoding: byte `j` covers indices `8j..8j+8`, least significant
    /// bit first; `n_bits` fixes the encoded width.
    pub fn to_hex(&self, n_bits: usize) -> String {
        let n_bytes = n_bits.div_ceil(8);
        let mut bytes = vec![0u8; n_bytes];
        for i in 0..n_bits {
            if self.get(i) {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        hex::encode(bytes)
    }

    pub fn from_hex(text: &str) -> Result<Self, PolicyFileError> {
        let bytes = hex::decode(text)
            .map_err(|e| PolicyFileError::Invalid(format!("bad mask hex: {e}")))?;
        let mut mask = Self::new();
        for (j, byte) in bytes.iter().enumerate() {
            for bit in 0..8 {
                if (byte >> bit) & 1 == 1 {
                    mask.set(j * 8 + bit);
                }
            }
        }
        Ok(mask)
    }
}

// --- recursive policy -------------------------------------------------------

/// One core-set pair with its cached feature vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub state: usize,
    pub action: usize,
    pub phi: Vec<f64>,
}

/// One policy construction: the ridge weight vector fitted at `level`, the
/// indices of the two parent policies (`None` is the base constant policy),
/// and registry bitmasks of the level's core set and the next level's core
/// set as they stood at construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecord {
    pub theta: Vec<f64>,
    pub level: usize,
    pub parent_update: Option<usize>,
    pub parent_merge: Option<usize>,
    pub mask_level: Bitmask,
    pub mask_next: Bitmask,
}

/// Chained policy produced by the planner. Storage is the registry feature
/// cache, the record list, and the final Gram inverse; evaluation replays
/// the records.
#[derive(Debug, Clone)]
pub struct RecursivePolicy {
    dim: usize,
    omega: f64,
    lambda: f64,
    num_levels: usize,
    registry: Vec<RegistryEntry>,
    records: Vec<PolicyRecord>,
    root: Option<usize>,
    final_v_inverse: DMatrix<f64>,
}

impl RecursivePolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        omega: f64,
        lambda: f64,
        num_levels: usize,
        registry: Vec<RegistryEntry>,
        records: Vec<PolicyRecord>,
        root: Option<usize>,
        final_v_inverse: DMatrix<f64>,
    ) -> Result<Self, PolicyFileError> {
        if final_v_inverse.nrows() != dim || final_v_inverse.ncols() != dim {
            return Err(PolicyFileError::Invalid("final inverse has wrong shape".into()));
        }
        for (i, entry) in registry.iter().enumerate() {
            if entry.phi.len() != dim {
                return Err(PolicyFileError::Invalid(format!("registry entry {i} has wrong dimension")));
            }
        }
        for (i, rec) in records.iter().enumerate() {
            if rec.theta.len() != dim {
                return Err(PolicyFileError::Invalid(format!("record {i} theta has wrong dimension")));
            }
            if rec.level + 1 >= num_levels {
                return Err(PolicyFileError::Invalid(format!("record {i} level {} out of range", rec.level)));
            }
            for parent in [rec.parent_update, rec.parent_merge].into_iter().flatten() {
                if parent >= i {
                    return Err(PolicyFileError::Invalid(format!("record {i} parent {parent} not earlier")));
                }
            }
        }
        if let Some(r) = root {
            if r >= records.len() {
                return Err(PolicyFileError::Invalid(format!("root {r} out of range")));
            }
        }
        Ok(Self { dim, omega, lambda, num_levels, registry, records, root, final_v_inverse })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn registry(&self) -> &[RegistryEntry] {
        &self.registry
    }

    pub fn records(&self) -> &[PolicyRecord] {
        &self.records
    }

    pub fn root(&self) -> Option<usize> {
        self.root
    }

    pub fn final_v_inverse(&self) -> &DMatrix<f64> {
        &self.final_v_inverse
    }

    pub fn to_json(&self) -> String {
        let n = self.registry.len();
        let file = RecursivePolicyFile {
            d: self.dim,
            omega: self.omega,
            lambda: self.lambda,
            levels: self.num_levels,
            registry: self.registry.clone(),
            records: self
                .records
                .iter()
                .map(|r| PolicyRecordJson {
                    theta: r.theta.clone(),
                    level: r.level,
                    parent_update: r.parent_update,
                    parent_merge: r.parent_merge,
                    mask_level: r.mask_level.to_hex(n),
                    mask_next: r.mask_next.to_hex(n),
                })
                .collect(),
            root: self.root,
            final_v_inverse: self.final_v_inverse.transpose().as_slice().to_vec(),
        };
        serde_json::to_string(&file).expect("policy files serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyFileError> {
        let file: RecursivePolicyFile = serde_json::from_str(text)?;
        if file.final_v_inverse.len() != file.d * file.d {
            return Err(PolicyFileError::Invalid("final inverse has wrong length".into()));
        }
        let final_v_inverse = DMatrix::from_row_slice(file.d, file.d, &file.final_v_inverse);
        let records = file
            .records
            .into_iter()
            .map(|r| {
                Ok(PolicyRecord {
                    theta: r.theta,
                    level: r.level,
                    parent_update: r.parent_update,
                    parent_merge: r.parent_merge,
                    mask_level: Bitmask::from_hex(&r.mask_level)?,
                    mask_next: Bitmask::from_hex(&r.mask_next)?,
                })
            })
            .collect::<Result<Vec<_>, PolicyFileError>>()?;
        Self::new(
            file.d,
            file.omega,
            file.lambda,
            file.levels,
            file.registry,
            records,
            file.root,
            final_v_inverse,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyRecordJson {
    theta: Vec<f64>,
    level: usize,
    parent_update: Option<usize>,
    parent_merge: Option<usize>,
    mask_level: String,
    mask_next: String,
}

#[derive(Serialize, Deserialize)]
struct RecursivePolicyFile {
    d: usize,
    omega: f64,
    lambda: f64,
    levels: usize,
    registry: Vec<RegistryEntry>,
    records: Vec<PolicyRecordJson>,
    root: Option<usize>,
    // row-major d x d
    final_v_inverse: Vec<f64>,
}

// --- replay evaluation ------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn memo_key(record: Option<usize>) -> u64 {
    match record {
        None => 0,
        Some(i) => i as u64 + 1,
    }
}

struct LevelScratch {
    members: Bitmask,
    v_inv: DMatrix<f64>,
}

struct ReplayWalk<'a> {
    registry_phis: &'a [DVector<f64>],
    features: &'a FeatureMap,
    lambda: f64,
    scratch: Vec<Option<LevelScratch>>,
    verify: bool,
}

struct DecisionFrame {
    record: usize,
    covered_here: bool,
    best_action: usize,
    best_value: f64,
}

/// (state, replayed action, expected action) of a failed snapshot check.
type ReplayMismatch = (usize, usize, usize);

impl<'a> ReplayWalk<'a> {
    /// Downdate the scratch state of `level` to `target` membership.
    fn sync_level(
        &mut self,
        source: &dyn Fn(usize) -> (Bitmask, DMatrix<f64>),
        level: usize,
        target: &Bitmask,
    ) -> Result<(), PolicyError> {
        if self.scratch[level].is_none() {
            let (members, v_inv) = source(level);
            self.scratch[level] = Some(LevelScratch { members, v_inv });
        }
        let scratch = self.scratch[level].as_mut().expect("just materialized");
        for idx in 0..self.registry_phis.len() {
            if target.get(idx) && !scratch.members.get(idx) {
                return Err(PolicyError::MaskInconsistency);
            }
            if scratch.members.get(idx) && !target.get(idx) {
                sherman_morrison_downdate(&mut scratch.v_inv, &self.registry_phis[idx]).map_err(
                    |e| match e {
                        CoreSetError::NumericalBreakdown { denom } => {
                            PolicyError::NumericalBreakdown { denom }
                        }
                        _ => PolicyError::MaskInconsistency,
                    },
                )?;
                scratch.members.clear(idx);
            }
        }
        if self.verify {
            let d = scratch.v_inv.nrows();
            let mut gram = DMatrix::<f64>::identity(d, d) * self.lambda;
            for (idx, phi) in self.registry_phis.iter().enumerate() {
                if target.get(idx) {
                    gram.ger(1.0, phi, phi, 1.0);
                }
            }
            let direct = gram
                .clone()
                .try_inverse()
                .ok_or(PolicyError::MaskInconsistency)?;
            let residual = (&gram * &scratch.v_inv - DMatrix::identity(d, d)).norm();
            let relative = (&direct - &scratch.v_inv).norm() / direct.norm().max(1.0);
            let drift = residual.max(relative);
            if drift > INVERSE_DRIFT_TOL {
                return Err(PolicyError::ReplayDrift { drift });
            }
        }
        Ok(())
    }

    fn state_covered(&self, level: usize, state: usize) -> Result<bool, PolicyError> {
        let scratch = self.scratch[level].as_ref().expect("synced before use");
        if state >= self.features.n_states() {
            return Err(PolicyError::StateOutOfRange { state });
        }
        for a in 0..self.features.n_actions() {
            let phi = DVector::from_column_slice(self.features.phi(state, a));
            let norm_sq = phi.dot(&(&scratch.v_inv * &phi));
            if norm_sq > 1.0 + COVER_SLACK {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Replay the record chain to evaluate a policy handle at one state.
///
/// Walks parent links from `root`, downdating per-level scratch inverses to
/// each record's stored masks: merge branches hop to the previous next-level
/// policy, update branches stack a confidence-gated decision that is applied
/// once the parent's action is known. Results are memoized per
/// (record, state); the base of every chain is the constant action-0 policy.
#[allow(clippy::too_many_arguments)]
fn replay_action(
    records: &[PolicyRecord],
    registry_phis: &[DVector<f64>],
    features: &FeatureMap,
    omega: f64,
    lambda: f64,
    num_levels: usize,
    source: &dyn Fn(usize) -> (Bitmask, DMatrix<f64>),
    verify: bool,
    root: Option<usize>,
    state: usize,
    memo: &mut HashMap<(u64, usize), usize>,
) -> Result<usize, PolicyError> {
    if state >= features.n_states() {
        return Err(PolicyError::StateOutOfRange { state });
    }
    if let Some(&cached) = memo.get(&(memo_key(root), state)) {
        return Ok(cached);
    }

    let mut walk = ReplayWalk {
        registry_phis,
        features,
        lambda,
        scratch: (0..num_levels).map(|_| None).collect(),
        verify,
    };

    // Descend: record the chain, stacking a decision frame per update hop.
    let mut chain: Vec<(usize, Option<DecisionFrame>)> = Vec::new();
    let mut cursor = root;
    let mut action = loop {
        if let Some(&cached) = memo.get(&(memo_key(cursor), state)) {
            break cached;
        }
        let Some(index) = cursor else {
            break 0;
        };
        let record = &records[index];
        walk.sync_level(source, record.level, &record.mask_level)?;
        walk.sync_level(source, record.level + 1, &record.mask_next)?;
        if walk.state_covered(record.level + 1, state)? {
            chain.push((index, None));
            cursor = record.parent_merge;
            continue;
        }
        let covered_here = walk.state_covered(record.level, state)?;
        let mut best_action = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        for a in 0..features.n_actions() {
            let value = dot(features.phi(state, a), &record.theta);
            if value > best_value {
                best_value = value;
                best_action = a;
            }
        }
        chain.push((index, Some(DecisionFrame { record: index, covered_here, best_action, best_value })));
        cursor = record.parent_update;
    };

    // Unwind: apply the gated decisions innermost-first, memoizing every
    // record's resolved action along the way.
    for (index, frame) in chain.iter().rev() {
        if let Some(frame) = frame {
            let held = dot(features.phi(state, action), &records[frame.record].theta);
            if frame.covered_here && held + omega < frame.best_value - omega {
                action = frame.best_action;
            }
        }
        memo.insert((memo_key(Some(*index)), state), action);
    }
    memo.insert((memo_key(root), state), action);
    Ok(action)
}

/// Replay evaluator over a stored recursive policy, initialized from the
/// saved final Gram inverse and the full registry (every level's core set
/// equals the registry once the planner returns).
pub struct PolicyEvaluator<'a> {
    policy: &'a RecursivePolicy,
    features: &'a FeatureMap,
    registry_phis: Vec<DVector<f64>>,
    full_mask: Bitmask,
    memo: HashMap<(u64, usize), usize>,
    verify: bool,
}

impl<'a> PolicyEvaluator<'a> {
    pub fn new(policy: &'a RecursivePolicy, features: &'a FeatureMap) -> Result<Self, PolicyFileError> {
        if features.dim() != policy.dim {
            return Err(PolicyFileError::Invalid(format!(
                "feature dimension {} does not match policy dimension {}",
                features.dim(),
                policy.dim
            )));
        }
        let registry_phis = policy
            .registry
            .iter()
            .map(|e| DVector::from_column_slice(&e.phi))
            .collect();
        Ok(Self {
            policy,
            features,
            registry_phis,
            full_mask: Bitmask::ones(policy.registry.len()),
            memo: HashMap::new(),
            verify: false,
        })
    }

    /// Verify every replay downdate against a directly inverted Gram matrix.
    pub fn set_verify(&mut self, verify: bool) {
        self.verify = verify;
    }

    pub fn action(&mut self, state: usize) -> Result<usize, PolicyError> {
        replay_action(
            &self.policy.records,
            &self.registry_phis,
            self.features,
            self.policy.omega,
            self.policy.lambda,
            self.policy.num_levels,
            &|_| (self.full_mask.clone(), self.policy.final_v_inverse.clone()),
            self.verify,
            self.policy.root,
            state,
            &mut self.memo,
        )
    }

    /// Evaluate at every state into a dense table.
    pub fn dense(&mut self) -> Result<TablePolicy, PolicyError> {
        let actions = (0..self.features.n_states())
            .map(|s| self.action(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TablePolicy::new(actions, self.features.n_actions()).expect("replay actions in range"))
    }
}

impl RolloutPolicy for PolicyEvaluator<'_> {
    fn action(&mut self, state: usize) -> Result<usize, PolicyError> {
        PolicyEvaluator::action(self, state)
    }
}

// --- suboptimality schedule --------------------------------------------------

/// Per-level suboptimality target:
/// `8 (eps+omega) (sqrt(d_tilde)+1) sum_{j<level} gamma^j + gamma^level / (1-gamma)`.
pub fn delta_l(level: usize, eps_plus_omega: f64, d_tilde: f64, gamma: f64) -> f64 {
    let mut geometric = 0.0;
    let mut power = 1.0;
    for _ in 0..level {
        geometric += power;
        power *= gamma;
    }
    8.0 * eps_plus_omega * (d_tilde.sqrt() + 1.0) * geometric + power / (1.0 - gamma)
}

/// Final guarantee on the returned policy at the initial state:
/// `9 (eps+omega) (sqrt(d_tilde)+1) / (1-gamma)`.
pub fn final_suboptimality_bound(eps_plus_omega: f64, d_tilde: f64, gamma: f64) -> f64 {
    9.0 * eps_plus_omega * (d_tilde.sqrt() + 1.0) / (1.0 - gamma)
}

// --- planner ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub omega: f64,
    pub delta: f64,
    /// Hard query cap as a multiple of the theoretical bound
    /// `d_tilde * H * n * H`.
    pub budget_multiplier: f64,
    /// Episode-count override for smoke tests; voids the estimation
    /// guarantee and marks the run unsound.
    pub n_override: Option<usize>,
    /// Maintain dense snapshots and certify replay, inverses, and the
    /// per-level optimality schedule against the exact solver.
    pub debug_certify: bool,
    /// Known approximation error of the instance, used only by the debug
    /// optimality checks (zero for all bundled instances).
    pub certify_epsilon: f64,
}

impl PlanConfig {
    pub fn new(omega: f64, delta: f64) -> Self {
        Self {
            omega,
            delta,
            budget_multiplier: 2.0,
            n_override: None,
            debug_certify: false,
            certify_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanStats {
    pub queries_total: u64,
    pub measure_success_count: u64,
    pub discover_count: u64,
    pub core_set_max: usize,
    pub main_loop_iterations: u64,
    pub horizon: usize,
    pub d_tilde: f64,
    pub episodes_per_measure: usize,
    pub lambda: f64,
    pub unsound: bool,
}

/// Debug-mode certification summary. Any violated check aborts the run with
/// `PlanError::Certification`; this report carries the pass-side counts.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    /// Absolute estimation error of every successful measurement against
    /// the exact action value of the measured policy.
    pub measure_truth_errors: Vec<f64>,
    /// All recorded measurement errors stayed within omega; the level
    /// optimality checks are only meaningful when this holds.
    pub all_measures_accurate: bool,
    /// Number of per-level optimality comparisons performed.
    pub level_optimality_checks: u64,
    /// Number of replayed actions compared against dense snapshots.
    pub replay_comparisons: u64,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub policy: RecursivePolicy,
    pub stats: PlanStats,
    pub certification: Option<CertificationReport>,
}

struct Level {
    core: CoreSet,
    qbar: Vec<Option<f64>>,
    policy: Option<usize>,
    members: Bitmask,
}

impl Level {
    fn new(dim: usize, lambda: f64, strict: bool) -> Self {
        let mut core = CoreSet::new(dim, lambda);
        core.set_strict_checks(strict);
        Self { core, qbar: Vec::new(), policy: None, members: Bitmask::new() }
    }

    fn has_pending(&self) -> bool {
        self.qbar.iter().any(Option::is_none)
    }
}

struct DebugState {
    v_star: Vec<f64>,
    base_snapshot: TablePolicy,
    snapshots: Vec<TablePolicy>,
    exact_cache: HashMap<u64, PolicyValues>,
    first_cover_action: Vec<HashMap<usize, usize>>,
    truth_errors: Vec<f64>,
    all_accurate: bool,
    level_checks: u64,
    replay_comparisons: Cell<u64>,
    mismatch: Cell<Option<ReplayMismatch>>,
    epsilon: f64,
}

impl DebugState {
    fn snapshot(&self, handle: Option<usize>) -> &TablePolicy {
        match handle {
            None => &self.base_snapshot,
            Some(i) => &self.snapshots[i],
        }
    }
}

struct Planner<'a> {
    features: &'a FeatureMap,
    omega: f64,
    lambda: f64,
    num_levels: usize,
    levels: Vec<Level>,
    registry_pairs: Vec<(usize, usize)>,
    registry_phis: Vec<DVector<f64>>,
    registry_index: HashMap<(usize, usize), usize>,
    records: Vec<PolicyRecord>,
    memo: RefCell<HashMap<(u64, usize), usize>>,
    verify_replay: bool,
}

impl<'a> Planner<'a> {
    fn append_to_level0(&mut self, state: usize, action: usize) -> Result<(), PlanError> {
        debug_assert!(!self.registry_index.contains_key(&(state, action)));
        let phi = self.features.phi(state, action).to_vec();
        let idx = self.registry_pairs.len();
        self.registry_pairs.push((state, action));
        self.registry_phis.push(DVector::from_column_slice(&phi));
        self.registry_index.insert((state, action), idx);
        self.levels[0].core.append_with_phi(state, action, phi)?;
        self.levels[0].qbar.push(None);
        self.levels[0].members.set(idx);
        Ok(())
    }

    fn propagate(&mut self, from: usize) -> Result<(), PlanError> {
        let pairs: Vec<(usize, usize)> = self.levels[from].core.pairs().to_vec();
        for (s, a) in pairs {
            if !self.levels[from + 1].core.contains(s, a) {
                let idx = self.registry_index[&(s, a)];
                let phi = self.registry_phis[idx].as_slice().to_vec();
                self.levels[from + 1].core.append_with_phi(s, a, phi)?;
                self.levels[from + 1].qbar.push(None);
                self.levels[from + 1].members.set(idx);
            }
        }
        Ok(())
    }

    fn evaluate(&self, handle: Option<usize>, state: usize) -> Result<usize, PolicyError> {
        let mut memo = self.memo.borrow_mut();
        let levels = &self.levels;
        replay_action(
            &self.records,
            &self.registry_phis,
            self.features,
            self.omega,
            self.lambda,
            self.num_levels,
            &|l| (levels[l].members.clone(), levels[l].core.v_inverse().clone()),
            self.verify_replay,
            handle,
            state,
            &mut memo,
        )
    }

    fn first_uncovered_action(&self, level: usize, state: usize) -> Option<usize> {
        (0..self.features.n_actions())
            .find(|&a| !self.levels[level].core.in_action_cover(state, a, self.features))
    }
}

/// Rollout adapter evaluating a policy handle against the planner's live
/// per-level state, with memoized replays and optional snapshot checking.
struct LivePolicy<'p> {
    records: &'p [PolicyRecord],
    registry_phis: &'p [DVector<f64>],
    features: &'p FeatureMap,
    omega: f64,
    lambda: f64,
    num_levels: usize,
    levels: &'p [Level],
    root: Option<usize>,
    memo: &'p RefCell<HashMap<(u64, usize), usize>>,
    verify: bool,
    reference: Option<&'p TablePolicy>,
    comparisons: Option<&'p Cell<u64>>,
    mismatch: Option<&'p Cell<Option<ReplayMismatch>>>,
}

impl RolloutPolicy for LivePolicy<'_> {
    fn action(&mut self, state: usize) -> Result<usize, PolicyError> {
        let levels = self.levels;
        let action = {
            let mut memo = self.memo.borrow_mut();
            replay_action(
                self.records,
                self.registry_phis,
                self.features,
                self.omega,
                self.lambda,
                self.num_levels,
                &|l| (levels[l].members.clone(), levels[l].core.v_inverse().clone()),
                self.verify,
                self.root,
                state,
                &mut memo,
            )?
        };
        if let Some(reference) = self.reference {
            if let Some(counter) = self.comparisons {
                counter.set(counter.get() + 1);
            }
            let expected = reference.action(state);
            if expected != action {
                if let Some(flag) = self.mismatch {
                    flag.set(Some((state, action, expected)));
                }
            }
        }
        Ok(action)
    }
}

enum Step {
    Continue,
    Return,
}

/// Run the local-access planner against a metered simulator.
///
/// Returns the recursively defined level-`H` policy along with query
/// accounting. The caller owns the simulator seed; two runs with equal
/// configurations and equally seeded simulators produce identical outputs.
pub fn plan(
    sim: &mut LocalAccessSimulator<'_>,
    features: &FeatureMap,
    config: &PlanConfig,
) -> Result<PlanOutcome, PlanError> {
    let mdp = sim.mdp_ref();
    features
        .matches_mdp(mdp)
        .map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
    if config.omega.is_nan() || config.omega <= 0.0 {
        return Err(PlanError::InvalidConfig(format!("omega must be positive, got {}", config.omega)));
    }
    if config.delta.is_nan() || config.delta <= 0.0 || config.delta > 1.0 {
        return Err(PlanError::InvalidConfig(format!("delta must lie in (0,1], got {}", config.delta)));
    }
    if config.budget_multiplier.is_nan() || config.budget_multiplier <= 0.0 {
        return Err(PlanError::InvalidConfig("budget multiplier must be positive".into()));
    }
    if features.param_bound().is_nan() || features.param_bound() <= 0.0 {
        return Err(PlanError::InvalidConfig("feature map needs a positive weight bound".into()));
    }

    let gamma = mdp.gamma();
    let omega = config.omega;
    let horizon = measure::horizon(omega, gamma)?;
    let lambda = ridge_lambda(omega, features.param_bound());
    let growth_bound = d_tilde(features.dim(), features.feature_bound(), lambda);
    let zeta = (config.delta / (growth_bound * horizon as f64)).min(1.0);
    let episodes = match config.n_override {
        Some(n) => n,
        None => measure::num_episodes(omega, gamma, zeta)?,
    };
    let params = MeasureParams { omega, zeta, n_override: config.n_override };
    let budget_cap =
        config.budget_multiplier * growth_bound * horizon as f64 * episodes as f64 * horizon as f64;
    let iteration_guard = (growth_bound * (horizon as f64 + 2.0) + 1.0).ceil().max(8.0) as u64;

    let num_levels = horizon + 1;
    let mut planner = Planner {
        features,
        omega,
        lambda,
        num_levels,
        levels: (0..num_levels)
            .map(|_| Level::new(features.dim(), lambda, config.debug_certify))
            .collect(),
        registry_pairs: Vec::new(),
        registry_phis: Vec::new(),
        registry_index: HashMap::new(),
        records: Vec::new(),
        memo: RefCell::new(HashMap::new()),
        verify_replay: config.debug_certify,
    };

    let mut debug = if config.debug_certify {
        let optimal = exact_optimal(mdp)?;
        Some(DebugState {
            v_star: optimal.v_star,
            base_snapshot: TablePolicy::constant(mdp.n_states(), 0),
            snapshots: Vec::new(),
            exact_cache: HashMap::new(),
            first_cover_action: (0..num_levels).map(|_| HashMap::new()).collect(),
            truth_errors: Vec::new(),
            all_accurate: true,
            level_checks: 0,
            replay_comparisons: Cell::new(0),
            mismatch: Cell::new(None),
            epsilon: config.certify_epsilon,
        })
    } else {
        None
    };

    let mut stats = PlanStats {
        queries_total: 0,
        measure_success_count: 0,
        discover_count: 0,
        core_set_max: 0,
        main_loop_iterations: 0,
        horizon,
        d_tilde: growth_bound,
        episodes_per_measure: episodes,
        lambda,
        unsound: config.n_override.is_some(),
    };

    let base_queries = sim.query_count();
    let initial_state = mdp.initial_state();

    loop {
        stats.main_loop_iterations += 1;
        if stats.main_loop_iterations > iteration_guard {
            return Err(PlanError::Internal(format!(
                "main loop exceeded its termination bound of {iteration_guard} iterations"
            )));
        }
        let used = sim.query_count() - base_queries;
        if used as f64 > budget_cap {
            return Err(PlanError::QueryBudgetExceeded { queries: used, cap: budget_cap });
        }

        let step = 'iteration: {
            // Keep the initial state fully covered at level 0.
            if let Some(a) = planner.first_uncovered_action(0, initial_state) {
                planner.append_to_level0(initial_state, a)?;
                break 'iteration Step::Continue;
            }

            let pending_level = (0..horizon)
                .find(|&l| planner.levels[l].has_pending())
                .unwrap_or(horizon);

            if debug.is_some() {
                check_cover_chain(&planner, pending_level)?;
            }

            if pending_level == horizon {
                break 'iteration Step::Return;
            }

            let slot = planner.levels[pending_level]
                .qbar
                .iter()
                .position(Option::is_none)
                .expect("pending level has an unmeasured pair");
            let (ps, pa) = planner.levels[pending_level].core.pairs()[slot];
            let handle = planner.levels[pending_level].policy;

            let outcome = {
                let levels = &planner.levels;
                let predicate = |s: usize| levels[pending_level].core.in_cover(s, features);
                let mut policy = LivePolicy {
                    records: &planner.records,
                    registry_phis: &planner.registry_phis,
                    features,
                    omega,
                    lambda,
                    num_levels,
                    levels,
                    root: handle,
                    memo: &planner.memo,
                    verify: planner.verify_replay,
                    reference: debug.as_ref().map(|d| d.snapshot(handle)),
                    comparisons: debug.as_ref().map(|d| &d.replay_comparisons),
                    mismatch: debug.as_ref().map(|d| &d.mismatch),
                };
                measure(sim, ps, pa, &mut policy, &predicate, &params)?
            };

            if let Some(dbg) = debug.as_ref() {
                if let Some((state, got, want)) = dbg.mismatch.get() {
                    return Err(PlanError::Certification(format!(
                        "replayed action {got} disagrees with dense snapshot {want} at state {state}"
                    )));
                }
            }

            match outcome {
                MeasureOutcome::Discover { state } => {
                    stats.discover_count += 1;
                    let action = planner
                        .first_uncovered_action(0, state)
                        .ok_or(PlanError::CoverInconsistency { state })?;
                    planner.append_to_level0(state, action)?;
                    break 'iteration Step::Continue;
                }
                MeasureOutcome::Success { q_tilde } => {
                    stats.measure_success_count += 1;
                    if let Some(dbg) = debug.as_mut() {
                        let values = cached_exact_values(mdp, dbg, handle)?;
                        let truth = values.q.get(ps, pa);
                        let err = (q_tilde - truth).abs();
                        if err > omega {
                            dbg.all_accurate = false;
                        }
                        dbg.truth_errors.push(err);
                    }
                    // Measured values are permanent: the slot must be empty.
                    if planner.levels[pending_level].qbar[slot].is_some() {
                        return Err(PlanError::Internal(
                            "attempted to overwrite a measured value".into(),
                        ));
                    }
                    planner.levels[pending_level].qbar[slot] = Some(q_tilde);

                    if !planner.levels[pending_level].has_pending() {
                        construct_policy(&mut planner, debug.as_mut(), pending_level)?;
                    }
                    break 'iteration Step::Continue;
                }
            }
        };

        for level in &planner.levels {
            stats.core_set_max = stats.core_set_max.max(level.core.len());
            if level.core.len() as f64 > growth_bound {
                return Err(PlanError::Internal(format!(
                    "core set size {} exceeded its growth bound {growth_bound}",
                    level.core.len()
                )));
            }
        }
        if let Some(dbg) = debug.as_mut() {
            end_of_iteration_checks(&planner, dbg, mdp, growth_bound, gamma)?;
        }

        match step {
            Step::Continue => continue,
            Step::Return => break,
        }
    }

    stats.queries_total = sim.query_count() - base_queries;

    let registry = planner
        .registry_pairs
        .iter()
        .zip(planner.registry_phis.iter())
        .map(|(&(state, action), phi)| RegistryEntry { state, action, phi: phi.as_slice().to_vec() })
        .collect();
    let policy = RecursivePolicy::new(
        features.dim(),
        omega,
        lambda,
        num_levels,
        registry,
        planner.records,
        planner.levels[horizon].policy,
        planner.levels[horizon].core.v_inverse().clone(),
    )
    .map_err(|e| PlanError::Internal(e.to_string()))?;

    let certification = debug.map(|d| CertificationReport {
        measure_truth_errors: d.truth_errors,
        all_measures_accurate: d.all_accurate,
        level_optimality_checks: d.level_checks,
        replay_comparisons: d.replay_comparisons.get(),
    });

    Ok(PlanOutcome { policy, stats, certification })
}

/// Fill the level's ridge fit into a new policy record, rebind the next
/// level's policy, and propagate newly covered pairs upward.
fn construct_policy(
    planner: &mut Planner<'_>,
    mut debug: Option<&mut DebugState>,
    level: usize,
) -> Result<(), PlanError> {
    let measured: Vec<f64> = planner.levels[level]
        .qbar
        .iter()
        .map(|q| q.expect("level has no pending measurements"))
        .collect();
    let theta = planner.levels[level].core.lse_theta(&measured)?;
    let record = PolicyRecord {
        theta: theta.as_slice().to_vec(),
        level,
        parent_update: planner.levels[level].policy,
        parent_merge: planner.levels[level + 1].policy,
        mask_level: planner.levels[level].members.clone(),
        mask_next: planner.levels[level + 1].members.clone(),
    };
    planner.records.push(record);
    let new_index = planner.records.len() - 1;

    if let Some(dbg) = debug.as_deref_mut() {
        // Dense reference for the merged policy: keep the old next-level
        // action on its covered states, otherwise apply the gated update.
        let features = planner.features;
        let n_states = features.n_states();
        let prev_snapshot = dbg.snapshot(planner.levels[level].policy).clone();
        let next_snapshot = dbg.snapshot(planner.levels[level + 1].policy).clone();
        let theta_slice: &[f64] = &planner.records[new_index].theta;
        let mut merged = Vec::with_capacity(n_states);
        for s in 0..n_states {
            if planner.levels[level + 1].core.in_cover(s, features) {
                merged.push(next_snapshot.action(s));
                continue;
            }
            let mut best_action = 0usize;
            let mut best_value = f64::NEG_INFINITY;
            for a in 0..features.n_actions() {
                let value = dot(features.phi(s, a), theta_slice);
                if value > best_value {
                    best_value = value;
                    best_action = a;
                }
            }
            let held_action = prev_snapshot.action(s);
            let held = dot(features.phi(s, held_action), theta_slice);
            let switch = planner.levels[level].core.in_cover(s, features)
                && held + planner.omega < best_value - planner.omega;
            merged.push(if switch { best_action } else { held_action });
        }
        dbg.snapshots
            .push(TablePolicy::new(merged, features.n_actions()).expect("actions in range"));
    }

    planner.levels[level + 1].policy = Some(new_index);
    planner.propagate(level)?;

    if let Some(dbg) = debug {
        // Certify the replay of the freshly constructed record everywhere.
        for s in 0..planner.features.n_states() {
            let replayed = planner.evaluate(Some(new_index), s)?;
            let expected = dbg.snapshots[new_index].action(s);
            dbg.replay_comparisons.set(dbg.replay_comparisons.get() + 1);
            if replayed != expected {
                return Err(PlanError::Certification(format!(
                    "record {new_index} replays action {replayed} at state {s}, dense snapshot has {expected}"
                )));
            }
        }
    }
    Ok(())
}

/// After the pending level is chosen, the action covers of all levels up to
/// it must coincide on every registry pair.
fn check_cover_chain(planner: &Planner<'_>, pending_level: usize) -> Result<(), PlanError> {
    for &(s, a) in &planner.registry_pairs {
        let reference = planner.levels[0].core.in_action_cover(s, a, planner.features);
        for level in 1..=pending_level {
            let got = planner.levels[level].core.in_action_cover(s, a, planner.features);
            if got != reference {
                return Err(PlanError::Certification(format!(
                    "action cover of level {level} disagrees with level 0 at pair ({s},{a})"
                )));
            }
        }
    }
    Ok(())
}

fn cached_exact_values<'d>(
    mdp: &crate::mdp::TabularMdp,
    dbg: &'d mut DebugState,
    handle: Option<usize>,
) -> Result<&'d PolicyValues, PlanError> {
    let key = memo_key(handle);
    if let std::collections::hash_map::Entry::Vacant(slot) = dbg.exact_cache.entry(key) {
        let snapshot = match handle {
            None => &dbg.base_snapshot,
            Some(i) => &dbg.snapshots[i],
        };
        slot.insert(exact_values(mdp, snapshot)?);
    }
    Ok(&dbg.exact_cache[&key])
}

/// Debug-mode invariants checked at the end of every main-loop iteration:
/// covered states keep their first recorded action for good, and every
/// level's policy meets its suboptimality target on its cover (the latter
/// only while all measurements have stayed within omega).
fn end_of_iteration_checks(
    planner: &Planner<'_>,
    dbg: &mut DebugState,
    mdp: &crate::mdp::TabularMdp,
    growth_bound: f64,
    gamma: f64,
) -> Result<(), PlanError> {
    let n_states = mdp.n_states();
    for level in 0..planner.num_levels {
        let handle = planner.levels[level].policy;
        let snapshot = dbg.snapshot(handle).clone();
        for s in 0..n_states {
            if !planner.levels[level].core.in_cover(s, planner.features) {
                continue;
            }
            let action = snapshot.action(s);
            match dbg.first_cover_action[level].get(&s) {
                Some(&recorded) if recorded != action => {
                    return Err(PlanError::Certification(format!(
                        "level {level} changed its action at covered state {s} from {recorded} to {action}"
                    )));
                }
                Some(_) => {}
                None => {
                    dbg.first_cover_action[level].insert(s, action);
                }
            }
            if dbg.all_accurate {
                let key = memo_key(handle);
                if let std::collections::hash_map::Entry::Vacant(slot) = dbg.exact_cache.entry(key)
                {
                    slot.insert(exact_values(mdp, &snapshot)?);
                }
                let values = &dbg.exact_cache[&key];
                let target = delta_l(level, dbg.epsilon + planner.omega, growth_bound, gamma);
                let gap = dbg.v_star[s] - values.v[s];
                dbg.level_checks += 1;
                if gap > target + CERTIFY_TOL {
                    return Err(PlanError::Certification(format!(
                        "level {level} misses its optimality target at state {s}: gap {gap} > {target}"
                    )));
                }
            }
        }
    }
    Ok(())
}
