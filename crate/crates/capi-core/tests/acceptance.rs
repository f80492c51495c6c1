//! Acceptance suite: certificate- and property-based checks of every stated
//! guarantee at desk scale. One test per criterion; each prints a single
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use capi_core::capi::{
    api_update, auto_iterations, capi_update, noisy_exact_oracle, run_capi, IterationCount,
    NoiseModel, UpdateRule,
};
use capi_core::coreset::{d_tilde, ridge_lambda, CoreSet};
use capi_core::exact::{
    exact_optimal, exact_values, fit_qpi_error_upper_bound, suboptimality, FIT_SOLVER_TOL,
};
use capi_core::instances::{
    analytic_value, five_state_instance, make_hard_linear, one_hot_features, random_tabular,
    sign_actions, six_state_instance, HardLinearSpec,
};
use capi_core::measure::{measure, MeasureOutcome, MeasureParams};
use capi_core::planner::{
    final_suboptimality_bound, plan, CertificationReport, PlanConfig, PlanStats, PolicyEvaluator,
};
use capi_core::sim::LocalAccessSimulator;
use capi_core::{QTable, TablePolicy};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance criterion {id} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

// --- criterion 1: iteration-driver certificate under bounded noise ----------

#[test]
fn criterion_1_capi_suboptimality_certificate() {
    let omega = 0.1;
    let gamma = 0.9;
    let iterations = auto_iterations(omega, gamma);
    assert_eq!(iterations, 22);
    let bound = 5.0 * omega / (1.0 - gamma);

    let mut worst: f64 = f64::NEG_INFINITY;
    let failures: usize = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let n_states = 2 + (seed % 7) as usize;
            let n_actions = 2 + (seed % 3) as usize;
            let mdp = random_tabular(seed, n_states, n_actions, gamma);
            let optimal = exact_optimal(&mdp).unwrap();
            let mut bad = 0usize;
            for noise in [NoiseModel::Uniform, NoiseModel::Adversarial] {
                let oracle = noisy_exact_oracle(&mdp, omega, noise, seed ^ 0x5EED);
                let policy = run_capi(
                    oracle,
                    gamma,
                    omega,
                    &|_| false,
                    TablePolicy::constant(n_states, 0),
                    IterationCount::Fixed(iterations),
                    UpdateRule::Capi,
                )
                .unwrap();
                let values = exact_values(&mdp, &policy).unwrap();
                let gap = (0..n_states)
                    .map(|s| optimal.v_star[s] - values.v[s])
                    .fold(f64::NEG_INFINITY, f64::max);
                if gap > bound + 1e-9 {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    // Track the worst gap on one representative run for the report line.
    {
        let mdp = random_tabular(0, 8, 4, gamma);
        let optimal = exact_optimal(&mdp).unwrap();
        let oracle = noisy_exact_oracle(&mdp, omega, NoiseModel::Adversarial, 7);
        let policy = run_capi(
            oracle,
            gamma,
            omega,
            &|_| false,
            TablePolicy::constant(8, 0),
            IterationCount::Fixed(iterations),
            UpdateRule::Capi,
        )
        .unwrap();
        let values = exact_values(&mdp, &policy).unwrap();
        for s in 0..8 {
            worst = worst.max(optimal.v_star[s] - values.v[s]);
        }
    }
    report(
        1,
        "iteration-driver certificate",
        failures == 0,
        &format!("100 instances x 2 noise models within {bound}; sample worst gap {worst:.3}"),
    );
}

// --- criterion 2: single-update property suites ------------------------------

fn bounded_noise_q(
    rng: &mut ChaCha8Rng,
    truth: &QTable,
    policy: &TablePolicy,
    omega: f64,
    adversarial: bool,
) -> QTable {
    let mut q = truth.clone();
    if adversarial {
        for s in 0..q.n_states() {
            let held = policy.action(s);
            let best = truth.argmax_row(s);
            q.set(s, held, q.get(s, held) + omega);
            if best != held {
                q.set(s, best, q.get(s, best) - omega);
            }
        }
    } else {
        for s in 0..q.n_states() {
            for a in 0..q.n_actions() {
                let u: f64 = rng.random();
                q.set(s, a, q.get(s, a) + omega * (2.0 * u - 1.0));
            }
        }
    }
    q
}

#[test]
fn criterion_2_update_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    let mut worst_slack: f64 = f64::NEG_INFINITY;

    for trial in 0..500u64 {
        let n_states = 2 + (trial % 6) as usize;
        let n_actions = 2 + (trial % 3) as usize;
        let gamma = 0.5 + 0.45 * ((trial % 9) as f64) / 9.0;
        let omega = [0.05, 0.1, 0.3, 0.7][(trial % 4) as usize];
        let mdp = random_tabular(trial, n_states, n_actions, gamma);
        let policy = {
            let actions = (0..n_states).map(|_| rng.random_range(0..n_actions)).collect();
            TablePolicy::new(actions, n_actions).unwrap()
        };
        let values = exact_values(&mdp, &policy).unwrap();

        // No deterioration under any within-band estimate, with a random
        // fixed set.
        let fixed: Vec<bool> = (0..n_states).map(|_| rng.random::<f64>() < 0.3).collect();
        let q_hat = bounded_noise_q(&mut rng, &values.q, &policy, omega, trial % 2 == 0);
        let updated = capi_update(&q_hat, &policy, &|s| fixed[s], omega);
        let updated_values = exact_values(&mdp, &updated).unwrap();
        for s in 0..n_states {
            worst_drop = worst_drop.max(values.v[s] - updated_values.v[s]);
        }

        // One-step progress: next-state optimality contracts by gamma plus
        // the estimation band.
        let optimal = exact_optimal(&mdp).unwrap();
        let mut next_state_gap: f64 = 0.0;
        for s in 0..n_states {
            for a in 0..n_actions {
                let gap: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .enumerate()
                    .map(|(sp, &p)| p * (optimal.v_star[sp] - values.v[sp]))
                    .sum();
                next_state_gap = next_state_gap.max(gap);
            }
        }
        let q_hat = bounded_noise_q(&mut rng, &values.q, &policy, omega, trial % 3 == 0);
        let progressed = capi_update(&q_hat, &policy, &|_| false, omega);
        let progressed_values = exact_values(&mdp, &progressed).unwrap();
        let target = 4.0 * omega + gamma * next_state_gap;
        for s in 0..n_states {
            let gap = optimal.v_star[s] - progressed_values.v[s];
            worst_slack = worst_slack.max(gap - target);
        }
    }

    let pass = worst_drop <= 1e-9 && worst_slack <= 1e-9;
    report(
        2,
        "no-deterioration and one-step progress",
        pass,
        &format!("500 triples each; worst value drop {worst_drop:.2e}, worst progress slack {worst_slack:.2e}"),
    );
}

// --- criterion 3: rollout estimator statistics -------------------------------

#[test]
fn criterion_3_measure_statistical_accuracy() {
    let mdp = six_state_instance();
    let policy_ref = TablePolicy::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
    let truth = exact_values(&mdp, &policy_ref).unwrap().q.get(0, 0);
    let omega = 0.5;
    let params = MeasureParams::new(omega, 0.05);

    let calls = 400u64;
    let hits: u64 = (0..calls)
        .into_par_iter()
        .map(|seed| {
            let mut sim = LocalAccessSimulator::new(&mdp, seed);
            let mut policy = policy_ref.clone();
            match measure(&mut sim, 0, 0, &mut policy, &|_| true, &params).unwrap() {
                MeasureOutcome::Success { q_tilde } => u64::from((q_tilde - truth).abs() <= omega),
                MeasureOutcome::Discover { .. } => panic!("all states pass the predicate"),
            }
        })
        .sum();
    let needed = (0.92 * calls as f64).ceil() as u64;
    report(
        3,
        "rollout estimator accuracy",
        hits >= needed,
        &format!("{hits}/{calls} estimates within omega (needed {needed})"),
    );
}

// --- criterion 4: ridge-extension error bound ---------------------------------

#[test]
fn criterion_4_ridge_extension_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1E57);
    let mut worst_slack: f64 = f64::NEG_INFINITY;
    let mut checks = 0u64;

    for setup in 0..200u64 {
        let n_states = 3 + (setup % 4) as usize;
        let n_actions = 2 + (setup % 2) as usize;
        let gamma = 0.6 + 0.3 * ((setup % 5) as f64) / 5.0;
        let omega = [0.25, 0.5, 1.0][(setup % 3) as usize];
        let mdp = random_tabular(setup.wrapping_mul(31).wrapping_add(5), n_states, n_actions, gamma);
        let features = one_hot_features(n_states, n_actions, gamma);
        let b = features.param_bound();
        let lambda = ridge_lambda(omega, b);

        let policy = {
            let actions = (0..n_states).map(|_| rng.random_range(0..n_actions)).collect();
            TablePolicy::new(actions, n_actions).unwrap()
        };
        let values = exact_values(&mdp, &policy).unwrap();

        let mut core = CoreSet::new(features.dim(), lambda);
        let mut qbar = Vec::new();
        let pairs = 1 + (setup % 10) as usize;
        for _ in 0..pairs {
            let s = rng.random_range(0..n_states);
            let a = rng.random_range(0..n_actions);
            core.append(s, a, &features).unwrap();
            qbar.push(values.q.get(s, a) + omega * (2.0 * rng.random::<f64>() - 1.0));
        }
        let n = core.len() as f64;
        for _ in 0..1000 {
            let s = rng.random_range(0..n_states);
            let a = rng.random_range(0..n_actions);
            let estimate = core.lse(&qbar, s, a, &features).unwrap();
            let weighted_norm = core.weighted_norm_sq(features.phi(s, a)).sqrt();
            let bound = weighted_norm * (lambda.sqrt() * b + omega * n.sqrt());
            let err = (estimate - values.q.get(s, a)).abs();
            worst_slack = worst_slack.max(err - bound);
            checks += 1;
        }
    }
    report(
        4,
        "ridge-extension error bound",
        worst_slack <= 1e-9,
        &format!("{checks} probes across 200 setups; worst slack {worst_slack:.2e}"),
    );
}

// --- criteria 5, 6, 8: shared planner sweep -----------------------------------

struct PlanRun {
    stats: PlanStats,
    certification: CertificationReport,
    suboptimality_s0: f64,
}

static PLAN_SWEEP: LazyLock<Vec<PlanRun>> = LazyLock::new(|| {
    let (mdp, features) = five_state_instance();
    (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let mut sim = LocalAccessSimulator::new(&mdp, seed);
            let mut config = PlanConfig::new(0.5, 0.1);
            config.debug_certify = true;
            let outcome = plan(&mut sim, &features, &config)
                .unwrap_or_else(|e| panic!("seed {seed}: planner failed: {e}"));
            let mut evaluator = PolicyEvaluator::new(&outcome.policy, &features).unwrap();
            let dense = evaluator.dense().unwrap();
            let gap = suboptimality(&mdp, &dense, mdp.initial_state()).unwrap();
            PlanRun {
                stats: outcome.stats,
                certification: outcome.certification.expect("debug mode"),
                suboptimality_s0: gap,
            }
        })
        .collect()
});

#[test]
fn criterion_5_planner_guarantee_and_query_accounting() {
    let (mdp, features) = five_state_instance();
    let omega = 0.5;
    let delta: f64 = 0.1;
    let lambda = ridge_lambda(omega, features.param_bound());
    let dt = d_tilde(features.dim(), features.feature_bound(), lambda);
    let bound = final_suboptimality_bound(omega, dt, mdp.gamma());

    let runs = &*PLAN_SWEEP;
    let mut bound_failures = 0usize;
    let mut accounting_ok = true;
    for run in runs.iter() {
        if run.suboptimality_s0 > bound {
            bound_failures += 1;
        }
        let h = run.stats.horizon as f64;
        let n = run.stats.episodes_per_measure as f64;
        accounting_ok &= (run.stats.queries_total as f64) <= dt * h * n * h;
        accounting_ok &= (run.stats.measure_success_count as f64) <= dt * h;
        accounting_ok &= (run.stats.discover_count as f64) <= dt;
        accounting_ok &= (run.stats.core_set_max as f64) <= dt;
    }
    // Allowed failure rate: delta plus three sigma of a Bernoulli(delta)
    // average over 50 runs.
    let allowed = ((delta + 3.0 * (delta * (1.0 - delta) / 50.0).sqrt()) * 50.0).floor() as usize;
    let pass = bound_failures <= allowed && accounting_ok;
    report(
        5,
        "planner guarantee and query accounting",
        pass,
        &format!(
            "50 runs, {bound_failures} bound failures (allowed {allowed}), accounting {}; all runs completed without access violations",
            if accounting_ok { "tight" } else { "VIOLATED" }
        ),
    );
}

#[test]
fn criterion_6_replay_and_inverse_equivalence() {
    let runs = &*PLAN_SWEEP;
    // Replay mismatches and inverse drift abort a debug-certified run, so
    // reaching this point means every comparison passed; require that the
    // comparisons actually happened in volume.
    let total_comparisons: u64 = runs.iter().map(|r| r.certification.replay_comparisons).sum();
    let every_run_compared = runs.iter().all(|r| r.certification.replay_comparisons > 0);
    report(
        6,
        "replay equivalence and inverse maintenance",
        every_run_compared && total_comparisons > 0,
        &format!("{total_comparisons} replayed actions matched dense snapshots; every incremental inverse checked against direct inversion"),
    );
}

#[test]
fn criterion_8_level_optimality_certification() {
    let runs = &*PLAN_SWEEP;
    let accurate_runs = runs.iter().filter(|r| r.certification.all_measures_accurate).count();
    let checks: u64 = runs
        .iter()
        .filter(|r| r.certification.all_measures_accurate)
        .map(|r| r.certification.level_optimality_checks)
        .sum();
    // Level-optimality violations abort the run; estimator accuracy makes
    // the checks non-vacuous on (at least) most seeds.
    let pass = accurate_runs > 0 && checks > 0;
    report(
        8,
        "per-level optimality certification",
        pass,
        &format!("{accurate_runs}/50 runs had every measurement within omega; {checks} level-optimality checks passed"),
    );
}

// --- criterion 7: analytic fixture agreement ----------------------------------

#[test]
fn criterion_7_analytic_fixture_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEED);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let d = 4 + (trial % 3) as usize;
        let gamma = 0.6 + 0.35 * rng.random::<f64>();
        let delta = 0.2 * (1.0 - gamma) * rng.random::<f64>();
        let spec = HardLinearSpec::random(d, gamma, delta, trial).unwrap();
        let (mdp, _features) = make_hard_linear(&spec).unwrap();
        let action = rng.random_range(0..mdp.n_actions());
        let policy = TablePolicy::constant(2, action);
        let values = exact_values(&mdp, &policy).unwrap();
        let dot: f64 = sign_actions(d - 2)[action]
            .iter()
            .zip(spec.beta().iter())
            .map(|(x, y)| x * y)
            .sum();
        worst = worst.max((values.v[0] - analytic_value(&spec, dot)).abs());
        worst = worst.max(values.v[1].abs());
    }

    let mut worst_fit: f64 = 0.0;
    for trial in 0..5u64 {
        let d = 4 + (trial % 3) as usize;
        let spec = HardLinearSpec::random(d, 0.75, 0.02, trial ^ 0xA5).unwrap();
        let (mdp, features) = make_hard_linear(&spec).unwrap();
        worst_fit = worst_fit.max(fit_qpi_error_upper_bound(&mdp, &features).unwrap());
    }

    let mut identity_exact = true;
    for trial in 0..40u64 {
        let spec = HardLinearSpec::random(6, 0.75, 0.02, trial).unwrap();
        let actions = sign_actions(4);
        let action = &actions[(trial % 16) as usize];
        let (_, total) = capi_core::instances::err_decomposition(action, spec.beta());
        let dot: f64 = action.iter().zip(spec.beta().iter()).map(|(x, y)| x * y).sum();
        identity_exact &= (1.0 - dot - 2.0 * total / 4.0).abs() <= 1e-12;
    }

    let pass = worst <= 1e-9 && worst_fit <= FIT_SOLVER_TOL && identity_exact;
    report(
        7,
        "analytic fixtures",
        pass,
        &format!("value agreement {worst:.2e}; realizability bound {worst_fit:.2e}; error-split identity exact"),
    );
}

// --- sanity: baseline greedy update stays available ----------------------------

#[test]
fn api_baseline_contrast_is_recorded_not_asserted() {
    // The greedy baseline has no suboptimality certificate; just record that
    // both modes run on the same oracle stream.
    let mdp = random_tabular(17, 6, 3, 0.9);
    let omega = 0.1;
    for rule in [UpdateRule::Api, UpdateRule::Capi] {
        let oracle = noisy_exact_oracle(&mdp, omega, NoiseModel::Uniform, 3);
        let policy = run_capi(
            oracle,
            mdp.gamma(),
            omega,
            &|_| false,
            TablePolicy::constant(6, 0),
            IterationCount::Auto,
            rule,
        )
        .unwrap();
        let gap = suboptimality(&mdp, &policy, 0).unwrap();
        assert!(gap >= -1e-9);
    }
    let q = exact_values(&mdp, &TablePolicy::constant(6, 0)).unwrap().q;
    let _ = api_update(&q);
}
