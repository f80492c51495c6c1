//! Benchmark harness for the planning library: exact solves, noisy policy
//! iteration sweeps, local-access planner runs with budget and metrics
//! capture, instance generation, and seed sweeps with CSV aggregation.
//!
//! Exit codes: 2 for usage errors, 3 for query-budget violations, 4 for
//! debug-certification failures, 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use capi_core::capi::{
    auto_iterations, noisy_exact_oracle, run_capi, IterationCount, NoiseModel, UpdateRule,
};
use capi_core::coreset::{d_tilde, ridge_lambda, CoreSetError};
use capi_core::exact::{exact_optimal, exact_values, suboptimality};
use capi_core::instances::{
    make_bandit_mdp, make_hard_linear, make_hard_linear_subsampled, one_hot_features,
    random_tabular, HardLinearSpec, MAX_SIGN_DIMS,
};
use capi_core::planner::{delta_l, final_suboptimality_bound, plan, PlanConfig, PlanError, PolicyEvaluator};
use capi_core::sim::LocalAccessSimulator;
use capi_core::{FeatureMap, MdpInstanceFile, TabularMdp, TablePolicy};

#[derive(Parser)]
#[command(name = "capi", version, about = "Planner benchmark harness for discounted tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Uniform,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Api,
    Capi,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Linear,
    Bandit,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an instance exactly and print optimal values and policy.
    SolveExact {
        mdp: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the policy-iteration driver with a noisy-exact estimation oracle.
    RunCapi {
        mdp: PathBuf,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        gamma_override: Option<f64>,
        /// Iteration count, or "auto" for ceil(ln omega / ln gamma).
        #[arg(long, default_value = "auto")]
        iterations: String,
        #[arg(long, value_enum, default_value_t = NoiseArg::Uniform)]
        noise: NoiseArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Capi)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the local-access planner on an instance with features.
    Plan {
        mdp: PathBuf,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        budget_multiplier: f64,
        /// Episode-count override for smoke runs; marks the record unsound.
        #[arg(long)]
        n_override: Option<usize>,
        /// Certify replay, inverses, and the optimality schedule against
        /// the exact solver (small instances only).
        #[arg(long, default_value_t = false)]
        debug_certify: bool,
        /// Write the serialized recursive policy here.
        #[arg(long)]
        policy_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a benchmark instance from the hard families.
    GenHard {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 0.75)]
        gamma: f64,
        /// Gap parameter of the linear family.
        #[arg(long = "Delta", default_value_t = 0.02)]
        delta_gap: f64,
        /// Sign pattern of beta: an action index or "random".
        #[arg(long, default_value = "random")]
        beta: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cap the action set by uniform subsampling (always keeps beta);
        /// required when d - 2 exceeds the enumeration guard.
        #[arg(long)]
        max_actions: Option<usize>,
        /// Bandit family: action count.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Bandit family: reward of the optimal action.
        #[arg(long, default_value_t = 0.5)]
        alpha_prime: f64,
        /// Bandit family: index of the rewarding action.
        #[arg(long, default_value_t = 0)]
        optimal_action: usize,
        /// Bandit family: return to the start state instead of absorbing.
        #[arg(long, default_value_t = false)]
        looping: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a seeded random dense instance with one-hot features.
    GenRandom {
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 0.75)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep planner runs over seeds and aggregate into JSONL and CSV.
    Bench {
        mdp: PathBuf,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value_t = 2.0)]
        budget_multiplier: f64,
        #[arg(long, default_value_t = false)]
        debug_certify: bool,
        /// JSON-lines output (one deterministic record per run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV summary including wall-clock timings.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(plan_err) = err.downcast_ref::<PlanError>() {
        return match plan_err {
            PlanError::QueryBudgetExceeded { .. } => 3,
            PlanError::Certification(_) => 4,
            PlanError::CoreSet(CoreSetError::InverseDrift { .. }) => 4,
            PlanError::Policy(_) => 4,
            _ => 1,
        };
    }
    1
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SolveExact { mdp, out } => solve_exact(&mdp, out.as_deref()),
        Command::RunCapi {
            mdp,
            omega,
            gamma_override,
            iterations,
            noise,
            mode,
            seeds,
            seed_base,
            out,
        } => run_capi_cmd(
            &mdp,
            omega,
            gamma_override,
            &iterations,
            noise,
            mode,
            seeds,
            seed_base,
            out.as_deref(),
        ),
        Command::Plan {
            mdp,
            omega,
            delta,
            seed,
            budget_multiplier,
            n_override,
            debug_certify,
            policy_out,
            out,
        } => {
            let (mdp_model, features, label) = load_instance_with_features(&mdp)?;
            let record = plan_one(
                &mdp_model,
                &features,
                &label,
                omega,
                delta,
                seed,
                budget_multiplier,
                n_override,
                debug_certify,
                policy_out.as_deref(),
            )?;
            emit(out.as_deref(), &serde_json::to_string(&record)?)
        }
        Command::GenHard {
            family,
            d,
            gamma,
            delta_gap,
            beta,
            seed,
            max_actions,
            k,
            alpha_prime,
            optimal_action,
            looping,
            out,
        } => gen_hard(
            family,
            d,
            gamma,
            delta_gap,
            &beta,
            seed,
            max_actions,
            k,
            alpha_prime,
            optimal_action,
            looping,
            out.as_deref(),
        ),
        Command::GenRandom { states, actions, gamma, seed, out } => {
            let mdp = random_tabular(seed, states, actions, gamma);
            let features = one_hot_features(states, actions, gamma);
            let metadata = serde_json::json!({
                "family": "random-tabular",
                "seed": seed,
            });
            let file = MdpInstanceFile::from_parts(&mdp, Some(&features), Some(metadata));
            emit(out.as_deref(), &serde_json::to_string(&file)?)
        }
        Command::Bench {
            mdp,
            omega,
            delta,
            seeds,
            seed_base,
            budget_multiplier,
            debug_certify,
            out,
            csv,
        } => bench(
            &mdp,
            omega,
            delta,
            seeds,
            seed_base,
            budget_multiplier,
            debug_certify,
            out.as_deref(),
            csv.as_deref(),
        ),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn instance_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_instance(path: &Path) -> Result<(TabularMdp, Option<FeatureMap>, String)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: MdpInstanceFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let label = instance_label(path);
    let (mdp, features) = file.into_parts().context("validating instance")?;
    Ok((mdp, features, label))
}

fn load_instance_with_features(path: &Path) -> Result<(TabularMdp, FeatureMap, String)> {
    let (mdp, features, label) = load_instance(path)?;
    let features = features.with_context(|| {
        format!("{} carries no feature map, required for planning", path.display())
    })?;
    Ok((mdp, features, label))
}

// --- solve-exact -------------------------------------------------------------

#[derive(Serialize)]
struct SolveRecord {
    instance: String,
    gamma: f64,
    v_star: Vec<f64>,
    pi_star: Vec<usize>,
    q_star: Vec<Vec<f64>>,
}

fn solve_exact(path: &Path, out: Option<&Path>) -> Result<()> {
    let (mdp, _, instance) = load_instance(path)?;
    let solution = exact_optimal(&mdp)?;
    let q_star = (0..mdp.n_states())
        .map(|s| solution.q_star.row(s).to_vec())
        .collect();
    let record = SolveRecord {
        instance,
        gamma: mdp.gamma(),
        v_star: solution.v_star,
        pi_star: solution.policy.actions().to_vec(),
        q_star,
    };
    emit(out, &serde_json::to_string(&record)?)
}

// --- run-capi ----------------------------------------------------------------

#[derive(Serialize)]
struct CapiRecord {
    instance: String,
    seed: u64,
    mode: &'static str,
    noise: &'static str,
    omega: f64,
    gamma: f64,
    iterations: usize,
    suboptimality_at_s0: f64,
    max_suboptimality: f64,
    bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound_satisfied: Option<bool>,
}

#[allow(clippy::too_many_arguments)]
fn run_capi_cmd(
    path: &Path,
    omega: f64,
    gamma_override: Option<f64>,
    iterations: &str,
    noise: NoiseArg,
    mode: ModeArg,
    seeds: u64,
    seed_base: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (mdp, _, instance) = load_instance(path)?;
    let mdp = match gamma_override {
        None => mdp,
        Some(gamma) => {
            let mut file = MdpInstanceFile::from_parts(&mdp, None, None);
            file.gamma = gamma;
            file.into_parts().context("gamma override")?.0
        }
    };
    let gamma = mdp.gamma();
    let rounds = match iterations {
        "auto" => auto_iterations(omega, gamma),
        text => text
            .parse::<usize>()
            .context("--iterations must be a count or \"auto\"")?,
    };
    let noise_model = match noise {
        NoiseArg::Uniform => NoiseModel::Uniform,
        NoiseArg::Adversarial => NoiseModel::Adversarial,
    };
    let rule = match mode {
        ModeArg::Api => UpdateRule::Api,
        ModeArg::Capi => UpdateRule::Capi,
    };
    let bound = 5.0 * omega / (1.0 - gamma);
    let optimal = exact_optimal(&mdp)?;

    let mut lines = Vec::new();
    for seed in seed_base..seed_base + seeds {
        let oracle = noisy_exact_oracle(&mdp, omega, noise_model, seed);
        let policy = run_capi(
            oracle,
            gamma,
            omega,
            &|_| false,
            TablePolicy::constant(mdp.n_states(), 0),
            IterationCount::Fixed(rounds),
            rule,
        )?;
        let values = exact_values(&mdp, &policy)?;
        let max_gap = (0..mdp.n_states())
            .map(|s| optimal.v_star[s] - values.v[s])
            .fold(f64::NEG_INFINITY, f64::max);
        let record = CapiRecord {
            instance: instance.clone(),
            seed,
            mode: match rule {
                UpdateRule::Api => "api",
                UpdateRule::Capi => "capi",
            },
            noise: match noise_model {
                NoiseModel::Uniform => "uniform",
                NoiseModel::Adversarial => "adversarial",
            },
            omega,
            gamma,
            iterations: rounds,
            suboptimality_at_s0: optimal.v_star[mdp.initial_state()]
                - values.v[mdp.initial_state()],
            max_suboptimality: max_gap,
            bound,
            bound_satisfied: match rule {
                UpdateRule::Capi => Some(max_gap <= bound + 1e-9),
                UpdateRule::Api => None,
            },
        };
        lines.push(serde_json::to_string(&record)?);
    }
    emit(out, &lines.join("\n"))
}

// --- plan / bench ------------------------------------------------------------

#[derive(Serialize, Clone)]
struct PlanRecord {
    instance: String,
    seed: u64,
    omega: f64,
    delta: f64,
    gamma: f64,
    horizon: usize,
    d_tilde: f64,
    lambda: f64,
    episodes_per_measure: usize,
    queries_total: u64,
    measure_success_count: u64,
    discover_count: u64,
    core_set_max: usize,
    main_loop_iterations: u64,
    suboptimality_at_s0: f64,
    bound_lemma9: f64,
    /// Tighter final-level target from the suboptimality schedule.
    bound_delta_h: f64,
    bound_satisfied: bool,
    unsound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    certified: Option<bool>,
}

#[allow(clippy::too_many_arguments)]
fn plan_one(
    mdp: &TabularMdp,
    features: &FeatureMap,
    instance: &str,
    omega: f64,
    delta: f64,
    seed: u64,
    budget_multiplier: f64,
    n_override: Option<usize>,
    debug_certify: bool,
    policy_out: Option<&Path>,
) -> Result<PlanRecord> {
    let mut sim = LocalAccessSimulator::new(mdp, seed);
    let config = PlanConfig {
        omega,
        delta,
        budget_multiplier,
        n_override,
        debug_certify,
        certify_epsilon: 0.0,
    };
    let outcome = plan(&mut sim, features, &config)?;

    let mut evaluator =
        PolicyEvaluator::new(&outcome.policy, features).map_err(|e| anyhow::anyhow!("{e}"))?;
    let dense = evaluator.dense().map_err(|e| anyhow::anyhow!("{e}"))?;
    let gap = suboptimality(mdp, &dense, mdp.initial_state())?;
    let bound = final_suboptimality_bound(omega, outcome.stats.d_tilde, mdp.gamma());

    if let Some(path) = policy_out {
        fs::write(path, outcome.policy.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
    }

    Ok(PlanRecord {
        instance: instance.to_string(),
        seed,
        omega,
        delta,
        gamma: mdp.gamma(),
        horizon: outcome.stats.horizon,
        d_tilde: outcome.stats.d_tilde,
        lambda: outcome.stats.lambda,
        episodes_per_measure: outcome.stats.episodes_per_measure,
        queries_total: outcome.stats.queries_total,
        measure_success_count: outcome.stats.measure_success_count,
        discover_count: outcome.stats.discover_count,
        core_set_max: outcome.stats.core_set_max,
        main_loop_iterations: outcome.stats.main_loop_iterations,
        suboptimality_at_s0: gap,
        bound_lemma9: bound,
        bound_delta_h: delta_l(outcome.stats.horizon, omega, outcome.stats.d_tilde, mdp.gamma()),
        bound_satisfied: gap <= bound,
        unsound: outcome.stats.unsound,
        certified: outcome
            .certification
            .map(|report| report.all_measures_accurate),
    })
}

fn thread_cap() -> Option<usize> {
    std::env::var("CAPI_PLANNER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    path: &Path,
    omega: f64,
    delta: f64,
    seeds: u64,
    seed_base: u64,
    budget_multiplier: f64,
    debug_certify: bool,
    out: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<()> {
    let (mdp, features, instance) = load_instance_with_features(path)?;

    let worker = |seed: u64| -> Result<(PlanRecord, u128)> {
        let start = Instant::now();
        let record = plan_one(
            &mdp,
            &features,
            &instance,
            omega,
            delta,
            seed,
            budget_multiplier,
            None,
            debug_certify,
            None,
        )?;
        Ok((record, start.elapsed().as_millis()))
    };
    let runs: Result<Vec<(PlanRecord, u128)>> = match thread_cap() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("building worker pool")?
            .install(|| (seed_base..seed_base + seeds).into_par_iter().map(worker).collect()),
        None => (seed_base..seed_base + seeds).into_par_iter().map(worker).collect(),
    };
    let runs = runs?;

    let jsonl = runs
        .iter()
        .map(|(r, _)| serde_json::to_string(r).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?
        .join("\n");
    emit(out, &jsonl)?;

    if let Some(csv_path) = csv_path {
        let mut writer = csv::Writer::from_path(csv_path)
            .with_context(|| format!("opening {}", csv_path.display()))?;
        writer.write_record([
            "instance",
            "seed",
            "omega",
            "delta",
            "queries_total",
            "measure_success_count",
            "discover_count",
            "core_set_max",
            "suboptimality_at_s0",
            "bound_lemma9",
            "bound_satisfied",
            "wall_time_ms",
        ])?;
        for (r, wall) in &runs {
            writer.write_record([
                r.instance.clone(),
                r.seed.to_string(),
                r.omega.to_string(),
                r.delta.to_string(),
                r.queries_total.to_string(),
                r.measure_success_count.to_string(),
                r.discover_count.to_string(),
                r.core_set_max.to_string(),
                r.suboptimality_at_s0.to_string(),
                r.bound_lemma9.to_string(),
                r.bound_satisfied.to_string(),
                wall.to_string(),
            ])?;
        }
        writer.flush()?;
    }

    let failures = runs.iter().filter(|(r, _)| !r.bound_satisfied).count();
    let queries: u64 = runs.iter().map(|(r, _)| r.queries_total).sum();
    eprintln!(
        "bench: {} runs, {failures} bound failures, {queries} total queries",
        runs.len()
    );
    Ok(())
}

// --- gen-hard ----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn gen_hard(
    family: FamilyArg,
    d: usize,
    gamma: f64,
    delta_gap: f64,
    beta: &str,
    seed: u64,
    max_actions: Option<usize>,
    k: usize,
    alpha_prime: f64,
    optimal_action: usize,
    looping: bool,
    out: Option<&Path>,
) -> Result<()> {
    let file = match family {
        FamilyArg::Linear => {
            let spec = match beta {
                "random" => HardLinearSpec::random(d, gamma, delta_gap, seed)?,
                index => {
                    let index: usize = index
                        .parse()
                        .context("--beta must be an action index or \"random\"")?;
                    HardLinearSpec::from_action_index(d, gamma, delta_gap, index)?
                }
            };
            let subsampled = match max_actions {
                Some(n) => {
                    eprintln!(
                        "note: subsampling {n} of 2^{} actions (beta kept); this changes the instance class",
                        d - 2
                    );
                    true
                }
                None if d - 2 > MAX_SIGN_DIMS => bail!(
                    "d - 2 = {} exceeds the enumeration guard; pass --max-actions",
                    d - 2
                ),
                None => false,
            };
            let (mdp, features) = match max_actions {
                Some(n) => make_hard_linear_subsampled(&spec, n, seed)?,
                None => make_hard_linear(&spec)?,
            };
            let lambda_probe = ridge_lambda(1.0, features.param_bound());
            let metadata = serde_json::json!({
                "family": "hard-linear",
                "d": d,
                "gamma": gamma,
                "Delta": delta_gap,
                "beta_action_index": spec.beta_action_index(),
                "epsilon": 0.0,
                "subsampled": subsampled,
                "d_tilde_at_omega_1": d_tilde(features.dim(), features.feature_bound(), lambda_probe),
            });
            MdpInstanceFile::from_parts(&mdp, Some(&features), Some(metadata))
        }
        FamilyArg::Bandit => {
            let (mdp, features) = make_bandit_mdp(optimal_action, k, alpha_prime, gamma, looping)?;
            let metadata = serde_json::json!({
                "family": "bandit",
                "k": k,
                "alpha_prime": alpha_prime,
                "optimal_action": optimal_action,
                "looping": looping,
                "note": "one-hot placeholder features; the family's hard feature construction is nonconstructive and not reproduced",
            });
            MdpInstanceFile::from_parts(&mdp, Some(&features), Some(metadata))
        }
    };
    emit(out, &serde_json::to_string(&file)?)
}
