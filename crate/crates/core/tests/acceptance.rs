//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs every experiment at its default (full) size, groups the resulting
//! metric records by criterion and checks both the recorded tolerances and
//! the wall-clock budget.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::thread;

use sepkit::harness::{metrics_csv, run_experiment, Experiment, MetricRecord, Params, Status};

const ROOT_SEED: u64 = 2024;

struct Criterion {
    id: usize,
    title: &'static str,
    experiment: Experiment,
    keys: &'static [&'static str],
    budget_s: f64,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        title: "gradient fidelity",
        experiment: Experiment::Gradcheck,
        keys: &["parameters_checked", "max_abs_error", "max_rel_error_weights", "max_rel_error_inputs"],
        budget_s: 10.0,
    },
    Criterion {
        id: 2,
        title: "information identities",
        experiment: Experiment::Info,
        keys: &["mi_identity_max_abs_err", "mi_vs_entropy_sum_max_abs_err", "ce_decomposition_max_abs_err"],
        budget_s: 10.0,
    },
    Criterion {
        id: 3,
        title: "Kalman oracle equivalence",
        experiment: Experiment::Kalman,
        keys: &["filter_vs_batch_mean_max_abs_err", "filter_vs_batch_cov_max_abs_err", "riccati_vs_filter_cov_max_abs_err"],
        budget_s: 30.0,
    },
    Criterion {
        id: 4,
        title: "invariance inequality",
        experiment: Experiment::StaticIb,
        keys: &[
            "invariance_bound_max_violation",
            "eps_min",
            "eps_minus_h_z_given_y_max",
            "sufficiency_max_abs_gap",
            "quantization_refinement_slack",
        ],
        budget_s: 120.0,
    },
    Criterion {
        id: 5,
        title: "stacking and data processing",
        experiment: Experiment::StaticIb,
        keys: &["dpi_composed_max_increase", "stack_nuisance_max_increase", "stack_task_info_max_loss"],
        budget_s: 30.0,
    },
    Criterion {
        id: 6,
        title: "IB collapse and sufficiency endpoints",
        experiment: Experiment::StaticIb,
        keys: &["beta0_accuracy", "beta_high_info_bound", "beta_high_accuracy_minus_chance"],
        budget_s: 300.0,
    },
    Criterion {
        id: 7,
        title: "n-step prediction bound",
        experiment: Experiment::Seprep,
        keys: &["nstep_min_slack", "nstep_exact_posterior_slack", "nstep_marginal_slack_vs_history_info"],
        budget_s: 60.0,
    },
    Criterion {
        id: 8,
        title: "Kalman filter as a separating representation",
        experiment: Experiment::Seprep,
        keys: &["kalman_separator_nll_max_abs_err"],
        budget_s: 10.0,
    },
    Criterion {
        id: 9,
        title: "learned filter near-optimality",
        experiment: Experiment::Seprep,
        keys: &["kalman_nll", "learned_nll", "learned_nll_rel_gap", "learned_mean_kl"],
        budget_s: 600.0,
    },
    Criterion {
        id: 10,
        title: "beta -> 0 cross-entropy trend",
        experiment: Experiment::Seprep,
        keys: &["ce_mean[", "ce_std[", "ce_increase["],
        budget_s: 900.0,
    },
    Criterion {
        id: 11,
        title: "separation principle on finite POMDPs",
        experiment: Experiment::ControlSep,
        keys: &[
            "instances",
            "shared_belief_groups",
            "collision_shared_groups",
            "max_q_spread",
            "belief_policy_return_gap",
            "reward_sufficiency_q_max_dev",
        ],
        budget_s: 120.0,
    },
    Criterion {
        id: 12,
        title: "flatness diagnostic",
        experiment: Experiment::StaticIb,
        keys: &["flatness_info_estimate", "flatness_bound_rhs", "flatness_hessian_trace", "flatness_finite", "quadratic_trace_abs_err"],
        budget_s: 60.0,
    },
];

fn matches(c: &Criterion, r: &MetricRecord) -> bool {
    r.experiment == c.experiment.name() && c.keys.iter().any(|k| if k.ends_with('[') { r.key.starts_with(k) } else { r.key == *k })
}

fn main() -> ExitCode {
    let params = Params::default();
    let results: BTreeMap<Experiment, Result<Vec<MetricRecord>, String>> = thread::scope(|s| {
        let handles: Vec<_> = Experiment::EACH
            .iter()
            .map(|&e| {
                let p = &params;
                (e, s.spawn(move || run_experiment(e, p, ROOT_SEED).map(|(r, _)| r).map_err(|e| e.to_string())))
            })
            .collect();
        handles.into_iter().map(|(e, h)| (e, h.join().unwrap_or_else(|_| Err("panicked".into())))).collect()
    });

    let mut failed = 0;
    for c in CRITERIA {
        let records = match &results[&c.experiment] {
            Ok(r) => r,
            Err(e) => {
                println!("criterion {:>2} FAIL  {}: {e}", c.id, c.title);
                failed += 1;
                continue;
            }
        };
        let mine: Vec<&MetricRecord> = records.iter().filter(|r| matches(c, r)).collect();
        let seconds: f64 = mine.iter().map(|r| r.seconds).sum();
        let gated: Vec<&&MetricRecord> = mine.iter().filter(|r| r.status != Status::Report).collect();
        let bad: Vec<String> = gated
            .iter()
            .filter(|r| r.status == Status::Fail || !r.value.is_finite())
            .map(|r| format!("{}={:e} (tol {:e})", r.key, r.value, r.tolerance.unwrap_or(f64::NAN)))
            .collect();
        let over_budget = seconds > c.budget_s;
        let ok = !mine.is_empty() && bad.is_empty() && !over_budget;
        let detail = if ok {
            gated.iter().map(|r| format!("{}={:e}", r.key, r.value)).collect::<Vec<_>>().join(" ")
        } else if mine.is_empty() {
            "no records".to_string()
        } else if over_budget {
            format!("over budget {} {}", c.budget_s, bad.join(" "))
        } else {
            bad.join(" ")
        };
        println!("criterion {:>2} {}  {} [{seconds:.2}s / {}s] {detail}", c.id, if ok { "PASS" } else { "FAIL" }, c.title, c.budget_s);
        if !ok {
            failed += 1;
        }
    }

    // Same configuration, same bytes.
    let cheap = [Experiment::Gradcheck, Experiment::Info, Experiment::Kalman, Experiment::ControlSep];
    let identical = cheap.iter().all(|&e| match (&results[&e], run_experiment(e, &params, ROOT_SEED)) {
        (Ok(a), Ok((b, _))) => metrics_csv(a) == metrics_csv(&b),
        _ => false,
    });
    println!("determinism    {}  repeated runs give byte-identical metrics", if identical { "PASS" } else { "FAIL" });
    if !identical {
        failed += 1;
    }

    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} failing");
        ExitCode::FAILURE
    }
}
