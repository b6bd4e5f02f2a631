//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its runtime. Tolerances and runtime caps are fixed here.
//!
//! Run with `cargo test -p edgeplan-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use edgeplan_core::config::ScenarioConfig;
use edgeplan_core::planner::{self, Scheme};
use edgeplan_core::sim::{self, QuadraticTask};
use edgeplan_core::solver::{self, ConId, SolveStatus};
use edgeplan_core::testutil::{random_plan, random_scenario, symmetric_scenario};
use edgeplan_core::{bound, metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finish(criterion: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed < budget,
        "{criterion} took {elapsed:?}, over its {budget:?} budget"
    );
    println!("criterion {criterion}: PASS ({elapsed:?})");
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true; // covers shared infinities
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Criterion 1: Closed-form metric fidelity: the worked uplink rate, the exact
/// upload-energy identity, and ledger replay equal to the closed forms
/// within 1e-12 relative on 1000 random plans.
#[test]
fn criterion_1_closed_form_metric_fidelity() {
    let t0 = Instant::now();
    let cfg = symmetric_scenario();

    let rate = metrics::uplink_rate(&cfg.devices[0], 0.5);
    assert!(
        (rate - 1.89316e6).abs() / 1.89316e6 <= 1e-3,
        "uplink rate {rate} not within 1e-3 of 1.89316e6"
    );

    for p in [0.031, 0.17, 0.5] {
        let b = vec![250.0; 3];
        let f = vec![2.4e8; 3];
        let pw = vec![p; 3];
        let ledger = metrics::finetune_round_ledger(
            &cfg,
            &metrics::RoundAllocation {
                round: 0,
                b: &b,
                f: &f,
                p: &pw,
            },
        );
        for k in 0..3 {
            assert_eq!(
                ledger.upload_energy_j[k].to_bits(),
                (p * ledger.upload_delay_s[k]).to_bits(),
                "upload energy must be exactly power times upload time"
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let plan = random_plan(&cfg, &mut rng, 4, 4);
        let closed = metrics::totals(&cfg, &plan).unwrap();
        let replay = sim::replay_ledger(&cfg, &plan).unwrap();
        assert!(rel_close(closed.total_delay_s, replay.total_delay_s, 1e-12));
        assert!(rel_close(
            closed.total_energy_j,
            replay.total_energy_j,
            1e-12
        ));
        assert!(rel_close(
            closed.upsilon.unwrap(),
            replay.upsilon.unwrap(),
            1e-12
        ));
        assert_eq!(closed.feasible, replay.feasible);
    }

    finish(
        "1 (closed-form metric fidelity)",
        t0,
        Duration::from_secs(10),
    );
}

/// Criterion 2: Surrogate correctness: tangency at the expansion point within 1e-10
/// relative; majorization on 100 sampled points per instance, 50 random
/// instances.
#[test]
fn criterion_2_surrogate_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..50u64 {
        let cfg = random_scenario(seed);
        let m = (seed % 3) as u32;
        let n = 1 + (seed % 2) as u32;
        let cell = solver::build_p2(&cfg, m, n).unwrap();

        let sample = |rng: &mut ChaCha8Rng| {
            let mut x = cell.heuristic_start();
            for &(idx, lo, hi) in cell.boxes() {
                x[idx] = rng.gen_range(lo + 1e-9 * (hi - lo)..hi);
            }
            x
        };

        let x0 = sample(&mut rng);
        let sur = solver::surrogate_at(&cell, &x0);
        let sur_energy = |x: &[f64]| {
            sur.cons
                .iter()
                .find(|c| c.id == ConId::EnergyBudget)
                .unwrap()
                .expr
                .value(x)
        };

        // Tangency at the expansion point.
        let te = cell.energy_true_value(&x0);
        assert!(
            rel_close(sur_energy(&x0), te, 1e-10),
            "energy tangency: {} vs {}",
            sur_energy(&x0),
            te
        );
        for (id, lhs) in cell.links_true_values(&x0) {
            let sur_link = sur
                .cons
                .iter()
                .find(|c| c.id == id)
                .unwrap()
                .expr
                .value(&x0);
            assert!(
                (sur_link - lhs).abs() <= 1e-10 * lhs.abs().max(1e-3),
                "link tangency: {sur_link} vs {lhs}"
            );
        }

        // Majorization on sampled points.
        for _ in 0..100 {
            let x = sample(&mut rng);
            assert!(
                sur_energy(&x) >= cell.energy_true_value(&x) - 1e-12,
                "surrogate energy must upper-bound the true energy"
            );
            for (id, lhs) in cell.links_true_values(&x) {
                let sur_link = sur.cons.iter().find(|c| c.id == id).unwrap().expr.value(&x);
                assert!(
                    sur_link >= lhs - 1e-12,
                    "linearized link must imply the true link"
                );
            }
        }
    }
    finish("2 (surrogate correctness)", t0, Duration::from_secs(30));
}

/// Criterion 3: Outer-iteration monotonicity: the accepted objective sequence never
/// increases by more than 1e-9 relative per iteration on 20 random
/// feasible instances.
#[test]
fn criterion_3_sca_monotonicity() {
    let t0 = Instant::now();
    let mut checked = 0;
    for seed in 0..20u64 {
        let cfg = random_scenario(seed);
        let m = 1 + (seed % 2) as u32;
        let n = 1 + ((seed / 2) % 2) as u32;
        let cell = solver::build_p2(&cfg, m, n).unwrap();
        let res = solver::sca_loop(&cell, &cfg.solver, None);
        assert_eq!(
            res.status,
            SolveStatus::Converged,
            "seed {seed} cell ({m},{n})"
        );
        let objs: Vec<f64> = res.trace.iter().map(|r| r.objective).collect();
        for w in objs.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "seed {seed}: objective rose from {} to {}",
                w[0],
                w[1]
            );
        }
        checked += 1;
    }
    assert_eq!(checked, 20);
    finish(
        "3 (outer-iteration monotonicity)",
        t0,
        Duration::from_secs(120),
    );
}

/// Criterion 4: Oracle equivalence on single-device instances: the solver's rounded
/// bound value is at most 1.02x the 20-point grid minimum, and both sides
/// agree on infeasibility.
#[test]
fn criterion_4_oracle_equivalence() {
    let t0 = Instant::now();
    let mut base = symmetric_scenario();
    base.devices.truncate(1);

    let mut scenarios: Vec<ScenarioConfig> = Vec::new();
    let mut roomy = base.clone();
    roomy.budgets.tau0_s = 8.0;
    roomy.budgets.e0_j = 40.0;
    scenarios.push(roomy);
    let mut tight = base.clone();
    tight.budgets.tau0_s = 3.2;
    tight.budgets.e0_j = 9.0;
    scenarios.push(tight);

    for cfg in &scenarios {
        for (m, n) in [(1u32, 1u32), (1, 2), (2, 1), (2, 2)] {
            let cell = solver::build_p2(cfg, m, n).unwrap();
            let res = solver::sca_loop(&cell, &cfg.solver, None);
            assert_eq!(res.status, SolveStatus::Converged);
            let (_, report) = planner::round_batches(cfg, &res).unwrap().unwrap();
            let oracle = sim::grid_oracle(cfg, m, n, 20).unwrap();
            let grid_best = oracle.best.expect("feasible instance").upsilon;
            let solver_ups = report.upsilon.unwrap();
            assert!(
                solver_ups <= grid_best * 1.02,
                "cell ({m},{n}): solver {solver_ups} vs grid {grid_best}"
            );
        }
    }

    // Delay threshold below the downlink transfer time alone: both report
    // infeasible.
    let mut impossible = base.clone();
    impossible.budgets.tau0_s = 1e-4;
    for (m, n) in [(1u32, 1u32), (1, 2), (2, 1), (2, 2)] {
        let cell = solver::build_p2(&impossible, m, n).unwrap();
        let res = solver::sca_loop(&cell, &impossible.solver, None);
        assert_eq!(res.status, SolveStatus::Infeasible);
        assert!(sim::grid_oracle(&impossible, m, n, 20)
            .unwrap()
            .best
            .is_none());
    }

    finish("4 (oracle equivalence)", t0, Duration::from_secs(300));
}

/// Criterion 5: Restriction dominance: on 10 random scenarios the full design's
/// bound value is at most every baseline's, tolerance 1e-9.
#[test]
fn criterion_5_restriction_dominance() {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let cfg = random_scenario(seed);
        let proposed = planner::plan_optimal(&cfg).unwrap();
        let pu = proposed.report.upsilon.unwrap();
        for scheme in [
            Scheme::FixedPower,
            Scheme::FixedClock,
            Scheme::FixedBatch,
            Scheme::PretrainOnly,
            Scheme::FinetuneOnly,
        ] {
            match planner::plan_baseline(&cfg, scheme) {
                Ok(outcome) => {
                    let bu = outcome.report.upsilon.unwrap();
                    assert!(
                        pu <= bu * (1.0 + 1e-9),
                        "seed {seed}: proposed {pu} above {} baseline {bu}",
                        scheme.name()
                    );
                }
                // An infeasible restriction is trivially dominated.
                Err(edgeplan_core::Error::NoFeasibleCell) => {}
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
    }
    finish("5 (restriction dominance)", t0, Duration::from_secs(600));
}

/// Criterion 6: Bound validity on synthetic quadratic tasks: across a 3x3
/// noise-by-shift design with 100 seeds each, the Monte-Carlo mean of the
/// average squared gradient norm stays below the bound plus two standard
/// errors; the noiseless runs decay at exactly the squared contraction
/// rate.
#[test]
fn criterion_6_bound_validity() {
    let t0 = Instant::now();
    let gamma = 0.4;
    let d_batch = vec![20.0; 3];
    let b_batch = vec![vec![30.0; 4], vec![50.0; 4]];

    for alpha in [0.0, 1.0, 3.0] {
        for wdist in [0.0, 0.5, 2.0] {
            let mut learning = symmetric_scenario().learning;
            learning.gamma = gamma;
            learning.rho = 1.0;
            learning.rho_hat = 1.0;
            learning.alpha = alpha;
            learning.alpha_hat = alpha;
            learning.rho_tilde = 1.0;
            learning.wdist = wdist;
            learning.loss_gap = 2.0;
            let task = QuadraticTask::for_profile(&learning, 8).unwrap();
            let shift_bound = learning.rho_tilde * wdist;
            assert!(
                sim::required_shift(&task, &d_batch, gamma) <= shift_bound + 1e-12,
                "task construction must keep the hand-off change within the shift penalty"
            );

            let traces: Vec<sim::SgdTrace> = (0..100)
                .map(|s| sim::run_synthetic_sgd(&task, gamma, &d_batch, &b_batch, s).unwrap())
                .collect();
            let check = sim::check_convergence_bound(
                &task,
                gamma,
                &d_batch,
                &b_batch,
                shift_bound,
                &traces,
            )
            .unwrap();
            assert!(
                check.holds,
                "alpha={alpha} wdist={wdist}: mean {} se {} vs bound {}",
                check.empirical_mean, check.empirical_se, check.upsilon
            );
            let lemmas = sim::check_lemma_inequalities(
                &task,
                gamma,
                &d_batch,
                &b_batch,
                shift_bound,
                &traces,
            )
            .unwrap();
            assert!(lemmas.finetune_descent.holds);
            assert!(lemmas.pretrain_transfer.holds);

            if alpha == 0.0 {
                let tr = &traces[0];
                let rate = (1.0 - gamma) * (1.0 - gamma); // rho = 1
                for w in tr.pre.windows(2) {
                    assert!(
                        rel_close(w[1].grad_norm_sq / w[0].grad_norm_sq, rate, 1e-10),
                        "noiseless decay rate off: {} vs {rate}",
                        w[1].grad_norm_sq / w[0].grad_norm_sq
                    );
                }
            }
        }
    }
    finish("6 (bound validity)", t0, Duration::from_secs(120));
}

/// Criterion 7: Large-round-count limit: with fixed batches the bound lands within
/// 1% of gamma * rho_hat * alpha_hat^2 * K / B_tot at N = 10^4 (0.0004
/// for the worked constants).
#[test]
fn criterion_7_asymptotic_limit() {
    let t0 = Instant::now();
    let mut learning = symmetric_scenario().learning;
    learning.gamma = 0.01;
    learning.rho = 1.0;
    learning.rho_hat = 1.0;
    learning.alpha = 2.0;
    learning.alpha_hat = 2.0;
    learning.wdist = 0.0;
    learning.loss_gap = 0.0;

    let limit = bound::asymptotic_limit(&learning, 3, 300.0);
    assert!(rel_close(limit, 0.0004, 1e-12));

    let n = 10_000;
    let d = vec![100.0, 100.0];
    let b = vec![vec![100.0; n]; 3];
    let upsilon = bound::convergence_bound(&learning, 3, &d, &b)
        .unwrap()
        .upsilon;
    assert!(
        (upsilon - limit).abs() / limit < 0.01,
        "bound {upsilon} vs limit {limit}"
    );
    finish("7 (asymptotic limit)", t0, Duration::from_secs(1));
}

/// Criterion 8: Resource-shift trend: sweeping the distribution distance over 8
/// grid points on the small-model scenario, the chosen plan's
/// pre-training delay/energy subtotals never increase and the fine-tuning
/// subtotals never decrease, allowing at most one tie-breaking inversion.
#[test]
fn criterion_8_distribution_shift_trend() {
    let t0 = Instant::now();
    let base = edgeplan_core::presets::mnist_scale();
    let grid: Vec<f64> = (0..8).map(|i| 0.5 * i as f64).collect();

    let mut rows = Vec::new();
    for &w in &grid {
        let mut cfg = base.clone();
        cfg.learning.wdist = w;
        let outcome = planner::plan_optimal(&cfg).unwrap();
        let r = &outcome.report;
        rows.push((
            r.per_round_delay.pretrain_total(),
            r.per_round_energy.pretrain_total(),
            r.per_round_delay.finetune_total(),
            r.per_round_energy.finetune_total(),
        ));
    }

    let count_inversions = |values: Vec<f64>, rising: bool| -> usize {
        values
            .windows(2)
            .filter(|w| {
                let tol = 1e-9 * w[0].abs().max(1.0);
                if rising {
                    w[1] < w[0] - tol
                } else {
                    w[1] > w[0] + tol
                }
            })
            .count()
    };
    assert!(
        count_inversions(rows.iter().map(|r| r.0).collect(), false) <= 1,
        "{rows:?}"
    );
    assert!(
        count_inversions(rows.iter().map(|r| r.1).collect(), false) <= 1,
        "{rows:?}"
    );
    assert!(
        count_inversions(rows.iter().map(|r| r.2).collect(), true) <= 1,
        "{rows:?}"
    );
    assert!(
        count_inversions(rows.iter().map(|r| r.3).collect(), true) <= 1,
        "{rows:?}"
    );
    // The shift must actually move resources: pre-training work vanishes
    // at the top of the grid.
    assert!(rows[0].0 > 0.0);
    assert_eq!(rows.last().unwrap().0, 0.0, "{rows:?}");

    finish("8 (distribution-shift trend)", t0, Duration::from_secs(600));
}

/// Criterion 9: Wasserstein estimator: exact zero on identical samples, exact
/// translations, and agreement between the sorted and matching methods on
/// 100 random 1-d pairs within 1e-12.
#[test]
fn criterion_9_wasserstein_estimator() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let samples: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
    assert_eq!(bound::wasserstein_1d(&samples, &samples).unwrap(), 0.0);

    for c in [-2.5, 0.25, 7.0] {
        let shifted: Vec<f64> = samples.iter().map(|x| x + c).collect();
        let d = bound::wasserstein_1d(&samples, &shifted).unwrap();
        assert!(
            (d - c.abs()).abs() <= 1e-12,
            "translation distance {d} vs {}",
            c.abs()
        );
    }

    for _ in 0..100 {
        let n = rng.gen_range(1..=30);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let sorted = bound::wasserstein_1d(&a, &b).unwrap();
        let a2: Vec<Vec<f64>> = a.iter().map(|&x| vec![x]).collect();
        let b2: Vec<Vec<f64>> = b.iter().map(|&x| vec![x]).collect();
        let matched = bound::wasserstein_exact_small(&a2, &b2).unwrap();
        assert!(
            (sorted - matched).abs() <= 1e-12 * sorted.abs().max(1.0),
            "sorted {sorted} vs matched {matched}"
        );
    }
    finish("9 (Wasserstein estimator)", t0, Duration::from_secs(10));
}
