//! Command-line front end: plan, evaluate, baseline, sweep, simulate, and
//! Wasserstein estimation over the scenario/plan/report JSON formats.
//!
//! Exit codes: 0 success, 1 input or I/O error, 2 no feasible plan (or an
//! evaluated/simulated plan violating its budgets).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgeplan_core::config::{self, ScenarioConfig};
use edgeplan_core::planner::{self, Scheme};
use edgeplan_core::sim;
use edgeplan_core::{bound, metrics, Error};

#[derive(Parser)]
#[command(
    name = "edgeplan",
    version,
    about = "Two-stage edge learning resource planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Override for the outer stopping threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override for the pre-training round cap.
    #[arg(long = "m-max")]
    m_max: Option<u32>,
    /// Override for the fine-tuning round cap.
    #[arg(long = "n-max")]
    n_max: Option<u32>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = config::load_scenario(&self.scenario)?;
        if let Some(eps) = self.epsilon {
            cfg.solver.epsilon = eps;
        }
        if let Some(m) = self.m_max {
            cfg.search.m_max = m;
            cfg.search.m_min = cfg.search.m_min.min(m);
        }
        if let Some(n) = self.n_max {
            cfg.search.n_max = n;
            cfg.search.n_min = cfg.search.n_min.min(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search the full (M, N) grid and write the best plan.
    Plan {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory for plan.json, report.json, grid.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an existing plan file against a scenario.
    Evaluate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Plan file (JSON).
        #[arg(long)]
        plan: PathBuf,
        /// Report output path (defaults to stdout summary only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one benchmark scheme, or all schemes side by side.
    Baseline {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// proposed | fixed_power | fixed_clock | fixed_batch |
        /// pretrain_only | finetune_only | all
        #[arg(long, default_value = "all")]
        scheme: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-plan while sweeping one scenario parameter over a grid.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long = "sweep-param", value_enum)]
        sweep_param: SweepParam,
        /// Comma-separated, strictly increasing grid of values.
        #[arg(long = "sweep-grid", value_delimiter = ',')]
        sweep_grid: Vec<f64>,
        /// Schemes to include (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "proposed")]
        scheme: Vec<String>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic quadratic-task emulator against a plan and check
    /// the convergence bound and per-stage inequalities.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        plan: PathBuf,
        /// Monte-Carlo seed count.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Base seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task dimension.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Output directory for trace.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical Wasserstein-1 distance between two sample files
    /// (plain text, one whitespace-separated vector per line).
    Wasserstein {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        method: WassersteinMethod,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Tau0S,
    E0J,
    Wdist,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Tau0S => "tau0_s",
            SweepParam::E0J => "e0_j",
            SweepParam::Wdist => "wdist",
        }
    }

    fn apply(self, cfg: &mut ScenarioConfig, value: f64) {
        match self {
            SweepParam::Tau0S => cfg.budgets.tau0_s = value,
            SweepParam::E0J => cfg.budgets.e0_j = value,
            SweepParam::Wdist => cfg.learning.wdist = value,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WassersteinMethod {
    /// Sorted order statistics for 1-d data, matching otherwise.
    Auto,
    Sorted,
    Matching,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Plan { scenario, out } => cmd_plan(&scenario, &out),
        Command::Evaluate {
            scenario,
            plan,
            out,
        } => cmd_evaluate(&scenario, &plan, out.as_deref()),
        Command::Baseline {
            scenario,
            scheme,
            out,
        } => cmd_baseline(&scenario, &scheme, &out),
        Command::Sweep {
            scenario,
            sweep_param,
            sweep_grid,
            scheme,
            out,
        } => cmd_sweep(&scenario, sweep_param, &sweep_grid, &scheme, &out),
        Command::Simulate {
            scenario,
            plan,
            seeds,
            seed,
            dim,
            out,
        } => cmd_simulate(&scenario, &plan, seeds, seed, dim, &out),
        Command::Wasserstein { a, b, method } => cmd_wasserstein(&a, &b, method),
    }
}

fn cmd_plan(args: &ScenarioArgs, out: &Path) -> anyhow::Result<ExitCode> {
    let cfg = args.load()?;
    std::fs::create_dir_all(out)?;
    match planner::plan_optimal(&cfg) {
        Ok(outcome) => {
            config::save_plan(out.join("plan.json"), &outcome.plan)?;
            config::save_report(out.join("report.json"), &outcome.report)?;
            planner::write_grid_csv(out.join("grid.csv"), &outcome.cells)?;
            println!(
                "best cell m={} n={} upsilon={:.6e} delay={:.3}s energy={:.3}J",
                outcome.plan.m,
                outcome.plan.n,
                outcome.report.upsilon.unwrap_or(f64::NAN),
                outcome.report.total_delay_s,
                outcome.report.total_energy_j
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::NoFeasibleCell) => {
            eprintln!("no feasible cell in the search space");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_evaluate(
    args: &ScenarioArgs,
    plan_path: &Path,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let cfg = args.load()?;
    let plan = config::load_plan(plan_path)?;
    let report = metrics::totals(&cfg, &plan)?;
    if let Some(path) = out {
        config::save_report(path, &report)?;
    }
    println!(
        "upsilon={} delay={:.6}s energy={:.6}J feasible={}",
        report.upsilon.map_or("n/a".into(), |u| format!("{u:.6e}")),
        report.total_delay_s,
        report.total_energy_j,
        report.feasible
    );
    for v in &report.violations {
        println!("violation {} excess {:.3e}", v.constraint, v.excess);
    }
    Ok(if report.feasible {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_baseline(args: &ScenarioArgs, scheme: &str, out: &Path) -> anyhow::Result<ExitCode> {
    let cfg = args.load()?;
    std::fs::create_dir_all(out)?;
    let schemes: Vec<Scheme> = if scheme == "all" {
        Scheme::ALL.to_vec()
    } else {
        vec![scheme.parse()?]
    };

    let mut rows = String::from("scheme,m,n,upsilon,delay_s,energy_j\n");
    let mut any_feasible = false;
    for sch in &schemes {
        match planner::plan_scheme(&cfg, *sch) {
            Ok(outcome) => {
                any_feasible = true;
                config::save_plan(out.join(format!("plan_{}.json", sch.name())), &outcome.plan)?;
                config::save_report(
                    out.join(format!("report_{}.json", sch.name())),
                    &outcome.report,
                )?;
                rows.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    sch.name(),
                    outcome.plan.m,
                    outcome.plan.n,
                    outcome.report.upsilon.unwrap_or(f64::NAN),
                    outcome.report.total_delay_s,
                    outcome.report.total_energy_j
                ));
            }
            Err(Error::NoFeasibleCell) => {
                rows.push_str(&format!("{},,,,,\n", sch.name()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    std::fs::write(out.join("comparison.csv"), &rows)?;
    print!("{rows}");
    Ok(if any_feasible {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_sweep(
    args: &ScenarioArgs,
    param: SweepParam,
    grid: &[f64],
    scheme_names: &[String],
    out: &Path,
) -> anyhow::Result<ExitCode> {
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        anyhow::bail!("sweep grid must be strictly increasing with at least 2 values");
    }
    let schemes: Vec<Scheme> = scheme_names
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    let base = args.load()?;

    let mut rows = String::from(
        "param,value,scheme,upsilon,delay_s,energy_j,pre_delay_s,pre_energy_j,fine_delay_s,fine_energy_j\n",
    );
    for &value in grid {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        cfg.validate()?;
        for sch in &schemes {
            match planner::plan_scheme(&cfg, *sch) {
                Ok(o) => {
                    let r = &o.report;
                    rows.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        param.name(),
                        value,
                        sch.name(),
                        r.upsilon.unwrap_or(f64::NAN),
                        r.total_delay_s,
                        r.total_energy_j,
                        r.per_round_delay.pretrain_total(),
                        r.per_round_energy.pretrain_total(),
                        r.per_round_delay.finetune_total(),
                        r.per_round_energy.finetune_total(),
                    ));
                }
                // Infeasible cells leave the metric columns empty; the
                // sweep keeps going.
                Err(Error::NoFeasibleCell) => {
                    rows.push_str(&format!(
                        "{},{},{},,,,,,,\n",
                        param.name(),
                        value,
                        sch.name()
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    std::fs::write(out, &rows)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    args: &ScenarioArgs,
    plan_path: &Path,
    seeds: u64,
    base_seed: u64,
    dim: usize,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let cfg = args.load()?;
    let plan = config::load_plan(plan_path)?;
    if !config::validate_plan(&cfg, &plan)?.is_empty() {
        eprintln!("plan violates its box constraints; simulating anyway");
    }
    std::fs::create_dir_all(out)?;

    let task = sim::QuadraticTask::for_profile(&cfg.learning, dim)?;
    let gamma = cfg.learning.gamma;
    let shift_bound = cfg.learning.rho_tilde * cfg.learning.wdist;
    let required = sim::required_shift(&task, &plan.d_batch, gamma);
    if required > shift_bound + 1e-12 {
        anyhow::bail!(
            "scenario shift penalty {shift_bound} does not cover the task's hand-off gap {required}"
        );
    }

    let traces: Vec<sim::SgdTrace> = (0..seeds)
        .map(|s| sim::run_synthetic_sgd(&task, gamma, &plan.d_batch, &plan.b_batch, base_seed + s))
        .collect::<Result<_, _>>()?;
    let bound_check = sim::check_convergence_bound(
        &task,
        gamma,
        &plan.d_batch,
        &plan.b_batch,
        shift_bound,
        &traces,
    )?;
    let lemmas = sim::check_lemma_inequalities(
        &task,
        gamma,
        &plan.d_batch,
        &plan.b_batch,
        shift_bound,
        &traces,
    )?;

    sim::sgd::write_mean_trace_csv(out.join("trace.csv"), &traces)?;
    let summary = serde_json::json!({
        "seeds": seeds,
        "dim": dim,
        "bound": bound_check,
        "lemmas": lemmas,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    println!(
        "bound: empirical {:.6e} (se {:.2e}) <= upsilon {:.6e}: {}",
        bound_check.empirical_mean,
        bound_check.empirical_se,
        bound_check.upsilon,
        bound_check.holds
    );
    println!(
        "descent check: {}, transfer check: {}",
        lemmas.finetune_descent.holds, lemmas.pretrain_transfer.holds
    );
    Ok(if bound_check.holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn read_samples(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        rows.push(
            row.map_err(|e| anyhow::anyhow!("{}:{}: bad number: {e}", path.display(), lineno + 1))?,
        );
    }
    anyhow::ensure!(!rows.is_empty(), "{}: no samples", path.display());
    Ok(rows)
}

fn cmd_wasserstein(a: &Path, b: &Path, method: WassersteinMethod) -> anyhow::Result<ExitCode> {
    let sa = read_samples(a)?;
    let sb = read_samples(b)?;
    let one_d = sa.iter().chain(sb.iter()).all(|r| r.len() == 1);
    let dist = match (method, one_d) {
        (WassersteinMethod::Sorted, true) | (WassersteinMethod::Auto, true) => {
            let fa: Vec<f64> = sa.iter().map(|r| r[0]).collect();
            let fb: Vec<f64> = sb.iter().map(|r| r[0]).collect();
            bound::wasserstein_1d(&fa, &fb)?
        }
        (WassersteinMethod::Sorted, false) => {
            anyhow::bail!("sorted method needs 1-d samples")
        }
        _ => bound::wasserstein_exact_small(&sa, &sb)?,
    };
    println!("{dist}");
    Ok(ExitCode::SUCCESS)
}
