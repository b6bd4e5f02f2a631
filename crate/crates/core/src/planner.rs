//! Outer search over round counts, integer rounding, and benchmark schemes.
//!
//! Every (M, N) cell in the search box gets its own continuous solve; the
//! batch sizes of a converged cell are rounded to integers, repaired if the
//! rounding broke a budget, and re-evaluated. The best feasible cell wins,
//! with ties broken by lower energy, then lower delay, then fewer rounds.
//! Benchmark schemes reuse the same machinery with variables pinned or the
//! search box clipped to one axis.

use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{EvaluationReport, Plan, ScenarioConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, RoundAllocation};
use crate::solver::{
    build_p2_restricted, sca_loop, Restriction, SolveResult, SolveStatus, VarLayout,
};

/// The proposed design plus the five benchmark restrictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Proposed,
    FixedPower,
    FixedClock,
    FixedBatch,
    PretrainOnly,
    FinetuneOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Proposed,
        Scheme::FixedPower,
        Scheme::FixedClock,
        Scheme::FixedBatch,
        Scheme::PretrainOnly,
        Scheme::FinetuneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::FixedPower => "fixed_power",
            Scheme::FixedClock => "fixed_clock",
            Scheme::FixedBatch => "fixed_batch",
            Scheme::PretrainOnly => "pretrain_only",
            Scheme::FinetuneOnly => "finetune_only",
        }
    }

    fn restriction(self) -> Restriction {
        Restriction {
            fix_power: self == Scheme::FixedPower,
            fix_clock: self == Scheme::FixedClock,
            fix_batch: self == Scheme::FixedBatch,
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown scheme `{s}`")))
    }
}

/// One solved (M, N) cell; the stored bound value is the one of the
/// rounded, feasibility-checked plan.
#[derive(Debug, Clone)]
pub struct SearchCell {
    pub m: u32,
    pub n: u32,
    pub solve: SolveResult,
    pub plan: Option<Plan>,
    pub report: Option<EvaluationReport>,
    pub upsilon: Option<f64>,
}

impl SearchCell {
    pub fn status(&self) -> &'static str {
        match self.solve.status {
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::Converged => {
                if self.upsilon.is_some() {
                    "converged"
                } else {
                    "rounding_failed"
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub scheme: &'static str,
    pub plan: Plan,
    pub report: EvaluationReport,
    pub cells: Vec<SearchCell>,
}

/// Full two-dimensional search for the proposed design.
pub fn plan_optimal(cfg: &ScenarioConfig) -> Result<PlanOutcome> {
    plan_scheme(cfg, Scheme::Proposed)
}

/// One of the five benchmark restrictions (or the proposed design).
pub fn plan_baseline(cfg: &ScenarioConfig, scheme: Scheme) -> Result<PlanOutcome> {
    plan_scheme(cfg, scheme)
}

pub fn plan_scheme(cfg: &ScenarioConfig, scheme: Scheme) -> Result<PlanOutcome> {
    let sp = &cfg.search;
    let (m_range, n_range) = match scheme {
        Scheme::PretrainOnly => ((sp.m_min..=sp.m_max), (0..=0)),
        Scheme::FinetuneOnly => ((0..=0), (sp.n_min..=sp.n_max)),
        _ => ((sp.m_min..=sp.m_max), (sp.n_min..=sp.n_max)),
    };
    let restriction = scheme.restriction();

    let rows: Vec<u32> = m_range.collect();
    let row_cells: Vec<Result<Vec<SearchCell>>> = rows
        .par_iter()
        .map(|&m| {
            let mut cells = Vec::new();
            // Cells of a row share pre-training structure; each warm-starts
            // from its left neighbor. Rows are independent jobs.
            let mut prev: Option<(VarLayout, Vec<f64>)> = None;
            for n in n_range.clone() {
                if m + n == 0 {
                    continue;
                }
                let problem = build_p2_restricted(cfg, m, n, restriction)?;
                let warm = prev
                    .as_ref()
                    .map(|(layout, x)| warm_start(&problem, layout, x));
                let solve = sca_loop(&problem, &cfg.solver, warm.as_deref());
                prev = match solve.status {
                    SolveStatus::Converged => Some((solve.layout.clone(), solve.x.clone())),
                    _ => None,
                };
                let mut cell = SearchCell {
                    m,
                    n,
                    plan: None,
                    report: None,
                    upsilon: None,
                    solve,
                };
                if cell.solve.status == SolveStatus::Converged {
                    if let Some((plan, report)) = round_batches(cfg, &cell.solve)? {
                        cell.upsilon = report.upsilon;
                        cell.plan = Some(plan);
                        cell.report = Some(report);
                    }
                }
                cells.push(cell);
            }
            Ok(cells)
        })
        .collect();

    let mut cells = Vec::new();
    for row in row_cells {
        cells.extend(row?);
    }

    let best = cells
        .iter()
        .filter(|c| c.upsilon.is_some())
        .min_by(|a, b| {
            let key = |c: &SearchCell| {
                let r = c.report.as_ref().unwrap();
                (
                    c.upsilon.unwrap(),
                    r.total_energy_j,
                    r.total_delay_s,
                    (c.m + c.n) as f64,
                )
            };
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
                .then(ka.3.total_cmp(&kb.3))
        })
        .ok_or(Error::NoFeasibleCell)?;

    Ok(PlanOutcome {
        scheme: scheme.name(),
        plan: best.plan.clone().unwrap(),
        report: best.report.clone().unwrap(),
        cells,
    })
}

/// Maps the previous cell's solution into the next cell's layout, starting
/// from the new cell's heuristic. Shared rounds copy over; the added round
/// clones its left neighbor; slots with no predecessor keep their
/// heuristic values.
fn warm_start(problem: &crate::solver::CellProblem, old: &VarLayout, old_x: &[f64]) -> Vec<f64> {
    use crate::solver::Slot;
    let new = &problem.layout;
    let mut x = problem.heuristic_start();
    let copy = |x: &mut [f64], dst: Slot, src: Slot| {
        if let (Slot::Var(di), Slot::Var(si)) = (dst, src) {
            x[di] = old_x[si];
        }
    };
    for mi in 0..new.m.min(old.m) {
        copy(&mut x, new.d[mi], old.d[mi]);
        copy(&mut x, new.dr[mi], old.dr[mi]);
        copy(&mut x, new.fs[mi], old.fs[mi]);
    }
    if old.n > 0 {
        for ni in 0..new.n {
            let src_n = ni.min(old.n - 1);
            for ki in 0..new.k {
                let (dn, sn) = (ni * new.k + ki, src_n * old.k + ki);
                copy(&mut x, new.b[dn], old.b[sn]);
                copy(&mut x, new.br[dn], old.br[sn]);
                copy(&mut x, new.fd[dn], old.fd[sn]);
                copy(&mut x, new.p[dn], old.p[sn]);
            }
        }
    }
    x
}

/// Rounds a converged cell's batches to integers and repairs budget
/// overshoot by decrementing the batch entry with the best constraint
/// relief per unit of bound increase.
///
/// Returns `None` when the repair runs out of decrements before the plan
/// turns feasible.
pub fn round_batches(
    cfg: &ScenarioConfig,
    solve: &SolveResult,
) -> Result<Option<(Plan, EvaluationReport)>> {
    // Two integerizations of the continuous solution: nearest (repaired if
    // a budget breaks) and floor (always feasible, filled back up by the
    // polish). Keeping the better one makes the outcome insensitive to
    // which side of a .5 boundary the solver landed on.
    let nearest = round_candidate(cfg, solve, f64::round)?;
    let floored = round_candidate(cfg, solve, f64::floor)?;
    Ok(match (nearest, floored) {
        (Some(a), Some(b)) => {
            let (ua, ub) = (a.1.upsilon.unwrap(), b.1.upsilon.unwrap());
            Some(if ub < ua { b } else { a })
        }
        (a, b) => a.or(b),
    })
}

fn round_candidate(
    cfg: &ScenarioConfig,
    solve: &SolveResult,
    to_int: fn(f64) -> f64,
) -> Result<Option<(Plan, EvaluationReport)>> {
    let mut plan = solve.plan();
    for d in plan.d_batch.iter_mut() {
        *d = to_int(*d).clamp(1.0, cfg.server.batch_max.floor());
    }
    for (ki, row) in plan.b_batch.iter_mut().enumerate() {
        for b in row.iter_mut() {
            *b = to_int(*b).clamp(1.0, cfg.devices[ki].batch_max.floor());
        }
    }

    let lrn = &cfg.learning;
    let rounds = (plan.m + plan.n) as f64;
    let noise_pre = lrn.gamma * lrn.rho * lrn.alpha * lrn.alpha / rounds;
    let noise_fine =
        lrn.gamma * lrn.rho_hat * lrn.alpha_hat * lrn.alpha_hat * cfg.k() as f64 / rounds;
    let tau0 = cfg.budgets.tau0_s;
    let e0 = cfg.budgets.e0_j;

    let mut report = metrics::totals(cfg, &plan)?;
    for _ in 0..200_000 {
        if report.feasible {
            return polish_batches(cfg, plan, report).map(Some);
        }
        // Only budget violations are repairable by shrinking batches.
        if report
            .violations
            .iter()
            .any(|v| v.constraint != "delay_budget" && v.constraint != "energy_budget")
        {
            return Ok(None);
        }
        let delay_hit = report.total_delay_s > tau0;
        let energy_hit = report.total_energy_j > e0;

        let mut best: Option<(f64, BatchEntry)> = None;
        let mut consider = |score: f64, entry: BatchEntry| {
            if score > 0.0 && best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, entry));
            }
        };

        for mi in 0..plan.m as usize {
            let d = plan.d_batch[mi];
            if d < 2.0 {
                continue;
            }
            let f = plan.f_server[mi];
            let delay_relief = lrn.n_flop / (f * cfg.server.flops_per_cycle);
            let energy_relief = cfg.server.pue * lrn.n_flop * cfg.server.power_coeff * f * f
                / cfg.server.flops_per_cycle;
            let relief = f64::from(u8::from(delay_hit)) * delay_relief / tau0
                + f64::from(u8::from(energy_hit)) * energy_relief / e0;
            let cost = noise_pre * (1.0 / (d - 1.0) - 1.0 / d);
            consider(relief / cost, BatchEntry::Pre(mi));
        }
        for ni in 0..plan.n as usize {
            let b_tot = plan.b_tot(ni);
            let old_round_delay = report.per_round_delay.finetune[ni];
            for (ki, dev) in cfg.devices.iter().enumerate() {
                let b = plan.b_batch[ki][ni];
                if b < 2.0 {
                    continue;
                }
                let f = plan.f_device[ki][ni];
                let energy_relief =
                    dev.pue * lrn.n_flop * dev.power_coeff * f * f / dev.flops_per_cycle;
                let delay_relief = if delay_hit {
                    let mut b_col: Vec<f64> = plan.b_batch.iter().map(|r| r[ni]).collect();
                    b_col[ki] -= 1.0;
                    let f_col: Vec<f64> = plan.f_device.iter().map(|r| r[ni]).collect();
                    let p_col: Vec<f64> = plan.p_up.iter().map(|r| r[ni]).collect();
                    let new_delay = metrics::finetune_round_delay(
                        cfg,
                        &RoundAllocation {
                            round: ni,
                            b: &b_col,
                            f: &f_col,
                            p: &p_col,
                        },
                    );
                    (old_round_delay - new_delay).max(0.0)
                } else {
                    0.0
                };
                let relief = f64::from(u8::from(delay_hit)) * delay_relief / tau0
                    + f64::from(u8::from(energy_hit)) * energy_relief / e0;
                let cost = noise_fine * (1.0 / (b_tot - 1.0) - 1.0 / b_tot);
                consider(relief / cost, BatchEntry::Fine(ki, ni));
            }
        }

        match best {
            Some((_, BatchEntry::Pre(mi))) => plan.d_batch[mi] -= 1.0,
            Some((_, BatchEntry::Fine(ki, ni))) => plan.b_batch[ki][ni] -= 1.0,
            None => return Ok(None),
        }
        report = metrics::totals(cfg, &plan)?;
    }
    Ok(None)
}

/// Entries a polish move can touch: one batch slot or a whole stage row.
fn batch_groups(cfg: &ScenarioConfig, plan: &Plan) -> Vec<Vec<BatchEntry>> {
    let mut groups = Vec::new();
    for mi in 0..plan.m as usize {
        groups.push(vec![BatchEntry::Pre(mi)]);
    }
    for ki in 0..cfg.k() {
        for ni in 0..plan.n as usize {
            groups.push(vec![BatchEntry::Fine(ki, ni)]);
        }
    }
    if plan.m > 1 {
        groups.push((0..plan.m as usize).map(BatchEntry::Pre).collect());
    }
    if plan.n > 1 {
        for ki in 0..cfg.k() {
            groups.push(
                (0..plan.n as usize)
                    .map(|ni| BatchEntry::Fine(ki, ni))
                    .collect(),
            );
        }
    }
    groups
}

fn apply_entries(
    cfg: &ScenarioConfig,
    plan: &mut Plan,
    entries: &[BatchEntry],
    delta: f64,
) -> bool {
    for &e in entries {
        let (value, cap) = match e {
            BatchEntry::Pre(mi) => (plan.d_batch[mi] + delta, cfg.server.batch_max.floor()),
            BatchEntry::Fine(ki, ni) => (
                plan.b_batch[ki][ni] + delta,
                cfg.devices[ki].batch_max.floor(),
            ),
        };
        if !(1.0..=cap).contains(&value) {
            return false;
        }
    }
    for &e in entries {
        match e {
            BatchEntry::Pre(mi) => plan.d_batch[mi] += delta,
            BatchEntry::Fine(ki, ni) => plan.b_batch[ki][ni] += delta,
        }
    }
    true
}

/// Greedy descent over unit batch moves: single or stage-row increments
/// and paired decrement/increment swaps. Stops at a local optimum of the
/// integer problem, which makes the result insensitive to which side of a
/// rounding boundary the continuous solution landed on.
fn polish_batches(
    cfg: &ScenarioConfig,
    mut plan: Plan,
    mut report: EvaluationReport,
) -> Result<(Plan, EvaluationReport)> {
    let groups = batch_groups(cfg, &plan);
    for _ in 0..10_000 {
        let current = report.upsilon.unwrap_or(f64::INFINITY);
        let mut best: Option<(f64, Plan, EvaluationReport)> = None;
        let mut consider = |cand: Plan| -> Result<()> {
            let rep = metrics::totals(cfg, &cand)?;
            if rep.feasible {
                let u = rep.upsilon.unwrap_or(f64::INFINITY);
                if u < current * (1.0 - 1e-15) && best.as_ref().is_none_or(|(b, _, _)| u < *b) {
                    best = Some((u, cand, rep));
                }
            }
            Ok(())
        };

        for up in &groups {
            let mut cand = plan.clone();
            if apply_entries(cfg, &mut cand, up, 1.0) {
                consider(cand)?;
            }
            for down in &groups {
                if std::ptr::eq(up, down) {
                    continue;
                }
                let mut cand = plan.clone();
                if apply_entries(cfg, &mut cand, up, 1.0)
                    && apply_entries(cfg, &mut cand, down, -1.0)
                {
                    consider(cand)?;
                }
            }
        }

        match best {
            Some((_, p, r)) => {
                plan = p;
                report = r;
            }
            None => break,
        }
    }
    Ok((plan, report))
}

#[derive(Debug, Clone, Copy)]
enum BatchEntry {
    Pre(usize),
    Fine(usize, usize),
}

/// Grid file: one row per attempted cell, in (m, n) sweep order.
pub fn write_grid_csv(path: impl AsRef<std::path::Path>, cells: &[SearchCell]) -> Result<()> {
    let mut text = String::from("m,n,upsilon,delay_s,energy_j,status\n");
    for c in cells {
        let (ups, delay, energy) = match (&c.upsilon, &c.report) {
            (Some(u), Some(r)) => (
                u.to_string(),
                r.total_delay_s.to_string(),
                r.total_energy_j.to_string(),
            ),
            _ => (String::new(), String::new(), String::new()),
        };
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.m,
            c.n,
            ups,
            delay,
            energy,
            c.status()
        ));
    }
    std::fs::write(path.as_ref(), text).map_err(|source| Error::Write {
        path: path.as_ref().to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::symmetric_scenario;

    #[test]
    fn generous_budgets_pick_max_batches() {
        let mut cfg = symmetric_scenario();
        cfg.budgets.tau0_s = 1e6;
        cfg.budgets.e0_j = 1e6;
        cfg.search.m_max = 2;
        cfg.search.n_max = 2;
        let out = plan_optimal(&cfg).unwrap();
        // The bound decreases in every batch, so all batches cap out.
        for &d in &out.plan.d_batch {
            assert_eq!(d, cfg.server.batch_max);
        }
        for row in &out.plan.b_batch {
            for &b in row {
                assert_eq!(b, 700.0);
            }
        }
        assert!(out.report.feasible);
    }

    #[test]
    fn zero_m_max_equals_finetune_only() {
        let mut cfg = symmetric_scenario();
        cfg.search.m_max = 0;
        cfg.search.n_max = 3;
        let restricted = plan_optimal(&cfg).unwrap();
        let mut full = symmetric_scenario();
        full.search.m_max = 4;
        full.search.n_max = 3;
        let baseline = plan_baseline(&full, Scheme::FinetuneOnly).unwrap();
        assert_eq!(restricted.plan.m, 0);
        assert_eq!(baseline.plan.m, 0);
        assert_eq!(restricted.plan.n, baseline.plan.n);
        let (a, b) = (
            restricted.report.upsilon.unwrap(),
            baseline.report.upsilon.unwrap(),
        );
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn fixed_power_plans_transmit_at_cap() {
        let mut cfg = symmetric_scenario();
        cfg.search.m_max = 1;
        cfg.search.n_max = 2;
        let out = plan_baseline(&cfg, Scheme::FixedPower).unwrap();
        for (ki, row) in out.plan.p_up.iter().enumerate() {
            for &p in row {
                assert_eq!(p, cfg.devices[ki].p_max_w);
            }
        }
    }

    #[test]
    fn pretrain_only_has_no_finetune_rounds() {
        let mut cfg = symmetric_scenario();
        cfg.search.m_max = 3;
        cfg.search.n_max = 3;
        let out = plan_baseline(&cfg, Scheme::PretrainOnly).unwrap();
        assert_eq!(out.plan.n, 0);
        assert!(out.plan.m >= 1);
        // Only pre-training noise, shift, and gap terms remain.
        let bd = crate::bound::convergence_bound(
            &cfg.learning,
            cfg.k(),
            &out.plan.d_batch,
            &out.plan.b_batch,
        )
        .unwrap();
        assert_eq!(bd.omega, 0.0);
        assert!(bd.shift_term > 0.0);
        assert!(bd.init_term > 0.0);
    }

    #[test]
    fn infeasible_budgets_report_no_cell() {
        let mut cfg = symmetric_scenario();
        cfg.budgets.tau0_s = 1e-9;
        cfg.search.m_max = 1;
        cfg.search.n_max = 1;
        assert!(matches!(plan_optimal(&cfg), Err(Error::NoFeasibleCell)));
    }

    #[test]
    fn grid_csv_has_documented_columns() {
        let mut cfg = symmetric_scenario();
        cfg.search.m_max = 1;
        cfg.search.n_max = 1;
        let out = plan_optimal(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&path, &out.cells).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "m,n,upsilon,delay_s,energy_j,status");
        assert_eq!(lines.count(), out.cells.len());
    }
}
