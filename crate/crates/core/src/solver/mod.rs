//! Continuous inner solver for a fixed pair of round counts (M, N).
//!
//! The decision variables are batch sizes with reciprocal auxiliaries,
//! clock frequencies, uplink powers, and one epigraph variable per
//! fine-tuning round for the max-over-devices delay. The delay constraint
//! and the per-device epigraph inequalities are convex as written; the
//! energy constraint's upload term and the reciprocal linking constraints
//! are not, and are replaced by tangent majorants at the current expansion
//! point. Each convex subproblem is solved with the in-house log-barrier
//! Newton method; the outer loop re-expands until the objective decrease
//! falls below the stopping threshold.
//!
//! Internally clock frequencies are expressed in GHz and the objective is
//! scaled to order one at the starting point, which keeps the Newton
//! systems well conditioned; plans decoded from a solution are back in SI
//! units.

pub mod expr;
pub mod newton;

use crate::config::{Plan, ScenarioConfig, SolverSettings};
use crate::error::{Error, Result};
use crate::metrics;
use expr::{Arg, Expr};
use newton::{minimize_barrier, phase_one, BarrierOptions, PhaseOneOutcome};

/// Internal clock unit: cycles per second per solver unit.
pub const FREQ_SCALE: f64 = 1e9;

/// Which decision axes a benchmark scheme pins to fixed values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Restriction {
    /// Uplink powers fixed at each device's maximum.
    pub fix_power: bool,
    /// Server and device clocks fixed at their maxima.
    pub fix_clock: bool,
    /// Batch sizes fixed at their maxima.
    pub fix_batch: bool,
}

/// A decision slot: either a solver variable or a value fixed at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Var(usize),
    Fixed(f64),
}

impl Slot {
    fn arg(self) -> Arg {
        match self {
            Slot::Var(i) => Arg::Var(i),
            Slot::Fixed(v) => Arg::Const(v),
        }
    }

    fn value(self, x: &[f64]) -> f64 {
        match self {
            Slot::Var(i) => x[i],
            Slot::Fixed(v) => v,
        }
    }
}

/// Maps decision quantities to positions in the flat variable vector.
///
/// Device-indexed blocks are round-major: entry `n * k_count + k`.
/// Frequencies are stored in GHz.
#[derive(Debug, Clone)]
pub struct VarLayout {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub total: usize,
    pub d: Vec<Slot>,
    pub dr: Vec<Slot>,
    pub fs: Vec<Slot>,
    pub b: Vec<Slot>,
    pub br: Vec<Slot>,
    pub fd: Vec<Slot>,
    pub p: Vec<Slot>,
    pub t: Vec<usize>,
}

impl VarLayout {
    fn dev(&self, block: &[Slot], n: usize, k: usize) -> Slot {
        block[n * self.k + k]
    }

    pub fn b_slot(&self, n: usize, k: usize) -> Slot {
        self.dev(&self.b, n, k)
    }
    pub fn p_slot(&self, n: usize, k: usize) -> Slot {
        self.dev(&self.p, n, k)
    }

    /// Extracts the plan encoded by a solution vector (SI units).
    pub fn decode(&self, x: &[f64]) -> Plan {
        let mut plan = Plan {
            m: self.m as u32,
            n: self.n as u32,
            d_batch: self.d.iter().map(|s| s.value(x)).collect(),
            f_server: self.fs.iter().map(|s| s.value(x) * FREQ_SCALE).collect(),
            b_batch: vec![vec![0.0; self.n]; self.k],
            f_device: vec![vec![0.0; self.n]; self.k],
            p_up: vec![vec![0.0; self.n]; self.k],
        };
        for n in 0..self.n {
            for k in 0..self.k {
                plan.b_batch[k][n] = self.dev(&self.b, n, k).value(x);
                plan.f_device[k][n] = self.dev(&self.fd, n, k).value(x) * FREQ_SCALE;
                plan.p_up[k][n] = self.dev(&self.p, n, k).value(x);
            }
        }
        plan
    }
}

/// Identifies one constraint of the subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConId {
    DelayBudget,
    EnergyBudget,
    DevDelay { n: usize, k: usize },
    LinkPre(usize),
    LinkFine { n: usize, k: usize },
    BoxLo(usize),
    BoxHi(usize),
    AvgPower(usize),
}

#[derive(Debug, Clone)]
pub struct Con {
    pub id: ConId,
    pub expr: Expr,
}

/// The reformulated inner problem for one (M, N) cell.
///
/// Constraints are stored normalized: budgets divided by their thresholds,
/// boxes by their widths, so every value is dimensionless.
#[derive(Debug, Clone)]
pub struct CellProblem {
    pub layout: VarLayout,
    /// The bound objective, SI, including its round-count constant.
    pub objective: Expr,
    /// Objective variable part divided by `obj_scale`; what the barrier sees.
    objective_scaled: Expr,
    pub obj_scale: f64,
    /// Convex constraints reused verbatim in every surrogate.
    fixed_cons: Vec<Con>,
    /// Energy budget with the true (concave) upload terms.
    energy_true: Expr,
    /// True reciprocal links `d - 1/d' <= 0`, one per variable batch.
    links_true: Vec<Con>,
    /// (batch var, reciprocal var) behind each entry of `links_true`.
    link_pairs: Vec<(usize, usize)>,
    /// Set when constants alone already violate a constraint.
    pub infeasible_reason: Option<String>,
    heuristic: Vec<f64>,
    boxes: Vec<(usize, f64, f64)>,
}

/// The convex subproblem at one expansion point.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub expansion: Vec<f64>,
    pub cons: Vec<Con>,
    /// Tangent slope of each upload-energy term: (round, device, power
    /// variable, slope, energy value at the expansion point).
    pub u_coeffs: Vec<UCoeff>,
}

#[derive(Debug, Clone)]
pub struct UCoeff {
    pub n: usize,
    pub k: usize,
    pub var: usize,
    pub u: f64,
    pub energy_at_expansion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub max_violation: f64,
    pub dual_gap: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iter: u32,
    pub objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub sca_iters: u32,
    pub newton_iters: u32,
    pub kkt: KktResiduals,
    pub trace: Vec<TraceRow>,
    pub layout: VarLayout,
}

impl SolveResult {
    pub fn plan(&self) -> Plan {
        self.layout.decode(&self.x)
    }
}

struct LayoutBuilder {
    next: usize,
    boxes: Vec<(usize, f64, f64)>,
    init: Vec<f64>,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder {
            next: 0,
            boxes: Vec::new(),
            init: Vec::new(),
        }
    }

    /// Allocates a variable with box `[lo, hi]` and start value `at`, or a
    /// fixed slot when the box has no interior.
    fn slot(&mut self, lo: f64, hi: f64, at: f64) -> Slot {
        if hi - lo <= 1e-12 * hi.abs().max(1.0) {
            return Slot::Fixed(hi);
        }
        let idx = self.next;
        self.next += 1;
        self.boxes.push((idx, lo, hi));
        let margin = 0.05 * (hi - lo);
        self.init.push(at.clamp(lo + margin, hi - margin));
        Slot::Var(idx)
    }

    fn fixed(&mut self, v: f64) -> Slot {
        Slot::Fixed(v)
    }

    /// Allocates an unboxed variable (epigraph slots).
    fn free(&mut self, at: f64) -> usize {
        let idx = self.next;
        self.next += 1;
        self.init.push(at);
        idx
    }
}

/// Builds the reformulated inner problem for fixed round counts.
pub fn build_p2(cfg: &ScenarioConfig, m: u32, n: u32) -> Result<CellProblem> {
    build_p2_restricted(cfg, m, n, Restriction::default())
}

/// As [`build_p2`], with benchmark-scheme variable pinning.
#[allow(clippy::needless_range_loop)]
pub fn build_p2_restricted(
    cfg: &ScenarioConfig,
    m: u32,
    n: u32,
    restrict: Restriction,
) -> Result<CellProblem> {
    let (m, n) = (m as usize, n as usize);
    let k_count = cfg.k();
    if m + n == 0 {
        return Err(Error::SolverSetup("a cell needs at least one round".into()));
    }

    let srv = &cfg.server;
    let lrn = &cfg.learning;
    let tau0 = cfg.budgets.tau0_s;
    let e0 = cfg.budgets.e0_j;

    let mut lb = LayoutBuilder::new();

    // Pre-training slots.
    let mut d = Vec::with_capacity(m);
    let mut dr = Vec::with_capacity(m);
    let mut fs = Vec::with_capacity(m);
    for _ in 0..m {
        let d_slot = if restrict.fix_batch {
            lb.fixed(srv.batch_max)
        } else {
            lb.slot(1.0, srv.batch_max, 0.5 * srv.batch_max)
        };
        d.push(d_slot);
        dr.push(match d_slot {
            Slot::Var(_) => lb.slot(1.0 / srv.batch_max, 1.0, 1.0 / (0.5 * srv.batch_max)),
            Slot::Fixed(v) => lb.fixed(1.0 / v),
        });
        let f_ghz = srv.f_max_hz / FREQ_SCALE;
        fs.push(if restrict.fix_clock {
            lb.fixed(f_ghz)
        } else {
            lb.slot(0.0, f_ghz, 0.7 * f_ghz)
        });
    }

    // Fine-tuning slots, round-major.
    let mut b = Vec::with_capacity(n * k_count);
    let mut br = Vec::with_capacity(n * k_count);
    let mut fd = Vec::with_capacity(n * k_count);
    let mut p = Vec::with_capacity(n * k_count);
    for _ in 0..n {
        for dev in &cfg.devices {
            let b_slot = if restrict.fix_batch {
                lb.fixed(dev.batch_max)
            } else {
                lb.slot(1.0, dev.batch_max, 0.5 * dev.batch_max)
            };
            b.push(b_slot);
            br.push(match b_slot {
                Slot::Var(_) => lb.slot(1.0 / dev.batch_max, 1.0, 1.0 / (0.5 * dev.batch_max)),
                Slot::Fixed(v) => lb.fixed(1.0 / v),
            });
            let f_ghz = dev.f_max_hz / FREQ_SCALE;
            fd.push(if restrict.fix_clock {
                lb.fixed(f_ghz)
            } else {
                lb.slot(0.0, f_ghz, 0.7 * f_ghz)
            });
            p.push(if restrict.fix_power {
                lb.fixed(dev.p_max_w)
            } else {
                lb.slot(0.0, dev.p_max_w, 0.5 * dev.p_ave_w.min(dev.p_max_w))
            });
        }
    }
    let t: Vec<usize> = (0..n).map(|_| lb.free(0.0)).collect();

    let layout = VarLayout {
        m,
        n,
        k: k_count,
        total: lb.next,
        d,
        dr,
        fs,
        b,
        br,
        fd,
        p,
        t,
    };

    // Per-(round, device) link constants.
    let beta = lrn.model_bits;
    let ln2 = std::f64::consts::LN_2;
    // snr_slope[k]: SNR per watt on device k's uplink.
    let snr_slope: Vec<f64> = cfg
        .devices
        .iter()
        .map(|dev| dev.g_up / (dev.bw_up_hz * dev.noise_up_psd))
        .collect();
    let up_a: Vec<f64> = cfg
        .devices
        .iter()
        .map(|dev| beta * ln2 / dev.bw_up_hz)
        .collect();
    // Download transfer time per (round, device): a constant of the cell.
    let mut dl_delay = vec![vec![0.0; k_count]; n];
    let mut dl_energy = vec![0.0; n];
    for ni in 0..n {
        for ki in 0..k_count {
            let r = metrics::downlink_rate_with_gain(
                cfg.gain_down(ki, ni),
                srv.bw_down_hz,
                cfg.devices[ki].noise_down_psd,
                srv.tx_power_w,
            );
            dl_delay[ni][ki] = beta / r;
        }
        dl_energy[ni] = srv.tx_power_w * dl_delay[ni].iter().cloned().fold(0.0, f64::max);
    }

    // Objective: the convergence bound at fixed (m, n).
    let rounds = (m + n) as f64;
    let noise_pre = lrn.gamma * lrn.rho * lrn.alpha * lrn.alpha / rounds;
    let noise_fine =
        lrn.gamma * lrn.rho_hat * lrn.alpha_hat * lrn.alpha_hat * k_count as f64 / rounds;
    let shift = if m > 0 {
        2.0 * lrn.rho_tilde * lrn.wdist / (rounds * lrn.gamma)
    } else {
        0.0
    };
    let gap = 2.0 * lrn.loss_gap / (rounds * lrn.gamma);

    let mut objective = Expr::constant(shift + gap);
    for mi in 0..m {
        objective.add_recip(noise_pre, layout.d[mi].arg());
    }
    for ni in 0..n {
        let row = (0..k_count).map(|ki| layout.dev(&layout.b, ni, ki).arg());
        objective.add_recip_sum(noise_fine, row);
    }

    // Constraint assembly, all normalized.
    let mut fixed_cons = Vec::new();

    for &(idx, lo, hi) in &lb.boxes {
        let w = hi - lo;
        let mut lo_e = Expr::constant(lo / w);
        lo_e.push_lin(idx, -1.0 / w);
        fixed_cons.push(Con {
            id: ConId::BoxLo(idx),
            expr: lo_e,
        });
        let mut hi_e = Expr::constant(-hi / w);
        hi_e.push_lin(idx, 1.0 / w);
        fixed_cons.push(Con {
            id: ConId::BoxHi(idx),
            expr: hi_e,
        });
    }

    // Overall delay budget with reciprocal batch auxiliaries.
    let pre_delay_coeff = lrn.n_flop / (srv.flops_per_cycle * FREQ_SCALE);
    let mut delay = Expr::constant(-1.0);
    for mi in 0..m {
        delay.add_recip_prod(
            pre_delay_coeff / tau0,
            layout.fs[mi].arg(),
            layout.dr[mi].arg(),
        );
    }
    for &ti in &layout.t {
        delay.push_lin(ti, 1.0 / tau0);
    }
    fixed_cons.push(Con {
        id: ConId::DelayBudget,
        expr: delay,
    });

    // Per-device round delay under the epigraph variable.
    for ni in 0..n {
        for (ki, dev) in cfg.devices.iter().enumerate() {
            let comp_coeff = lrn.n_flop / (dev.flops_per_cycle * FREQ_SCALE);
            let mut e = Expr::constant(dl_delay[ni][ki] / tau0);
            e.add_recip_prod(
                comp_coeff / tau0,
                layout.dev(&layout.fd, ni, ki).arg(),
                layout.dev(&layout.br, ni, ki).arg(),
            );
            e.add_log_recip(
                up_a[ki] / tau0,
                snr_slope[ki],
                layout.dev(&layout.p, ni, ki).arg(),
            );
            e.push_lin(layout.t[ni], -1.0 / tau0);
            fixed_cons.push(Con {
                id: ConId::DevDelay { n: ni, k: ki },
                expr: e,
            });
        }
    }

    // Average-power budget per device. With pinned powers this reduces to
    // a constant, which the infeasibility scan below still checks.
    if n > 0 {
        for (ki, dev) in cfg.devices.iter().enumerate() {
            let denom = n as f64 * dev.p_ave_w;
            let mut e = Expr::constant(-1.0);
            for ni in 0..n {
                match layout.dev(&layout.p, ni, ki) {
                    Slot::Var(i) => e.push_lin(i, 1.0 / denom),
                    Slot::Fixed(v) => e.constant += v / denom,
                }
            }
            fixed_cons.push(Con {
                id: ConId::AvgPower(ki),
                expr: e,
            });
        }
    }

    // Energy budget, true form: the upload terms are concave in power and
    // get tangent majorants per expansion point.
    let pre_energy_coeff =
        srv.pue * lrn.n_flop * srv.power_coeff * FREQ_SCALE * FREQ_SCALE / srv.flops_per_cycle;
    let mut energy = Expr::constant(-1.0);
    for mi in 0..m {
        energy.add_quad_over_lin(
            pre_energy_coeff / e0,
            layout.fs[mi].arg(),
            layout.dr[mi].arg(),
        );
    }
    for ni in 0..n {
        energy.constant += dl_energy[ni] / e0;
        for (ki, dev) in cfg.devices.iter().enumerate() {
            let comp_coeff = dev.pue * lrn.n_flop * dev.power_coeff * FREQ_SCALE * FREQ_SCALE
                / dev.flops_per_cycle;
            energy.add_quad_over_lin(
                comp_coeff / e0,
                layout.dev(&layout.fd, ni, ki).arg(),
                layout.dev(&layout.br, ni, ki).arg(),
            );
            energy.add_x_over_log(
                up_a[ki] / e0,
                snr_slope[ki],
                layout.dev(&layout.p, ni, ki).arg(),
            );
        }
    }

    // True reciprocal links, normalized by the batch cap.
    let mut links_true = Vec::new();
    let mut link_pairs = Vec::new();
    for mi in 0..m {
        if let (Slot::Var(di), Slot::Var(dri)) = (layout.d[mi], layout.dr[mi]) {
            let w = srv.batch_max;
            let mut e = Expr::default();
            e.push_lin(di, 1.0 / w);
            e.add_recip(-1.0 / w, Arg::Var(dri));
            links_true.push(Con {
                id: ConId::LinkPre(mi),
                expr: e,
            });
            link_pairs.push((di, dri));
        }
    }
    for ni in 0..n {
        for (ki, dev) in cfg.devices.iter().enumerate() {
            if let (Slot::Var(bi), Slot::Var(bri)) = (
                layout.dev(&layout.b, ni, ki),
                layout.dev(&layout.br, ni, ki),
            ) {
                let w = dev.batch_max;
                let mut e = Expr::default();
                e.push_lin(bi, 1.0 / w);
                e.add_recip(-1.0 / w, Arg::Var(bri));
                links_true.push(Con {
                    id: ConId::LinkFine { n: ni, k: ki },
                    expr: e,
                });
                link_pairs.push((bi, bri));
            }
        }
    }

    // Heuristic start: mid-box batches, 70% clocks, half-average powers;
    // epigraph slots just above the per-round maxima.
    let mut heuristic = lb.init.clone();
    for ni in 0..n {
        let mut worst: f64 = 0.0;
        for con in &fixed_cons {
            if let ConId::DevDelay { n: cn, .. } = con.id {
                if cn == ni {
                    let mut probe = con.expr.clone();
                    probe.lin.retain(|&(i, _)| i != layout.t[ni]);
                    worst = worst.max(probe.value(&heuristic) * tau0);
                }
            }
        }
        heuristic[layout.t[ni]] = worst * 1.001 + 1e-9 * tau0;
    }

    // Constants alone can already decide infeasibility (zero downlink rate,
    // pinned powers breaking the average budget, fixed batches over budget).
    let mut infeasible_reason = None;
    let zero = vec![0.0; layout.total];
    for con in fixed_cons.iter().chain(std::iter::once(&Con {
        id: ConId::EnergyBudget,
        expr: energy.clone(),
    })) {
        if con.expr.vars().is_empty() {
            let v = con.expr.value(&zero);
            if v > 0.0 || v.is_nan() {
                infeasible_reason = Some(format!("{:?} violated by constants ({v})", con.id));
                break;
            }
        } else if !con.expr.value(&heuristic).is_finite()
            && matches!(con.id, ConId::DevDelay { .. } | ConId::DelayBudget)
        {
            // An infinite constant (zero link rate) poisons the whole cell.
            infeasible_reason = Some(format!("{:?} has an infinite constant term", con.id));
            break;
        }
    }

    let var_part = objective.value(&heuristic) - objective.constant;
    let obj_scale = if var_part.is_finite() && var_part > 0.0 {
        var_part
    } else {
        1.0
    };
    let mut objective_scaled = objective.scaled(1.0 / obj_scale);
    objective_scaled.constant = 0.0;

    Ok(CellProblem {
        layout,
        objective,
        objective_scaled,
        obj_scale,
        fixed_cons,
        energy_true: energy,
        links_true,
        link_pairs,
        infeasible_reason,
        heuristic,
        boxes: lb.boxes,
    })
}

impl CellProblem {
    /// The bound value at a solution vector.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.value(x)
    }

    /// Largest normalized violation over the true constraint set.
    pub fn max_true_violation(&self, x: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for con in self.fixed_cons.iter().chain(self.links_true.iter()) {
            worst = worst.max(con.expr.value(x));
        }
        worst.max(self.energy_true.value(x)).max(0.0)
    }

    fn strictly_true_feasible(&self, x: &[f64]) -> bool {
        self.fixed_cons
            .iter()
            .chain(self.links_true.iter())
            .all(|c| c.expr.value(x) < 0.0)
            && self.energy_true.value(x) < 0.0
    }

    /// Clamps box variables into the open interior and raises any epigraph
    /// slot sitting below its round's device terms. A point that is
    /// already strictly interior passes through unchanged.
    fn restore_interior(&self, x: &mut [f64]) {
        for &(idx, lo, hi) in &self.boxes {
            let w = hi - lo;
            x[idx] = x[idx].clamp(lo + 1e-12 * w, hi - 1e-12 * w);
        }
        // Keep the reciprocal links strictly slack: lower the reciprocal
        // first, and shrink the batch if the reciprocal is pinned at its
        // own floor.
        for &(bi, bri) in &self.link_pairs {
            if x[bi] - 1.0 / x[bri] >= -1e-15 {
                let (lo, hi) = self.box_of(bri);
                let target = ((1.0 - 1e-11) / x[bi]).clamp(lo + 1e-12 * (hi - lo), hi);
                x[bri] = x[bri].min(target);
                if x[bi] - 1.0 / x[bri] >= 0.0 {
                    let (blo, _) = self.box_of(bi);
                    x[bi] = ((1.0 - 1e-11) / x[bri]).max(blo);
                }
            }
        }
        for ni in 0..self.layout.n {
            let mut worst: f64 = 0.0;
            for con in &self.fixed_cons {
                if let ConId::DevDelay { n: cn, .. } = con.id {
                    if cn == ni {
                        let mut probe = con.expr.clone();
                        probe.lin.retain(|&(i, _)| i != self.layout.t[ni]);
                        worst = worst.max(probe.value(x));
                    }
                }
            }
            let ti = self.layout.t[ni];
            if x[ti] <= worst {
                x[ti] = worst * 1.001 + 1e-12;
            }
        }
    }

    pub fn heuristic_start(&self) -> Vec<f64> {
        self.heuristic.clone()
    }

    /// Box constraints as (variable, lower, upper) triples.
    pub fn boxes(&self) -> &[(usize, f64, f64)] {
        &self.boxes
    }

    /// Normalized energy-budget value with the true upload terms.
    pub fn energy_true_value(&self, x: &[f64]) -> f64 {
        self.energy_true.value(x)
    }

    /// Normalized values of the true reciprocal links.
    pub fn links_true_values(&self, x: &[f64]) -> Vec<(ConId, f64)> {
        self.links_true
            .iter()
            .map(|c| (c.id, c.expr.value(x)))
            .collect()
    }

    fn box_of(&self, var: usize) -> (f64, f64) {
        self.boxes
            .iter()
            .find(|&&(idx, _, _)| idx == var)
            .map(|&(_, lo, hi)| (lo, hi))
            .expect("boxed variable")
    }
}

/// Builds the convex subproblem at `point` by replacing each concave
/// upload-energy term with its tangent and each reciprocal link with its
/// linearization.
pub fn surrogate_at(cell: &CellProblem, point: &[f64]) -> SurrogateModel {
    let mut cons = cell.fixed_cons.clone();
    let mut u_coeffs = Vec::new();

    // Energy: keep every convex piece, replace XOverLog by its tangent.
    let mut energy = Expr {
        lin: cell.energy_true.lin.clone(),
        terms: Vec::new(),
        constant: cell.energy_true.constant,
    };
    let mut upload_iter = cell
        .layout
        .p
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Slot::Var(v) => Some((i / cell.layout.k, i % cell.layout.k, *v)),
            Slot::Fixed(_) => None,
        });
    for term in &cell.energy_true.terms {
        match *term {
            expr::Term::XOverLog { a, s, x } => {
                let (ni, ki, var) = upload_iter
                    .next()
                    .expect("one upload term per variable power slot");
                debug_assert_eq!(var, x);
                let p0 = point[x];
                let v = 1.0 + s * p0;
                let l = (s * p0).ln_1p();
                let value = a * p0 / l;
                let u = a * (1.0 / l - p0 * s / (v * l * l));
                energy.push_lin(x, u);
                energy.constant += value - u * p0;
                u_coeffs.push(UCoeff {
                    n: ni,
                    k: ki,
                    var: x,
                    u,
                    energy_at_expansion: value,
                });
            }
            ref t => energy.terms.push(t.clone()),
        }
    }
    cons.push(Con {
        id: ConId::EnergyBudget,
        expr: energy,
    });

    // Links: first-order expansion of 1/d' around the current point.
    for link in &cell.links_true {
        let (d_lin, dr_term) = (&link.expr.lin, &link.expr.terms[0]);
        let expr::Term::Recip { a, x: dri } = *dr_term else {
            unreachable!("link constraints are d/w - (1/w)/d'");
        };
        let w_inv = d_lin[0].1; // 1/batch_cap
        debug_assert!((a + w_inv).abs() <= 1e-15 * w_inv.abs());
        let dr0 = point[dri];
        let mut e = Expr::default();
        e.push_lin(d_lin[0].0, w_inv);
        e.push_lin(dri, w_inv / (dr0 * dr0));
        e.constant = -2.0 * w_inv / dr0;
        cons.push(Con {
            id: link.id,
            expr: e,
        });
    }

    SurrogateModel {
        expansion: point.to_vec(),
        cons,
        u_coeffs,
    }
}

fn barrier_opts(settings: &SolverSettings) -> BarrierOptions {
    BarrierOptions {
        gap_target: settings.tol_kkt.min(1e-9),
        ..BarrierOptions::default()
    }
}

/// Solves one convex subproblem from a strictly feasible start.
pub fn solve_convex(
    cell: &CellProblem,
    surrogate: &SurrogateModel,
    x0: &[f64],
    settings: &SolverSettings,
) -> newton::BarrierOutcome {
    let exprs: Vec<Expr> = surrogate.cons.iter().map(|c| c.expr.clone()).collect();
    minimize_barrier(
        &cell.objective_scaled,
        &exprs,
        x0,
        &barrier_opts(settings),
        None,
    )
}

/// Runs the outer surrogate iteration for one cell.
///
/// Accepted iterates have non-increasing true objective by construction:
/// an inner solution that fails to improve ends the loop with the previous
/// point kept. `init` supplies a warm start in this cell's layout.
pub fn sca_loop(
    cell: &CellProblem,
    settings: &SolverSettings,
    init: Option<&[f64]>,
) -> SolveResult {
    let infeasible = |trace: Vec<TraceRow>, newton_iters: u32| SolveResult {
        status: SolveStatus::Infeasible,
        x: cell.heuristic.clone(),
        objective: f64::INFINITY,
        sca_iters: 0,
        newton_iters,
        kkt: KktResiduals::default(),
        trace,
        layout: cell.layout.clone(),
    };

    if cell.infeasible_reason.is_some() {
        return infeasible(Vec::new(), 0);
    }

    let opts = barrier_opts(settings);
    let mut newton_iters = 0u32;

    // Find a strictly feasible point, re-expanding the surrogate as the
    // slack-minimizer moves. A warm start that leads nowhere falls back to
    // the heuristic before the cell is declared infeasible.
    let find_feasible = |start: Vec<f64>| -> Option<Vec<f64>> {
        let mut x = start;
        cell.restore_interior(&mut x);
        if cell.strictly_true_feasible(&x) {
            return Some(x);
        }
        let mut prev_slack = f64::INFINITY;
        for _ in 0..8 {
            let sur = surrogate_at(cell, &x);
            let exprs: Vec<Expr> = sur.cons.iter().map(|c| c.expr.clone()).collect();
            match phase_one(cell.layout.total, &exprs, &x, &opts) {
                PhaseOneOutcome::Feasible(xf) => return Some(xf),
                PhaseOneOutcome::Infeasible { best_slack, x: xb } => {
                    if best_slack >= prev_slack - 1e-12 {
                        return None;
                    }
                    prev_slack = best_slack;
                    x = xb;
                    cell.restore_interior(&mut x);
                    if cell.strictly_true_feasible(&x) {
                        return Some(x);
                    }
                }
            }
        }
        None
    };

    let warm = match init {
        Some(v) if v.len() == cell.layout.total => Some(v.to_vec()),
        _ => None,
    };
    let had_warm = warm.is_some();
    let x = match find_feasible(warm.unwrap_or_else(|| cell.heuristic.clone())) {
        Some(x) => Some(x),
        None if had_warm => find_feasible(cell.heuristic.clone()),
        None => None,
    };
    let Some(mut x) = x else {
        return infeasible(Vec::new(), newton_iters);
    };

    let mut obj = cell.objective.value(&x);
    let mut trace = vec![TraceRow {
        iter: 0,
        objective: obj,
        max_violation: cell.max_true_violation(&x),
    }];
    let mut kkt = KktResiduals {
        stationarity: f64::INFINITY,
        max_violation: cell.max_true_violation(&x),
        dual_gap: f64::INFINITY,
    };
    let mut status = SolveStatus::IterationLimit;
    let mut sca_iters = 0;

    for o in 1..=settings.max_sca_iters {
        let sur = surrogate_at(cell, &x);
        let out = solve_convex(cell, &sur, &x, settings);
        newton_iters += out.newton_iters;
        sca_iters = o;
        let obj_new = cell.objective.value(&out.x);

        // A candidate that fails to improve is rejected and ends the loop:
        // the accepted-iterate sequence is non-increasing by construction.
        let improved = obj_new < obj;
        if improved {
            x = out.x;
            kkt = KktResiduals {
                stationarity: out.stationarity,
                max_violation: cell.max_true_violation(&x),
                dual_gap: out.dual_gap * cell.obj_scale,
            };
        }
        let decrease = obj - obj_new;
        if improved {
            obj = obj_new;
        }
        trace.push(TraceRow {
            iter: o,
            objective: obj,
            max_violation: cell.max_true_violation(&x),
        });
        let threshold = if obj.abs() > 0.0 {
            settings.epsilon * obj.abs()
        } else {
            settings.epsilon
        };
        if !improved || decrease < threshold {
            status = SolveStatus::Converged;
            break;
        }
    }

    SolveResult {
        status,
        objective: obj,
        sca_iters,
        newton_iters,
        kkt,
        trace,
        layout: cell.layout.clone(),
        x,
    }
}

/// Writes the per-iteration trace: iteration index, objective, max
/// normalized constraint violation.
pub fn write_trace_csv(path: impl AsRef<std::path::Path>, result: &SolveResult) -> Result<()> {
    let mut text = String::from("iter,objective,max_violation\n");
    for row in &result.trace {
        text.push_str(&format!(
            "{},{},{}\n",
            row.iter, row.objective, row.max_violation
        ));
    }
    std::fs::write(path.as_ref(), text).map_err(|source| Error::Write {
        path: path.as_ref().to_owned(),
        source,
    })
}
