//! Independent verification: a ledger replayer that re-derives delay and
//! energy from first principles, and an exhaustive grid oracle for tiny
//! instances.

pub mod sgd;

pub use sgd::{
    check_convergence_bound, check_lemma_inequalities, required_shift, run_synthetic_sgd,
    BoundCheck, IneqCheck, LemmaReport, QuadraticTask, RoundSample, SgdTrace,
};

use crate::config::{EvaluationReport, Plan, ScenarioConfig, StageSeries, Violation};
use crate::error::{Error, Result};

/// Re-derives a plan's totals by walking rounds one at a time.
///
/// Deliberately a separate code path from the closed-form evaluator: rates
/// come from a rearranged formula, compute energy goes through power draw
/// times busy time, and device sums accumulate in device-major order. The
/// results must agree with the closed forms to within accumulated roundoff.
pub fn replay_ledger(cfg: &ScenarioConfig, plan: &Plan) -> Result<EvaluationReport> {
    let mut violations = crate::config::validate_plan(cfg, plan)?;
    let lrn = &cfg.learning;
    let beta = lrn.model_bits;
    let ln2 = std::f64::consts::LN_2;

    let mut per_round_delay = StageSeries::default();
    let mut per_round_energy = StageSeries::default();

    for mi in 0..plan.m as usize {
        let d = plan.d_batch[mi];
        let f = plan.f_server[mi];
        let cycles = d * lrn.n_flop / cfg.server.flops_per_cycle;
        let busy = if d == 0.0 {
            0.0
        } else if f <= 0.0 {
            f64::INFINITY
        } else {
            cycles / f
        };
        // Energy as instantaneous draw times busy time.
        let draw = cfg.server.power_coeff * f * f * f;
        per_round_delay.pretrain.push(busy);
        per_round_energy
            .pretrain
            .push(cfg.server.pue * draw * busy.min(f64::MAX));
    }

    for ni in 0..plan.n as usize {
        let mut round_delay: f64 = 0.0;
        let mut round_energy = 0.0;
        let mut slowest_download: f64 = 0.0;
        for (ki, dev) in cfg.devices.iter().enumerate() {
            let b = plan.b_batch[ki][ni];
            let f = plan.f_device[ki][ni];
            let p = plan.p_up[ki][ni];

            let snr_down = cfg.gain_down(ki, ni) * cfg.server.tx_power_w
                / (cfg.server.bw_down_hz * dev.noise_down_psd);
            let t_down = if snr_down > 0.0 {
                beta * ln2 / (cfg.server.bw_down_hz * snr_down.ln_1p())
            } else {
                f64::INFINITY
            };
            let snr_up = cfg.gain_up(ki, ni) * p / (dev.bw_up_hz * dev.noise_up_psd);
            let t_up = if snr_up > 0.0 {
                beta * ln2 / (dev.bw_up_hz * snr_up.ln_1p())
            } else {
                f64::INFINITY
            };
            let cycles = b * lrn.n_flop / dev.flops_per_cycle;
            let t_comp = if b == 0.0 {
                0.0
            } else if f <= 0.0 {
                f64::INFINITY
            } else {
                cycles / f
            };

            round_delay = round_delay.max(t_down + t_comp + t_up);
            slowest_download = slowest_download.max(t_down);

            let draw = dev.power_coeff * f * f * f;
            round_energy += dev.pue * draw * t_comp.min(f64::MAX);
            round_energy += if snr_up > 0.0 {
                p * beta * ln2 / (dev.bw_up_hz * snr_up.ln_1p())
            } else if p == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        round_energy += cfg.server.tx_power_w * slowest_download;
        per_round_delay.finetune.push(round_delay);
        per_round_energy.finetune.push(round_energy);
    }

    let total_delay_s =
        per_round_delay.pretrain.iter().sum::<f64>() + per_round_delay.finetune.iter().sum::<f64>();
    let total_energy_j = per_round_energy.pretrain.iter().sum::<f64>()
        + per_round_energy.finetune.iter().sum::<f64>();

    // The bound, re-accumulated from reciprocals.
    let upsilon = if plan.m + plan.n == 0 {
        violations.push(Violation::new("plan_shape", 1.0));
        None
    } else {
        let rounds = (plan.m + plan.n) as f64;
        let lambda: f64 = plan.d_batch.iter().map(|d| 1.0 / d).sum();
        let omega: f64 = (0..plan.n as usize).map(|ni| 1.0 / plan.b_tot(ni)).sum();
        let noise = lrn.gamma
            * (lrn.rho * lrn.alpha * lrn.alpha * lambda
                + lrn.rho_hat * lrn.alpha_hat * lrn.alpha_hat * cfg.k() as f64 * omega)
            / rounds;
        let shift = if plan.m > 0 {
            2.0 * lrn.rho_tilde * lrn.wdist / (rounds * lrn.gamma)
        } else {
            0.0
        };
        Some(noise + shift + 2.0 * lrn.loss_gap / (rounds * lrn.gamma))
    };

    if total_delay_s > cfg.budgets.tau0_s * (1.0 + 1e-12) {
        violations.push(Violation::new(
            "delay_budget",
            total_delay_s - cfg.budgets.tau0_s,
        ));
    }
    if total_energy_j > cfg.budgets.e0_j * (1.0 + 1e-12) {
        violations.push(Violation::new(
            "energy_budget",
            total_energy_j - cfg.budgets.e0_j,
        ));
    }

    Ok(EvaluationReport {
        upsilon,
        total_delay_s,
        total_energy_j,
        per_round_delay,
        per_round_energy,
        feasible: violations.is_empty(),
        violations,
    })
}

/// Best feasible point of an exhaustive stage-uniform grid.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: Option<OracleBest>,
    pub points: u64,
}

#[derive(Debug, Clone)]
pub struct OracleBest {
    pub upsilon: f64,
    pub delay_s: f64,
    pub energy_j: f64,
    pub plan: Plan,
}

const GRID_LIMIT: u128 = 10_000_000;

/// Exhaustively evaluates the bound and feasibility over a uniform grid.
///
/// Allocations are uniform across rounds within each stage (one batch,
/// clock, and power value per decision role), which keeps the axis count at
/// `2 + 3K` independent of the round counts; the returned minimum is an
/// upper bound on the unrestricted optimum. Refining `resolution` to
/// `2r - 1` nests the grids.
pub fn grid_oracle(
    cfg: &ScenarioConfig,
    m: u32,
    n: u32,
    resolution: usize,
) -> Result<OracleResult> {
    if m + n == 0 {
        return Err(Error::Invalid("oracle needs at least one round".into()));
    }
    if resolution < 2 {
        return Err(Error::Invalid("resolution must be at least 2".into()));
    }
    let k = cfg.k();
    let dims = if m > 0 { 2 } else { 0 } + if n > 0 { 3 * k } else { 0 };
    let points = (resolution as u128).pow(dims as u32);
    if points > GRID_LIMIT {
        return Err(Error::GridTooLarge {
            points,
            limit: GRID_LIMIT,
        });
    }

    let lrn = &cfg.learning;
    let srv = &cfg.server;
    let linspace = |lo: f64, hi: f64| -> Vec<f64> {
        (0..resolution)
            .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
            .collect()
    };

    // Axes in a fixed order: [d, f] then per device [b_k, fd_k, p_k].
    let mut axes: Vec<Vec<f64>> = Vec::new();
    if m > 0 {
        axes.push(linspace(1.0, srv.batch_max));
        axes.push(linspace(0.05 * srv.f_max_hz, srv.f_max_hz));
    }
    if n > 0 {
        for dev in &cfg.devices {
            let p_cap = dev.p_ave_w.min(dev.p_max_w);
            axes.push(linspace(1.0, dev.batch_max));
            axes.push(linspace(0.05 * dev.f_max_hz, dev.f_max_hz));
            axes.push(linspace(0.02 * p_cap, p_cap));
        }
    }

    // Per-round constants and per-(device, round, power-index) link tables.
    let beta = lrn.model_bits;
    let fine_axis0 = if m > 0 { 2 } else { 0 };
    let mut dl_delay = vec![vec![0.0f64; k]; n as usize];
    let mut dl_energy = vec![0.0f64; n as usize];
    let mut up_delay = vec![vec![vec![0.0f64; resolution]; k]; n as usize];
    for ni in 0..n as usize {
        for (ki, dev) in cfg.devices.iter().enumerate() {
            let r_down = crate::metrics::downlink_rate_with_gain(
                cfg.gain_down(ki, ni),
                srv.bw_down_hz,
                dev.noise_down_psd,
                srv.tx_power_w,
            );
            dl_delay[ni][ki] = if r_down > 0.0 {
                beta / r_down
            } else {
                f64::INFINITY
            };
            let p_axis = &axes[fine_axis0 + 3 * ki + 2];
            for (pi, &p) in p_axis.iter().enumerate() {
                let r_up = crate::metrics::uplink_rate_with_gain(
                    cfg.gain_up(ki, ni),
                    dev.bw_up_hz,
                    dev.noise_up_psd,
                    p,
                );
                up_delay[ni][ki][pi] = if r_up > 0.0 {
                    beta / r_up
                } else {
                    f64::INFINITY
                };
            }
        }
        dl_energy[ni] = srv.tx_power_w * dl_delay[ni].iter().cloned().fold(0.0, f64::max);
    }

    let rounds = (m + n) as f64;
    let shift_gap = (if m > 0 {
        2.0 * lrn.rho_tilde * lrn.wdist
    } else {
        0.0
    } + 2.0 * lrn.loss_gap)
        / (rounds * lrn.gamma);
    let noise_pre = lrn.gamma * lrn.rho * lrn.alpha * lrn.alpha / rounds;
    let noise_fine = lrn.gamma * lrn.rho_hat * lrn.alpha_hat * lrn.alpha_hat * k as f64 / rounds;

    let mut best: Option<(f64, f64, f64, Vec<usize>)> = None;
    let mut idx = vec![0usize; dims];
    let total = points as u64;
    for _ in 0..total {
        // Decode the odometer into allocations.
        let mut cursor = 0;
        let (mut d, mut f) = (0.0, 0.0);
        if m > 0 {
            d = axes[0][idx[0]];
            f = axes[1][idx[1]];
            cursor = 2;
        }
        let mut delay = if m > 0 {
            m as f64 * d * lrn.n_flop / (f * srv.flops_per_cycle)
        } else {
            0.0
        };
        let mut energy = if m > 0 {
            m as f64 * (srv.pue * d * lrn.n_flop / srv.flops_per_cycle * srv.power_coeff * f * f)
        } else {
            0.0
        };
        let mut b_tot = 0.0;
        if n > 0 {
            for ni in 0..n as usize {
                let mut worst: f64 = 0.0;
                let mut round_energy = dl_energy[ni];
                for (ki, dev) in cfg.devices.iter().enumerate() {
                    let b = axes[cursor + 3 * ki][idx[cursor + 3 * ki]];
                    let fd = axes[cursor + 3 * ki + 1][idx[cursor + 3 * ki + 1]];
                    let pi = idx[cursor + 3 * ki + 2];
                    let p = axes[cursor + 3 * ki + 2][pi];
                    let t_comp = b * lrn.n_flop / (fd * dev.flops_per_cycle);
                    worst = worst.max(dl_delay[ni][ki] + t_comp + up_delay[ni][ki][pi]);
                    round_energy +=
                        dev.pue * b * lrn.n_flop / dev.flops_per_cycle * dev.power_coeff * fd * fd
                            + p * up_delay[ni][ki][pi];
                    if ni == 0 {
                        b_tot += b;
                    }
                }
                delay += worst;
                energy += round_energy;
            }
        }

        if delay <= cfg.budgets.tau0_s && energy <= cfg.budgets.e0_j {
            let mut upsilon = shift_gap;
            if m > 0 {
                upsilon += noise_pre * m as f64 / d;
            }
            if n > 0 {
                upsilon += noise_fine * n as f64 / b_tot;
            }
            let better = match &best {
                None => true,
                Some((u, e, t, _)) => {
                    upsilon < *u || (upsilon == *u && (energy < *e || (energy == *e && delay < *t)))
                }
            };
            if better {
                best = Some((upsilon, energy, delay, idx.clone()));
            }
        }

        // Advance the odometer.
        for dim in (0..dims).rev() {
            idx[dim] += 1;
            if idx[dim] < resolution {
                break;
            }
            idx[dim] = 0;
        }
    }

    let best = best.map(|(upsilon, energy_j, delay_s, idx)| {
        let mut plan = Plan::empty(k);
        plan.m = m;
        plan.n = n;
        let mut cursor = 0;
        if m > 0 {
            plan.d_batch = vec![axes[0][idx[0]]; m as usize];
            plan.f_server = vec![axes[1][idx[1]]; m as usize];
            cursor = 2;
        }
        if n > 0 {
            for ki in 0..k {
                plan.b_batch[ki] = vec![axes[cursor + 3 * ki][idx[cursor + 3 * ki]]; n as usize];
                plan.f_device[ki] =
                    vec![axes[cursor + 3 * ki + 1][idx[cursor + 3 * ki + 1]]; n as usize];
                plan.p_up[ki] =
                    vec![axes[cursor + 3 * ki + 2][idx[cursor + 3 * ki + 2]]; n as usize];
            }
        }
        OracleBest {
            upsilon,
            delay_s,
            energy_j,
            plan,
        }
    });

    Ok(OracleResult {
        best,
        points: total,
    })
}
