//! Closed-form link rates, delays, and energies for any plan.
//!
//! All arithmetic is binary64; logarithms go through the natural log. A
//! zero link rate with a positive payload yields an infinite transfer time
//! rather than an error, so infeasible corners can be discarded by the
//! outer search instead of aborting it.

use crate::bound;
use crate::config::{
    DeviceProfile, EvaluationReport, LearningProfile, Plan, ScenarioConfig, ServerProfile,
    StageSeries, Violation,
};
use crate::error::Result;

/// Achievable uplink rate (bits/s) at transmit power `p_w`.
pub fn uplink_rate(dev: &DeviceProfile, p_w: f64) -> f64 {
    uplink_rate_with_gain(dev.g_up, dev.bw_up_hz, dev.noise_up_psd, p_w)
}

pub fn uplink_rate_with_gain(gain: f64, bw_hz: f64, noise_psd: f64, p_w: f64) -> f64 {
    bw_hz * (gain * p_w / (bw_hz * noise_psd)).ln_1p() / std::f64::consts::LN_2
}

/// Broadcast downlink rate (bits/s) from the server to one device.
pub fn downlink_rate(dev: &DeviceProfile, server: &ServerProfile) -> f64 {
    downlink_rate_with_gain(
        dev.g_down,
        server.bw_down_hz,
        dev.noise_down_psd,
        server.tx_power_w,
    )
}

pub fn downlink_rate_with_gain(gain: f64, bw_hz: f64, noise_psd: f64, p_w: f64) -> f64 {
    bw_hz * (gain * p_w / (bw_hz * noise_psd)).ln_1p() / std::f64::consts::LN_2
}

/// Transfer time of `bits` over a link running at `rate` bits/s.
fn transfer_time(bits: f64, rate: f64) -> f64 {
    if bits == 0.0 {
        0.0
    } else if rate <= 0.0 {
        f64::INFINITY
    } else {
        bits / rate
    }
}

/// Total pre-training compute delay over all rounds (s).
pub fn pretrain_delay(
    server: &ServerProfile,
    learning: &LearningProfile,
    d_batch: &[f64],
    f_server: &[f64],
) -> f64 {
    d_batch
        .iter()
        .zip(f_server)
        .map(|(&d, &f)| {
            if d == 0.0 {
                0.0
            } else if f <= 0.0 {
                f64::INFINITY
            } else {
                d * learning.n_flop / (f * server.flops_per_cycle)
            }
        })
        .sum()
}

/// Total pre-training compute energy over all rounds (J).
pub fn pretrain_energy(
    server: &ServerProfile,
    learning: &LearningProfile,
    d_batch: &[f64],
    f_server: &[f64],
) -> f64 {
    d_batch
        .iter()
        .zip(f_server)
        .map(|(&d, &f)| {
            server.pue * (d * learning.n_flop / server.flops_per_cycle) * server.power_coeff * f * f
        })
        .sum()
}

/// Per-device allocations of one fine-tuning round.
#[derive(Debug, Clone, Copy)]
pub struct RoundAllocation<'a> {
    pub round: usize,
    /// Batch size per device.
    pub b: &'a [f64],
    /// Clock frequency per device (cycles/s).
    pub f: &'a [f64],
    /// Uplink transmit power per device (W).
    pub p: &'a [f64],
}

/// Full delay/energy ledger of one fine-tuning round.
#[derive(Debug, Clone)]
pub struct RoundLedger {
    pub round: usize,
    pub download_delay_s: Vec<f64>,
    pub compute_delay_s: Vec<f64>,
    pub upload_delay_s: Vec<f64>,
    /// max over devices of (download + compute + upload).
    pub round_delay_s: f64,
    pub compute_energy_j: Vec<f64>,
    pub upload_energy_j: Vec<f64>,
    pub download_energy_j: f64,
}

/// Computes every delay and energy component of one fine-tuning round.
pub fn finetune_round_ledger(cfg: &ScenarioConfig, alloc: &RoundAllocation) -> RoundLedger {
    let k = cfg.k();
    assert_eq!(alloc.b.len(), k);
    let beta = cfg.learning.model_bits;
    let mut ledger = RoundLedger {
        round: alloc.round,
        download_delay_s: Vec::with_capacity(k),
        compute_delay_s: Vec::with_capacity(k),
        upload_delay_s: Vec::with_capacity(k),
        round_delay_s: 0.0,
        compute_energy_j: Vec::with_capacity(k),
        upload_energy_j: Vec::with_capacity(k),
        download_energy_j: 0.0,
    };
    for (ki, dev) in cfg.devices.iter().enumerate() {
        let r_down = downlink_rate_with_gain(
            cfg.gain_down(ki, alloc.round),
            cfg.server.bw_down_hz,
            dev.noise_down_psd,
            cfg.server.tx_power_w,
        );
        let r_up = uplink_rate_with_gain(
            cfg.gain_up(ki, alloc.round),
            dev.bw_up_hz,
            dev.noise_up_psd,
            alloc.p[ki],
        );
        let down = transfer_time(beta, r_down);
        let up = transfer_time(beta, r_up);
        let comp = if alloc.b[ki] == 0.0 {
            0.0
        } else if alloc.f[ki] <= 0.0 {
            f64::INFINITY
        } else {
            alloc.b[ki] * cfg.learning.n_flop / (alloc.f[ki] * dev.flops_per_cycle)
        };
        ledger.round_delay_s = ledger.round_delay_s.max(down + comp + up);
        ledger.download_delay_s.push(down);
        ledger.compute_delay_s.push(comp);
        ledger.upload_delay_s.push(up);
        ledger.compute_energy_j.push(
            dev.pue
                * (alloc.b[ki] * cfg.learning.n_flop / dev.flops_per_cycle)
                * dev.power_coeff
                * alloc.f[ki]
                * alloc.f[ki],
        );
        // Upload energy is exactly power times upload time.
        ledger.upload_energy_j.push(alloc.p[ki] * up);
    }
    let slowest_download = ledger.download_delay_s.iter().cloned().fold(0.0, f64::max);
    ledger.download_energy_j = cfg.server.tx_power_w * slowest_download;
    ledger
}

/// Round delay: max over devices of download + compute + upload.
pub fn finetune_round_delay(cfg: &ScenarioConfig, alloc: &RoundAllocation) -> f64 {
    finetune_round_ledger(cfg, alloc).round_delay_s
}

/// Per-device compute and upload energies plus the broadcast energy.
#[derive(Debug, Clone)]
pub struct EnergyComponents {
    pub compute_j: Vec<f64>,
    pub upload_j: Vec<f64>,
    pub download_j: f64,
}

pub fn finetune_energy_components(
    cfg: &ScenarioConfig,
    alloc: &RoundAllocation,
) -> EnergyComponents {
    let ledger = finetune_round_ledger(cfg, alloc);
    EnergyComponents {
        compute_j: ledger.compute_energy_j,
        upload_j: ledger.upload_energy_j,
        download_j: ledger.download_energy_j,
    }
}

/// Views one round of a plan as a [`RoundAllocation`].
fn round_columns(plan: &Plan, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let b: Vec<f64> = plan.b_batch.iter().map(|row| row[n]).collect();
    let f: Vec<f64> = plan.f_device.iter().map(|row| row[n]).collect();
    let p: Vec<f64> = plan.p_up.iter().map(|row| row[n]).collect();
    (b, f, p)
}

/// Evaluates a plan end to end: per-round ledgers, totals, the bound
/// value, and feasibility against budgets and box constraints.
pub fn totals(cfg: &ScenarioConfig, plan: &Plan) -> Result<EvaluationReport> {
    let mut violations = crate::config::validate_plan(cfg, plan)?;

    let mut per_round_delay = StageSeries::default();
    let mut per_round_energy = StageSeries::default();
    for (&d, &f) in plan.d_batch.iter().zip(&plan.f_server) {
        per_round_delay
            .pretrain
            .push(pretrain_delay(&cfg.server, &cfg.learning, &[d], &[f]));
        per_round_energy
            .pretrain
            .push(pretrain_energy(&cfg.server, &cfg.learning, &[d], &[f]));
    }
    for n in 0..plan.n as usize {
        let (b, f, p) = round_columns(plan, n);
        let ledger = finetune_round_ledger(
            cfg,
            &RoundAllocation {
                round: n,
                b: &b,
                f: &f,
                p: &p,
            },
        );
        per_round_delay.finetune.push(ledger.round_delay_s);
        let round_energy = ledger.download_energy_j
            + ledger
                .compute_energy_j
                .iter()
                .zip(&ledger.upload_energy_j)
                .map(|(c, u)| c + u)
                .sum::<f64>();
        per_round_energy.finetune.push(round_energy);
    }

    let total_delay_s = per_round_delay.pretrain_total() + per_round_delay.finetune_total();
    let total_energy_j = per_round_energy.pretrain_total() + per_round_energy.finetune_total();

    let upsilon = if plan.m + plan.n == 0 {
        violations.push(Violation::new("plan_shape", 1.0));
        None
    } else {
        Some(
            bound::convergence_bound(&cfg.learning, cfg.k(), &plan.d_batch, &plan.b_batch)?.upsilon,
        )
    };

    let tau0 = cfg.budgets.tau0_s;
    if total_delay_s > tau0 * (1.0 + 1e-12) {
        violations.push(Violation::new("delay_budget", total_delay_s - tau0));
    }
    let e0 = cfg.budgets.e0_j;
    if total_energy_j > e0 * (1.0 + 1e-12) {
        violations.push(Violation::new("energy_budget", total_energy_j - e0));
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{symmetric_scenario, worked_plan};
    use approx::assert_relative_eq;

    // Frozen from a high-precision evaluation of the worked link example:
    // gain 1e-5, 0.5 W, 100 kHz, 1e-16 W/Hz noise floor (SNR 5e5).
    const RATE: f64 = 1.893157145471137e6;
    const LINK_DELAY: f64 = 0.10564363369329669;

    #[test]
    fn uplink_rate_matches_frozen_value() {
        let cfg = symmetric_scenario();
        let r = uplink_rate(&cfg.devices[0], 0.5);
        assert_relative_eq!(r, RATE, max_relative = 1e-12);
    }

    #[test]
    fn zero_power_means_zero_rate() {
        let cfg = symmetric_scenario();
        assert_eq!(uplink_rate(&cfg.devices[0], 0.0), 0.0);
        let mut dev = cfg.devices[0].clone();
        dev.g_down = 0.0;
        assert_eq!(downlink_rate(&dev, &cfg.server), 0.0);
        assert_eq!(downlink_rate_with_gain(1e-5, 1e5, 1e-16, 0.0), 0.0);
    }

    #[test]
    fn doubling_bandwidth_less_than_doubles_rate_at_high_snr() {
        let cfg = symmetric_scenario();
        let dev = &cfg.devices[0];
        let r1 = uplink_rate(dev, 0.5);
        let mut wide = dev.clone();
        wide.bw_up_hz *= 2.0;
        let r2 = uplink_rate(&wide, 0.5);
        assert!(r2 > r1);
        assert!(
            r2 < 2.0 * r1,
            "rate {} should be sublinear in bandwidth",
            r2
        );
    }

    #[test]
    fn uplink_rate_is_increasing_and_concave_in_power() {
        let cfg = symmetric_scenario();
        let dev = &cfg.devices[0];
        let grid: Vec<f64> = (1..=60).map(|i| i as f64 * 0.01).collect();
        let rates: Vec<f64> = grid.iter().map(|&p| uplink_rate(dev, p)).collect();
        for w in rates.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in rates.windows(3) {
            assert!(w[2] - w[1] <= w[1] - w[0] + 1e-9);
        }
    }

    #[test]
    fn upload_energy_is_concave_in_power() {
        let cfg = symmetric_scenario();
        let dev = &cfg.devices[0];
        let beta = cfg.learning.model_bits;
        let e = |p: f64| p * beta / uplink_rate(dev, p);
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 * 0.005).collect();
        let vals: Vec<f64> = grid.iter().map(|&p| e(p)).collect();
        for w in vals.windows(3) {
            let second_diff = w[2] - 2.0 * w[1] + w[0];
            assert!(second_diff <= 1e-12, "second difference {second_diff} > 0");
        }
    }

    #[test]
    fn pretrain_delay_worked_example() {
        let cfg = symmetric_scenario();
        let d = pretrain_delay(&cfg.server, &cfg.learning, &[700.0], &[1.6e9]);
        assert_relative_eq!(d, 0.4375, max_relative = 1e-15);
        assert_eq!(pretrain_delay(&cfg.server, &cfg.learning, &[], &[]), 0.0);
        let two = pretrain_delay(&cfg.server, &cfg.learning, &[700.0, 700.0], &[1.6e9, 1.6e9]);
        assert_eq!(two, 2.0 * d);
    }

    #[test]
    fn zero_frequency_with_positive_batch_is_infinite_delay() {
        let cfg = symmetric_scenario();
        assert!(pretrain_delay(&cfg.server, &cfg.learning, &[10.0], &[0.0]).is_infinite());
    }

    #[test]
    fn pretrain_energy_worked_example() {
        let cfg = symmetric_scenario();
        let e = pretrain_energy(&cfg.server, &cfg.learning, &[700.0], &[1.6e9]);
        assert_relative_eq!(e, 28.02688, max_relative = 1e-12);
        // Halving the clock quarters the energy at fixed batch.
        let half = pretrain_energy(&cfg.server, &cfg.learning, &[700.0], &[0.8e9]);
        assert_relative_eq!(half, e / 4.0, max_relative = 1e-12);
        assert_eq!(pretrain_energy(&cfg.server, &cfg.learning, &[], &[]), 0.0);
    }

    #[test]
    fn finetune_round_delay_worked_example() {
        let cfg = symmetric_scenario();
        let b = vec![700.0; 3];
        let f = vec![3.6e8; 3];
        let p = vec![0.5; 3];
        let delay = finetune_round_delay(
            &cfg,
            &RoundAllocation {
                round: 0,
                b: &b,
                f: &f,
                p: &p,
            },
        );
        // download + compute + upload
        let expected = LINK_DELAY + 700.0 * 1e6 / 3.6e8 + LINK_DELAY;
        assert_relative_eq!(delay, expected, max_relative = 1e-12);
        assert_relative_eq!(delay, 2.1557317118310378, max_relative = 1e-12);
    }

    #[test]
    fn slowest_device_dominates_round_delay() {
        let cfg = symmetric_scenario();
        let b = vec![700.0; 3];
        let mut f = vec![3.6e8; 3];
        f[1] = 1.8e8; // twice as slow
        let p = vec![0.5; 3];
        let ledger = finetune_round_ledger(
            &cfg,
            &RoundAllocation {
                round: 0,
                b: &b,
                f: &f,
                p: &p,
            },
        );
        let dev1 =
            ledger.download_delay_s[1] + ledger.compute_delay_s[1] + ledger.upload_delay_s[1];
        assert_eq!(ledger.round_delay_s, dev1);
    }

    #[test]
    fn zero_batches_leave_only_link_delays() {
        let cfg = symmetric_scenario();
        let b = vec![0.0; 3];
        let f = vec![3.6e8; 3];
        let p = vec![0.5; 3];
        let delay = finetune_round_delay(
            &cfg,
            &RoundAllocation {
                round: 0,
                b: &b,
                f: &f,
                p: &p,
            },
        );
        assert_relative_eq!(delay, 2.0 * LINK_DELAY, max_relative = 1e-12);
    }

    #[test]
    fn finetune_energy_worked_example() {
        let cfg = symmetric_scenario();
        let b = vec![700.0; 3];
        let f = vec![3.6e8; 3];
        let p = vec![0.5; 3];
        let parts = finetune_energy_components(
            &cfg,
            &RoundAllocation {
                round: 0,
                b: &b,
                f: &f,
                p: &p,
            },
        );
        assert_relative_eq!(parts.compute_j[0], 0.0988848, max_relative = 1e-12);
        assert_relative_eq!(parts.upload_j[0], 0.5 * LINK_DELAY, max_relative = 1e-12);
        assert_relative_eq!(parts.download_j, 0.5 * LINK_DELAY, max_relative = 1e-12);
    }

    #[test]
    fn upload_energy_identity_is_exact() {
        let cfg = symmetric_scenario();
        for &p in &[0.037, 0.2, 0.5] {
            let b = vec![300.0; 3];
            let f = vec![2.0e8; 3];
            let pw = vec![p; 3];
            let ledger = finetune_round_ledger(
                &cfg,
                &RoundAllocation {
                    round: 0,
                    b: &b,
                    f: &f,
                    p: &pw,
                },
            );
            for k in 0..3 {
                assert_eq!(ledger.upload_energy_j[k], p * ledger.upload_delay_s[k]);
            }
        }
    }

    #[test]
    fn totals_worked_example_and_feasibility() {
        let cfg = symmetric_scenario();
        let plan = worked_plan(&cfg, 1, 1);
        let report = totals(&cfg, &plan).unwrap();
        assert_relative_eq!(
            report.total_delay_s,
            2.5932317118310378,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            report.total_energy_j,
            28.534821667386593,
            max_relative = 1e-12
        );
        assert!(report.feasible);
        assert!(report.upsilon.is_some());

        // Feasibility is exactly the budget comparison.
        let mut tight = cfg.clone();
        tight.budgets.tau0_s = 2.0;
        let r2 = totals(&tight, &plan).unwrap();
        assert!(!r2.feasible);
        assert!(r2.violations.iter().any(|v| v.constraint == "delay_budget"));
    }

    #[test]
    fn empty_plan_reports_infeasible_shape() {
        let cfg = symmetric_scenario();
        let plan = Plan::empty(cfg.k());
        let report = totals(&cfg, &plan).unwrap();
        assert_eq!(report.total_delay_s, 0.0);
        assert_eq!(report.total_energy_j, 0.0);
        assert!(report.upsilon.is_none());
        assert!(!report.feasible);
        assert!(report
            .violations
            .iter()
            .any(|v| v.constraint == "plan_shape"));
    }

    #[test]
    fn totals_are_sums_of_round_entries() {
        let cfg = symmetric_scenario();
        let plan = worked_plan(&cfg, 3, 4);
        let report = totals(&cfg, &plan).unwrap();
        let delay_sum =
            report.per_round_delay.pretrain_total() + report.per_round_delay.finetune_total();
        assert_relative_eq!(report.total_delay_s, delay_sum, max_relative = 1e-12);
        let energy_sum =
            report.per_round_energy.pretrain_total() + report.per_round_energy.finetune_total();
        assert_relative_eq!(report.total_energy_j, energy_sum, max_relative = 1e-12);
    }

    #[test]
    fn zero_rate_upload_is_infinite_delay_not_error() {
        let mut cfg = symmetric_scenario();
        for d in &mut cfg.devices {
            d.g_up = 0.0;
        }
        let plan = worked_plan(&cfg, 0, 1);
        let report = totals(&cfg, &plan).unwrap();
        assert!(report.total_delay_s.is_infinite());
        assert!(!report.feasible);
    }
}
