//! Scenario, plan, and instance generators shared by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Plan, ScenarioConfig};
use crate::presets;

/// The small-model preset with all three devices made identical, matching
/// the hand-evaluated delay/energy examples.
pub fn symmetric_scenario() -> ScenarioConfig {
    let mut cfg = presets::mnist_scale();
    for d in &mut cfg.devices {
        d.power_coeff = 1.09e-27;
    }
    cfg
}

/// A full-throttle plan: max batches, max clocks, max power, `m`+`n` rounds.
pub fn worked_plan(cfg: &ScenarioConfig, m: u32, n: u32) -> Plan {
    let k = cfg.k();
    Plan {
        m,
        n,
        d_batch: vec![cfg.server.batch_max; m as usize],
        f_server: vec![cfg.server.f_max_hz; m as usize],
        b_batch: (0..k)
            .map(|ki| vec![cfg.devices[ki].batch_max; n as usize])
            .collect(),
        f_device: (0..k)
            .map(|ki| vec![cfg.devices[ki].f_max_hz; n as usize])
            .collect(),
        p_up: (0..k)
            .map(|ki| vec![cfg.devices[ki].p_max_w; n as usize])
            .collect(),
    }
}

/// A random in-box plan against `cfg` with up to `m_cap`/`n_cap` rounds.
pub fn random_plan(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, m_cap: u32, n_cap: u32) -> Plan {
    let k = cfg.k();
    let m = rng.gen_range(0..=m_cap);
    let mut n = rng.gen_range(0..=n_cap);
    if m + n == 0 {
        n = 1;
    }
    let mut plan = Plan::empty(k);
    plan.m = m;
    plan.n = n;
    for _ in 0..m {
        plan.d_batch.push(rng.gen_range(1.0..=cfg.server.batch_max));
        plan.f_server
            .push(rng.gen_range(0.05..=1.0) * cfg.server.f_max_hz);
    }
    for (ki, dev) in cfg.devices.iter().enumerate() {
        for _ in 0..n {
            plan.b_batch[ki].push(rng.gen_range(1.0..=dev.batch_max));
            plan.f_device[ki].push(rng.gen_range(0.05..=1.0) * dev.f_max_hz);
            // Stay under the average budget in every prefix.
            plan.p_up[ki].push(rng.gen_range(0.0..=dev.p_ave_w.min(dev.p_max_w)));
        }
    }
    plan
}

/// A randomized but well-posed scenario: heterogeneous devices, equal
/// average and peak power budgets, and budgets wide enough that the
/// single-round cells are comfortably feasible.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = presets::mnist_scale();
    let k = rng.gen_range(1..=3);
    cfg.devices.truncate(k);

    for (i, dev) in cfg.devices.iter_mut().enumerate() {
        dev.id = i as u32;
        dev.g_up = 10f64.powf(rng.gen_range(-5.5..-4.0));
        dev.g_down = 10f64.powf(rng.gen_range(-5.5..-4.0));
        let p = rng.gen_range(0.2..0.8);
        dev.p_ave_w = p;
        dev.p_max_w = p;
        dev.f_max_hz = rng.gen_range(2.0e8..8.0e8);
        dev.power_coeff = rng.gen_range(0.8e-27..2.5e-27);
        dev.batch_max = rng.gen_range(80..700) as f64;
    }
    cfg.server.f_max_hz = rng.gen_range(1.0e9..3.0e9);
    cfg.server.power_coeff = rng.gen_range(1.5e-27..5.0e-27);
    cfg.server.batch_max = rng.gen_range(100..700) as f64;

    cfg.learning.gamma = rng.gen_range(0.005..0.05);
    let rho = rng.gen_range(0.5..2.0);
    cfg.learning.rho = rho;
    cfg.learning.rho_hat = rho;
    cfg.learning.gamma = cfg.learning.gamma.min(0.9 / rho);
    cfg.learning.alpha = rng.gen_range(0.5..3.0);
    cfg.learning.alpha_hat = rng.gen_range(0.5..3.0);
    cfg.learning.wdist = rng.gen_range(0.0..1.0);
    cfg.learning.loss_gap = rng.gen_range(0.5..3.0);

    cfg.search.m_max = 2;
    cfg.search.n_max = 2;

    // Size the budgets off the full-throttle grid corner so that the small
    // cells always fit and the big ones are tight but reachable.
    let corner = worked_plan(&cfg, cfg.search.m_max, cfg.search.n_max);
    let report = crate::metrics::totals(&cfg, &corner).expect("well-shaped plan");
    cfg.budgets.tau0_s = report.total_delay_s * rng.gen_range(0.6..1.5);
    cfg.budgets.e0_j = report.total_energy_j * rng.gen_range(0.6..1.5);

    cfg.validate().expect("generated scenario must be valid");
    cfg
}
