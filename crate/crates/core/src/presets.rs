//! Ready-made scenario parameterizations at two model scales.
//!
//! Radio, processor, and budget figures follow common small-CNN and
//! mid-CNN edge deployments. The learning-theoretic constants (smoothness,
//! gradient noise, distribution shift, loss gap) are illustrative choices:
//! they are inputs here, not measurable system parameters.

use crate::config::{
    Budgets, ChannelModel, DeviceProfile, LearningProfile, ScenarioConfig, SearchSpace,
    ServerProfile, SolverSettings,
};

fn device(
    id: u32,
    power_coeff: f64,
    f_max_hz: f64,
    bw_up_hz: f64,
    noise: f64,
    batch_max: f64,
) -> DeviceProfile {
    DeviceProfile {
        id,
        g_up: 1e-5,
        g_down: 1e-5,
        bw_up_hz,
        noise_up_psd: noise,
        noise_down_psd: noise,
        p_ave_w: 0.5,
        p_max_w: 0.5,
        f_max_hz,
        flops_per_cycle: 1.0,
        pue: 1.0,
        power_coeff,
        batch_max,
    }
}

/// Small-model scale: a ~60 K-parameter CNN, 0.2 Mbit gradients, 1 MFLOP
/// per sample, 100 kHz links, three devices.
pub fn mnist_scale() -> ScenarioConfig {
    ScenarioConfig {
        devices: vec![
            device(0, 1.09e-27, 3.6e8, 1e5, 1e-16, 700.0),
            device(1, 1.56e-27, 3.6e8, 1e5, 1e-16, 700.0),
            device(2, 2.34e-27, 3.6e8, 1e5, 1e-16, 700.0),
        ],
        server: ServerProfile {
            f_max_hz: 1.6e9,
            flops_per_cycle: 1.0,
            pue: 4.0,
            power_coeff: 3.91e-27,
            tx_power_w: 0.5,
            bw_down_hz: 1e5,
            batch_max: 700.0,
        },
        learning: LearningProfile {
            gamma: 0.01,
            rho: 1.0,
            rho_hat: 1.0,
            alpha: 2.0,
            alpha_hat: 2.0,
            rho_tilde: 1.0,
            wdist: 0.5,
            loss_gap: 2.0,
            n_flop: 1e6,
            model_bits: 2e5,
            model_dim: Some(61_710),
        },
        budgets: Budgets {
            tau0_s: 1000.0,
            e0_j: 300.0,
        },
        search: SearchSpace {
            m_max: 4,
            n_max: 4,
            m_min: 0,
            n_min: 0,
        },
        solver: SolverSettings::default(),
        channel: ChannelModel::Fixed,
    }
}

/// Mid-model scale: a ~6 M-parameter CNN, 24 Mbit gradients, 4 GFLOPs per
/// sample, 3 MHz links, three devices.
pub fn cinic_cifar_scale() -> ScenarioConfig {
    ScenarioConfig {
        devices: vec![
            device(0, 0.7e-28, 9e8, 3e6, 3.3e-18, 500.0),
            device(1, 1.0e-28, 9e8, 3e6, 3.3e-18, 500.0),
            device(2, 1.5e-28, 9e8, 3e6, 3.3e-18, 500.0),
        ],
        server: ServerProfile {
            f_max_hz: 4.0e9,
            flops_per_cycle: 1.0,
            pue: 4.0,
            power_coeff: 2.5e-28,
            tx_power_w: 0.5,
            bw_down_hz: 3e6,
            batch_max: 500.0,
        },
        learning: LearningProfile {
            gamma: 0.01,
            rho: 1.0,
            rho_hat: 1.0,
            alpha: 2.0,
            alpha_hat: 2.0,
            rho_tilde: 1.0,
            wdist: 0.5,
            loss_gap: 2.0,
            n_flop: 4e9,
            model_bits: 24e6,
            model_dim: Some(6_170_000),
        },
        budgets: Budgets {
            tau0_s: 3500.0,
            e0_j: 2700.0,
        },
        search: SearchSpace {
            m_max: 4,
            n_max: 4,
            m_min: 0,
            n_min: 0,
        },
        solver: SolverSettings::default(),
        channel: ChannelModel::Fixed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        mnist_scale().validate().unwrap();
        cinic_cifar_scale().validate().unwrap();
    }
}
