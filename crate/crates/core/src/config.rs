//! Scenario, plan, and report records with validation and JSON I/O.
//!
//! A scenario file fully describes one system: the device fleet, the edge
//! server, learning constants, delay/energy budgets, the (M, N) search
//! space, and solver settings. Plans and evaluation reports round-trip
//! through the same JSON representation (shortest decimal that parses back
//! to the identical binary64 value).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// One edge device: channel, radio, and processor parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: u32,
    /// Uplink channel power gain (dimensionless).
    pub g_up: f64,
    /// Downlink channel power gain (dimensionless).
    pub g_down: f64,
    /// Uplink bandwidth allocated to this device (Hz).
    pub bw_up_hz: f64,
    /// Noise power spectral density at the server receiver (W/Hz).
    pub noise_up_psd: f64,
    /// Noise power spectral density at the device receiver (W/Hz).
    pub noise_down_psd: f64,
    /// Average transmit power budget over the fine-tuning stage (W).
    pub p_ave_w: f64,
    /// Maximum per-round transmit power (W).
    pub p_max_w: f64,
    /// Maximum processor clock frequency (cycles/s).
    pub f_max_hz: f64,
    /// FLOPs per processor cycle.
    #[serde(default = "default_flops_per_cycle")]
    pub flops_per_cycle: f64,
    /// Power usage effectiveness multiplier on compute energy.
    pub pue: f64,
    /// Processor power coefficient (W/(cycles/s)^3).
    pub power_coeff: f64,
    /// Maximum local batch size (samples).
    pub batch_max: f64,
}

/// The edge server: processor, downlink radio, and pre-training data cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerProfile {
    /// Maximum processor clock frequency (cycles/s).
    pub f_max_hz: f64,
    /// FLOPs per processor cycle.
    #[serde(default = "default_flops_per_cycle")]
    pub flops_per_cycle: f64,
    /// Power usage effectiveness multiplier on compute energy.
    pub pue: f64,
    /// Processor power coefficient (W/(cycles/s)^3).
    pub power_coeff: f64,
    /// Downlink transmit power (W).
    pub tx_power_w: f64,
    /// Downlink broadcast bandwidth (Hz).
    pub bw_down_hz: f64,
    /// Maximum pre-training batch size (samples).
    pub batch_max: f64,
}

/// Learning-theoretic constants entering the convergence bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningProfile {
    /// Shared learning rate for both stages.
    pub gamma: f64,
    /// Gradient smoothness constant, pre-training loss.
    pub rho: f64,
    /// Gradient smoothness constant, fine-tuning loss.
    pub rho_hat: f64,
    /// Gradient-noise constant, pre-training stage.
    pub alpha: f64,
    /// Gradient-noise constant, fine-tuning stage.
    pub alpha_hat: f64,
    /// Lipschitz constant of the loss w.r.t. the data sample.
    pub rho_tilde: f64,
    /// Wasserstein distance between the two stages' data distributions.
    pub wdist: f64,
    /// Initial loss minus the infimum of the fine-tuning loss.
    pub loss_gap: f64,
    /// FLOPs to process one sample in one gradient step.
    pub n_flop: f64,
    /// Gradient/model size exchanged per round (bits).
    pub model_bits: f64,
    /// Model dimension; metadata only, never used numerically.
    #[serde(default)]
    pub model_dim: Option<u64>,
}

/// Delay and energy thresholds for the whole two-stage run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budgets {
    pub tau0_s: f64,
    pub e0_j: f64,
}

/// Bounds on the outer search over round counts (M, N).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub m_max: u32,
    pub n_max: u32,
    #[serde(default)]
    pub m_min: u32,
    #[serde(default)]
    pub n_min: u32,
}

/// Tunables for the inner continuous solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Relative objective decrease below which the outer iteration stops.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Cap on outer surrogate iterations per (M, N) cell.
    #[serde(default = "default_max_sca_iters")]
    pub max_sca_iters: u32,
    /// Target stationarity residual for each convex subproblem.
    #[serde(default = "default_tol_kkt")]
    pub tol_kkt: f64,
}

fn default_flops_per_cycle() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_max_sca_iters() -> u32 {
    50
}
fn default_tol_kkt() -> f64 {
    1e-8
}
fn default_path_loss() -> f64 {
    1e-5
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            epsilon: default_epsilon(),
            max_sca_iters: default_max_sca_iters(),
            tol_kkt: default_tol_kkt(),
        }
    }
}

/// How channel power gains vary over fine-tuning rounds.
///
/// The default keeps each device's gain fixed across rounds. `PerRound`
/// supplies explicit per-round gains; `Rayleigh` draws one fading
/// realization per device from a seeded exponential power-gain model and is
/// normalized to `Fixed` when the scenario is loaded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ChannelModel {
    #[default]
    Fixed,
    PerRound {
        g_up: Vec<Vec<f64>>,
        g_down: Vec<Vec<f64>>,
    },
    Rayleigh {
        seed: u64,
        #[serde(default = "default_path_loss")]
        mean_path_loss: f64,
    },
}

/// A complete, validated system description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub devices: Vec<DeviceProfile>,
    pub server: ServerProfile,
    pub learning: LearningProfile,
    pub budgets: Budgets,
    pub search: SearchSpace,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub channel: ChannelModel,
}

/// A complete decision: round counts plus per-round allocations.
///
/// Batch entries are real-valued; plans produced by the planner carry
/// integral batches. Device-indexed arrays are device-major: `b_batch[k][n]`
/// is device `k`'s batch in fine-tuning round `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub m: u32,
    pub n: u32,
    /// Pre-training batch size per round, length `m`.
    pub d_batch: Vec<f64>,
    /// Server clock per pre-training round (cycles/s), length `m`.
    pub f_server: Vec<f64>,
    /// Device batch sizes, `[K][n]`.
    pub b_batch: Vec<Vec<f64>>,
    /// Device clocks (cycles/s), `[K][n]`.
    pub f_device: Vec<Vec<f64>>,
    /// Device uplink transmit powers (W), `[K][n]`.
    pub p_up: Vec<Vec<f64>>,
}

impl Plan {
    /// An empty plan (no rounds in either stage) for `k` devices.
    pub fn empty(k: usize) -> Self {
        Plan {
            m: 0,
            n: 0,
            d_batch: vec![],
            f_server: vec![],
            b_batch: vec![vec![]; k],
            f_device: vec![vec![]; k],
            p_up: vec![vec![]; k],
        }
    }

    /// Total fine-tuning batch in round `n`, summed over devices.
    pub fn b_tot(&self, n: usize) -> f64 {
        self.b_batch.iter().map(|row| row[n]).sum()
    }
}

/// One constraint violation: which constraint, and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    #[serde(serialize_with = "ser_capped")]
    pub excess: f64,
}

impl Violation {
    pub fn new(constraint: impl Into<String>, excess: f64) -> Self {
        Violation {
            constraint: constraint.into(),
            excess,
        }
    }
}

/// Infinite excesses (e.g. zero-rate uploads) are capped so the report
/// stays representable in JSON.
fn ser_capped<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(if v.is_finite() { *v } else { f64::MAX })
}

/// Delay or energy per round, split by stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSeries {
    pub pretrain: Vec<f64>,
    pub finetune: Vec<f64>,
}

impl StageSeries {
    pub fn pretrain_total(&self) -> f64 {
        self.pretrain.iter().sum()
    }
    pub fn finetune_total(&self) -> f64 {
        self.finetune.iter().sum()
    }
}

/// Outcome of evaluating one plan against one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Convergence-bound value; absent for the degenerate zero-round plan.
    pub upsilon: Option<f64>,
    pub total_delay_s: f64,
    pub total_energy_j: f64,
    pub per_round_delay: StageSeries,
    pub per_round_energy: StageSeries,
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl ScenarioConfig {
    /// Number of devices.
    pub fn k(&self) -> usize {
        self.devices.len()
    }

    /// Uplink gain of device `k` in fine-tuning round `n`.
    pub fn gain_up(&self, k: usize, n: usize) -> f64 {
        match &self.channel {
            ChannelModel::PerRound { g_up, .. } => g_up[k][n],
            _ => self.devices[k].g_up,
        }
    }

    /// Downlink gain of device `k` in fine-tuning round `n`.
    pub fn gain_down(&self, k: usize, n: usize) -> f64 {
        match &self.channel {
            ChannelModel::PerRound { g_down, .. } => g_down[k][n],
            _ => self.devices[k].g_down,
        }
    }

    /// Checks every type invariant, returning the first violation found.
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::validation("devices", "at least one device required"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            let f = |name: &str| format!("devices[{i}].{name}");
            require_nonneg(&f("g_up"), d.g_up)?;
            require_nonneg(&f("g_down"), d.g_down)?;
            require_pos(&f("bw_up_hz"), d.bw_up_hz)?;
            require_pos(&f("noise_up_psd"), d.noise_up_psd)?;
            require_pos(&f("noise_down_psd"), d.noise_down_psd)?;
            require_pos(&f("p_ave_w"), d.p_ave_w)?;
            require_pos(&f("p_max_w"), d.p_max_w)?;
            require_pos(&f("f_max_hz"), d.f_max_hz)?;
            require_pos(&f("flops_per_cycle"), d.flops_per_cycle)?;
            require_pos(&f("pue"), d.pue)?;
            require_pos(&f("power_coeff"), d.power_coeff)?;
            require_pos(&f("batch_max"), d.batch_max)?;
            if d.batch_max < 1.0 {
                return Err(Error::validation(
                    f("batch_max"),
                    "must be at least 1 sample",
                ));
            }
            if d.p_ave_w > d.p_max_w {
                return Err(Error::validation(
                    f("p_ave_w"),
                    format!("average budget {} exceeds maximum {}", d.p_ave_w, d.p_max_w),
                ));
            }
        }
        let s = &self.server;
        require_pos("server.f_max_hz", s.f_max_hz)?;
        require_pos("server.flops_per_cycle", s.flops_per_cycle)?;
        require_pos("server.pue", s.pue)?;
        require_pos("server.power_coeff", s.power_coeff)?;
        require_pos("server.tx_power_w", s.tx_power_w)?;
        require_pos("server.bw_down_hz", s.bw_down_hz)?;
        require_pos("server.batch_max", s.batch_max)?;
        if s.batch_max < 1.0 {
            return Err(Error::validation(
                "server.batch_max",
                "must be at least 1 sample",
            ));
        }

        let l = &self.learning;
        require_pos("learning.gamma", l.gamma)?;
        require_nonneg("learning.rho", l.rho)?;
        require_nonneg("learning.rho_hat", l.rho_hat)?;
        require_nonneg("learning.alpha", l.alpha)?;
        require_nonneg("learning.alpha_hat", l.alpha_hat)?;
        require_nonneg("learning.rho_tilde", l.rho_tilde)?;
        require_nonneg("learning.wdist", l.wdist)?;
        require_nonneg("learning.loss_gap", l.loss_gap)?;
        require_pos("learning.n_flop", l.n_flop)?;
        require_pos("learning.model_bits", l.model_bits)?;
        let rate_cap = (1.0 / l.rho).min(1.0 / l.rho_hat);
        if l.gamma > rate_cap {
            return Err(Error::validation(
                "learning.gamma",
                format!(
                    "learning rate {} exceeds min(1/rho, 1/rho_hat) = {rate_cap}",
                    l.gamma
                ),
            ));
        }

        require_pos("budgets.tau0_s", self.budgets.tau0_s)?;
        require_pos("budgets.e0_j", self.budgets.e0_j)?;

        let sp = &self.search;
        if sp.m_min > sp.m_max {
            return Err(Error::validation("search.m_min", "m_min exceeds m_max"));
        }
        if sp.n_min > sp.n_max {
            return Err(Error::validation("search.n_min", "n_min exceeds n_max"));
        }
        if sp.m_max + sp.n_max < 1 {
            return Err(Error::validation(
                "search.m_max",
                "m_max + n_max must be at least 1",
            ));
        }

        require_pos("solver.epsilon", self.solver.epsilon)?;
        require_pos("solver.tol_kkt", self.solver.tol_kkt)?;

        if let ChannelModel::PerRound { g_up, g_down } = &self.channel {
            let k = self.devices.len();
            let n_max = self.search.n_max as usize;
            for (name, rows) in [("channel.g_up", g_up), ("channel.g_down", g_down)] {
                if rows.len() != k {
                    return Err(Error::validation(
                        name,
                        format!("need one row per device ({k})"),
                    ));
                }
                if rows.iter().any(|r| r.len() < n_max) {
                    return Err(Error::validation(
                        name,
                        format!("each row needs at least n_max = {n_max} entries"),
                    ));
                }
                if rows.iter().flatten().any(|g| !g.is_finite() || *g < 0.0) {
                    return Err(Error::validation(
                        name,
                        "gains must be finite and nonnegative",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Replaces a `Rayleigh` channel model by its drawn per-device gains.
    ///
    /// Power gains are exponential with the configured mean path loss, one
    /// draw per device and link direction, fixed across rounds.
    pub fn resolve_channel(&mut self) {
        if let ChannelModel::Rayleigh {
            seed,
            mean_path_loss,
        } = self.channel
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for dev in &mut self.devices {
                let u: f64 = rng.gen();
                dev.g_up = -mean_path_loss * (1.0 - u).ln();
                let u: f64 = rng.gen();
                dev.g_down = -mean_path_loss * (1.0 - u).ln();
            }
            self.channel = ChannelModel::Fixed;
        }
    }
}

fn require_pos(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(
            field,
            format!("must be finite and positive, got {v}"),
        ))
    }
}

fn require_nonneg(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(
            field,
            format!("must be finite and nonnegative, got {v}"),
        ))
    }
}

/// Loads, validates, and normalizes a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = read_json(path.as_ref())?;
    cfg.validate()?;
    cfg.resolve_channel();
    Ok(cfg)
}

/// Writes a scenario with all defaults materialized.
pub fn save_scenario(path: impl AsRef<Path>, cfg: &ScenarioConfig) -> Result<()> {
    write_json(path.as_ref(), cfg)
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<Plan> {
    read_json(path.as_ref())
}

pub fn save_plan(path: impl AsRef<Path>, plan: &Plan) -> Result<()> {
    write_json(path.as_ref(), plan)
}

pub fn save_report(path: impl AsRef<Path>, report: &EvaluationReport) -> Result<()> {
    write_json(path.as_ref(), report)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_owned(),
        source,
    })
}

/// Absolute slack used when checking box and power constraints, sized to
/// absorb binary64 roundoff without masking real violations.
fn tol_for(bound: f64) -> f64 {
    1e-12 * bound.abs().max(1.0)
}

/// Checks a plan's box and average-power constraints against a scenario.
///
/// Returns the (possibly empty) violation list; shape errors are hard
/// failures. Batch entries must be at least 1 in every round that exists,
/// which keeps the reciprocal terms of the convergence bound finite.
pub fn validate_plan(cfg: &ScenarioConfig, plan: &Plan) -> Result<Vec<Violation>> {
    let k = cfg.k();
    let m = plan.m as usize;
    let n = plan.n as usize;
    check_len("plan.d_batch", plan.d_batch.len(), m)?;
    check_len("plan.f_server", plan.f_server.len(), m)?;
    for (name, rows) in [
        ("plan.b_batch", &plan.b_batch),
        ("plan.f_device", &plan.f_device),
        ("plan.p_up", &plan.p_up),
    ] {
        check_len(name, rows.len(), k)?;
        for (ki, row) in rows.iter().enumerate() {
            check_len(&format!("{name}[{ki}]"), row.len(), n)?;
        }
    }

    let mut out = Vec::new();
    for (mi, (&d, &f)) in plan.d_batch.iter().zip(&plan.f_server).enumerate() {
        if d < 1.0 - tol_for(1.0) {
            out.push(Violation::new(
                format!("pretrain_batch_min[m={mi}]"),
                1.0 - d,
            ));
        }
        if d > cfg.server.batch_max + tol_for(cfg.server.batch_max) {
            out.push(Violation::new(
                format!("pretrain_batch_box[m={mi}]"),
                d - cfg.server.batch_max,
            ));
        }
        if f < -tol_for(0.0) {
            out.push(Violation::new(format!("server_clock_box[m={mi}]"), -f));
        }
        if f > cfg.server.f_max_hz + tol_for(cfg.server.f_max_hz) {
            out.push(Violation::new(
                format!("server_clock_box[m={mi}]"),
                f - cfg.server.f_max_hz,
            ));
        }
    }
    for (ki, dev) in cfg.devices.iter().enumerate() {
        for ni in 0..n {
            let b = plan.b_batch[ki][ni];
            let f = plan.f_device[ki][ni];
            let p = plan.p_up[ki][ni];
            if b < 1.0 - tol_for(1.0) {
                out.push(Violation::new(
                    format!("finetune_batch_min[k={ki},n={ni}]"),
                    1.0 - b,
                ));
            }
            if b > dev.batch_max + tol_for(dev.batch_max) {
                out.push(Violation::new(
                    format!("finetune_batch_box[k={ki},n={ni}]"),
                    b - dev.batch_max,
                ));
            }
            if f < -tol_for(0.0) {
                out.push(Violation::new(
                    format!("device_clock_box[k={ki},n={ni}]"),
                    -f,
                ));
            }
            if f > dev.f_max_hz + tol_for(dev.f_max_hz) {
                out.push(Violation::new(
                    format!("device_clock_box[k={ki},n={ni}]"),
                    f - dev.f_max_hz,
                ));
            }
            if p < -tol_for(0.0) {
                out.push(Violation::new(format!("power_box[k={ki},n={ni}]"), -p));
            }
            if p > dev.p_max_w + tol_for(dev.p_max_w) {
                out.push(Violation::new(
                    format!("power_box[k={ki},n={ni}]"),
                    p - dev.p_max_w,
                ));
            }
        }
        if n > 0 {
            let mean = plan.p_up[ki].iter().sum::<f64>() / n as f64;
            if mean > dev.p_ave_w + tol_for(dev.p_ave_w) {
                out.push(Violation::new(
                    format!("avg_power[k={ki}]"),
                    mean - dev.p_ave_w,
                ));
            }
        }
    }
    Ok(out)
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        })
    }
}
