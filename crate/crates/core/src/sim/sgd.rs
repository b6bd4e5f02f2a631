//! Synthetic two-stage gradient descent on quadratic tasks.
//!
//! Quadratic losses make the smoothness and gradient-noise constants exact,
//! so the convergence bound can be tested sharply: per-sample noise is
//! calibrated to meet the variance bound with equality, and the stage-shift
//! penalty is instantiated through the offset between the two quadratics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::LearningProfile;
use crate::error::{Error, Result};

/// A pair of quadratic losses, one per stage.
///
/// `L_pre(w) = rho/2 |w - w_star_pre|^2 + base_pre` and likewise for the
/// fine-tuning loss; the gradients are exactly `rho`-Lipschitz and the
/// additive mini-batch noise hits the variance cap `alpha^2 / batch`
/// exactly.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub dim: usize,
    pub rho: f64,
    pub rho_hat: f64,
    pub w_star_pre: Vec<f64>,
    pub w_star_fine: Vec<f64>,
    pub alpha: f64,
    pub alpha_hat: f64,
    pub w0: Vec<f64>,
    pub base_pre: f64,
    pub base_fine: f64,
}

impl QuadraticTask {
    pub fn loss_pre(&self, w: &[f64]) -> f64 {
        0.5 * self.rho * norm_sq_diff(w, &self.w_star_pre) + self.base_pre
    }

    pub fn loss_fine(&self, w: &[f64]) -> f64 {
        0.5 * self.rho_hat * norm_sq_diff(w, &self.w_star_fine) + self.base_fine
    }

    pub fn grad_pre(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.w_star_pre)
            .map(|(wi, si)| self.rho * (wi - si))
            .collect()
    }

    pub fn grad_fine(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.w_star_fine)
            .map(|(wi, si)| self.rho_hat * (wi - si))
            .collect()
    }

    /// Infimum of the fine-tuning loss.
    pub fn inf_fine(&self) -> f64 {
        self.base_fine
    }

    /// Builds a task whose constants reproduce a learning profile: the
    /// starting point realizes `loss_gap` and the fine-tuning optimum is
    /// offset orthogonally so the stage-shift penalty `rho_tilde * wdist`
    /// covers the hand-off loss change for any plan.
    pub fn for_profile(learning: &LearningProfile, dim: usize) -> Result<QuadraticTask> {
        if dim < 2 {
            return Err(Error::Invalid("synthetic task needs dimension >= 2".into()));
        }
        if learning.rho <= 0.0 || learning.rho_hat <= 0.0 {
            return Err(Error::Invalid(
                "synthetic task needs positive curvatures".into(),
            ));
        }
        if learning.rho_hat > learning.rho {
            return Err(Error::Invalid(
                "the orthogonal-offset construction needs rho_hat <= rho".into(),
            ));
        }
        let mut w0 = vec![0.0; dim];
        w0[0] = (2.0 * learning.loss_gap / learning.rho).sqrt();
        let mut w_star_fine = vec![0.0; dim];
        w_star_fine[1] = (2.0 * learning.rho_tilde * learning.wdist / learning.rho_hat).sqrt();
        Ok(QuadraticTask {
            dim,
            rho: learning.rho,
            rho_hat: learning.rho_hat,
            w_star_pre: vec![0.0; dim],
            w_star_fine,
            alpha: learning.alpha,
            alpha_hat: learning.alpha_hat,
            w0,
            base_pre: 0.0,
            base_fine: 0.0,
        })
    }
}

fn norm_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Exact expected hand-off loss change `E[L_fine(w_M)] - E[L_pre(w_M)]`
/// for a given pre-training batch schedule; any shift penalty at least
/// this large makes the bound's transfer step valid for the task.
pub fn required_shift(task: &QuadraticTask, d_batch: &[f64], gamma: f64) -> f64 {
    let contraction = 1.0 - gamma * task.rho;
    let mut mean: Vec<f64> = task.w0.clone();
    let mut var = 0.0;
    for &d in d_batch {
        for (mi, si) in mean.iter_mut().zip(&task.w_star_pre) {
            *mi = si + contraction * (*mi - si);
        }
        var = contraction * contraction * var + gamma * gamma * task.alpha * task.alpha / d;
    }
    let fine = 0.5 * task.rho_hat * (norm_sq_diff(&mean, &task.w_star_fine) + var) + task.base_fine;
    let pre = 0.5 * task.rho * (norm_sq_diff(&mean, &task.w_star_pre) + var) + task.base_pre;
    fine - pre
}

/// Gradient norm and loss recorded at the start of one round.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RoundSample {
    pub grad_norm_sq: f64,
    pub loss: f64,
}

/// One seeded run of the two-stage emulator.
#[derive(Debug, Clone, Serialize)]
pub struct SgdTrace {
    pub seed: u64,
    pub pre: Vec<RoundSample>,
    pub fine: Vec<RoundSample>,
    /// Pre-training loss at the hand-off point `w_M`.
    pub loss_pre_end: f64,
    /// Fine-tuning loss at the hand-off point (the stage-2 start).
    pub loss_fine_start: f64,
    /// Fine-tuning loss after the final round.
    pub loss_fine_end: f64,
}

/// Counter-style stream per (seed, stage, round, device): reproducible and
/// independent of evaluation order.
fn noise_rng(seed: u64, stage: u64, round: u64, device: u64) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [stage, round, device] {
        h ^= v
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Runs `d_batch.len()` centralized rounds on the pre-training quadratic,
/// then `b_batch[k].len()` federated rounds on the fine-tuning quadratic
/// with batch-weighted aggregation. Per-round records hold the full
/// gradient norm and loss before the step.
pub fn run_synthetic_sgd(
    task: &QuadraticTask,
    gamma: f64,
    d_batch: &[f64],
    b_batch: &[Vec<f64>],
    seed: u64,
) -> Result<SgdTrace> {
    if gamma > 1.0 / task.rho || gamma > 1.0 / task.rho_hat {
        return Err(Error::Invalid(format!(
            "learning rate {gamma} exceeds min(1/rho, 1/rho_hat)"
        )));
    }
    let k = b_batch.len();
    let n = b_batch.first().map_or(0, Vec::len);
    if b_batch.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch {
            what: "b_batch".into(),
            expected: format!("{n} rounds per device"),
            got: "ragged rows".into(),
        });
    }

    let mut w = task.w0.clone();
    let mut pre = Vec::with_capacity(d_batch.len());
    for (mi, &d) in d_batch.iter().enumerate() {
        let grad = task.grad_pre(&w);
        pre.push(RoundSample {
            grad_norm_sq: norm_sq(&grad),
            loss: task.loss_pre(&w),
        });
        let sigma = task.alpha / (d * task.dim as f64).sqrt();
        let noise = gaussian_vec(&mut noise_rng(seed, 0, mi as u64, 0), task.dim, sigma);
        for i in 0..task.dim {
            w[i] -= gamma * (grad[i] + noise[i]);
        }
    }
    let loss_pre_end = task.loss_pre(&w);
    let loss_fine_start = task.loss_fine(&w);

    let mut fine = Vec::with_capacity(n);
    for ni in 0..n {
        let grad = task.grad_fine(&w);
        fine.push(RoundSample {
            grad_norm_sq: norm_sq(&grad),
            loss: task.loss_fine(&w),
        });
        let b_tot: f64 = b_batch.iter().map(|row| row[ni]).sum();
        let mut agg = grad;
        for (ki, row) in b_batch.iter().enumerate() {
            let b = row[ni];
            let weight = b / b_tot;
            let sigma = task.alpha_hat / (b * task.dim as f64).sqrt();
            let noise = gaussian_vec(
                &mut noise_rng(seed, 1, ni as u64, ki as u64),
                task.dim,
                sigma,
            );
            for i in 0..task.dim {
                agg[i] += weight * noise[i];
            }
        }
        for i in 0..task.dim {
            w[i] -= gamma * agg[i];
        }
    }
    let _ = k;

    Ok(SgdTrace {
        seed,
        pre,
        fine,
        loss_pre_end,
        loss_fine_start,
        loss_fine_end: task.loss_fine(&w),
    })
}

/// One Monte-Carlo inequality check: means of both sides and whether
/// `lhs <= rhs` holds within two standard errors of the difference.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IneqCheck {
    pub lhs_mean: f64,
    pub rhs_mean: f64,
    pub diff_se: f64,
    pub holds: bool,
}

fn ineq_check(diffs: &[f64], lhs_mean: f64, rhs_mean: f64) -> IneqCheck {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    IneqCheck {
        lhs_mean,
        rhs_mean,
        diff_se: se,
        holds: mean <= 2.0 * se + 1e-15,
    }
}

/// Monte-Carlo check of the per-stage descent inequalities.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LemmaReport {
    /// Fine-tuning loss improvement vs. its descent/noise bound.
    pub finetune_descent: IneqCheck,
    /// Hand-off loss vs. the pre-training descent bound plus shift.
    pub pretrain_transfer: IneqCheck,
}

/// Requires at least 30 seeds. `shift_bound` is the penalty assumed for
/// the stage hand-off (`rho_tilde * wdist` in profile terms).
pub fn check_lemma_inequalities(
    task: &QuadraticTask,
    gamma: f64,
    d_batch: &[f64],
    b_batch: &[Vec<f64>],
    shift_bound: f64,
    traces: &[SgdTrace],
) -> Result<LemmaReport> {
    if traces.len() < 30 {
        return Err(Error::Invalid(format!(
            "lemma checks need at least 30 seeds, got {}",
            traces.len()
        )));
    }
    let n = b_batch.first().map_or(0, Vec::len);
    let k = b_batch.len() as f64;
    let omega: f64 = (0..n)
        .map(|ni| 1.0 / b_batch.iter().map(|row| row[ni]).sum::<f64>())
        .sum();
    let lambda: f64 = d_batch.iter().map(|d| 1.0 / d).sum();

    let descent_fine_coeff = gamma * (1.0 - task.rho_hat * gamma / 2.0);
    let noise_fine = task.rho_hat * task.alpha_hat * task.alpha_hat * k * gamma * gamma / 2.0;
    let descent_pre_coeff = gamma * (1.0 - task.rho * gamma / 2.0);
    let noise_pre = task.rho * task.alpha * task.alpha * gamma * gamma / 2.0;
    let loss_at_start = task.loss_pre(&task.w0);

    let mut d1 = Vec::with_capacity(traces.len());
    let mut d2 = Vec::with_capacity(traces.len());
    let (mut lhs1, mut rhs1, mut lhs2, mut rhs2) = (0.0, 0.0, 0.0, 0.0);
    for tr in traces {
        let grad_sum_fine: f64 = tr.fine.iter().map(|s| s.grad_norm_sq).sum();
        let l1 = tr.loss_fine_end - tr.loss_fine_start;
        let r1 = -descent_fine_coeff * grad_sum_fine + noise_fine * omega;
        d1.push(l1 - r1);
        lhs1 += l1;
        rhs1 += r1;

        let grad_sum_pre: f64 = tr.pre.iter().map(|s| s.grad_norm_sq).sum();
        let l2 = tr.loss_fine_start;
        let r2 =
            -descent_pre_coeff * grad_sum_pre + noise_pre * lambda + loss_at_start + shift_bound;
        d2.push(l2 - r2);
        lhs2 += l2;
        rhs2 += r2;
    }
    let count = traces.len() as f64;
    Ok(LemmaReport {
        finetune_descent: ineq_check(&d1, lhs1 / count, rhs1 / count),
        pretrain_transfer: ineq_check(&d2, lhs2 / count, rhs2 / count),
    })
}

/// Monte-Carlo average of the squared gradient norms against the
/// closed-form bound with matching constants.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundCheck {
    pub empirical_mean: f64,
    pub empirical_se: f64,
    pub upsilon: f64,
    pub holds: bool,
}

pub fn check_convergence_bound(
    task: &QuadraticTask,
    gamma: f64,
    d_batch: &[f64],
    b_batch: &[Vec<f64>],
    shift_bound: f64,
    traces: &[SgdTrace],
) -> Result<BoundCheck> {
    let m = d_batch.len();
    let profile = LearningProfile {
        gamma,
        rho: task.rho,
        rho_hat: task.rho_hat,
        alpha: task.alpha,
        alpha_hat: task.alpha_hat,
        rho_tilde: 1.0,
        wdist: shift_bound,
        // With no pre-training the gap is read on the fine-tuning task.
        loss_gap: if m > 0 {
            task.loss_pre(&task.w0) - task.inf_fine()
        } else {
            task.loss_fine(&task.w0) - task.inf_fine()
        },
        n_flop: 1.0,
        model_bits: 1.0,
        model_dim: None,
    };
    let upsilon =
        crate::bound::convergence_bound(&profile, b_batch.len(), d_batch, b_batch)?.upsilon;

    let per_seed: Vec<f64> = traces
        .iter()
        .map(|tr| {
            let total: f64 = tr
                .pre
                .iter()
                .chain(tr.fine.iter())
                .map(|s| s.grad_norm_sq)
                .sum();
            total / (tr.pre.len() + tr.fine.len()) as f64
        })
        .collect();
    let count = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / count;
    let var = per_seed
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (count - 1.0).max(1.0);
    let se = (var / count).sqrt();
    Ok(BoundCheck {
        empirical_mean: mean,
        empirical_se: se,
        upsilon,
        holds: mean <= upsilon + 2.0 * se + 1e-15,
    })
}

/// Trace file: per-round means over seeds, both stages.
pub fn write_mean_trace_csv(path: impl AsRef<std::path::Path>, traces: &[SgdTrace]) -> Result<()> {
    let mut text = String::from("stage,round,grad_norm_sq,loss\n");
    if let Some(first) = traces.first() {
        let count = traces.len() as f64;
        for (stage, len) in [
            ("pretrain", first.pre.len()),
            ("finetune", first.fine.len()),
        ] {
            for round in 0..len {
                let (mut g, mut l) = (0.0, 0.0);
                for tr in traces {
                    let s = if stage == "pretrain" {
                        &tr.pre[round]
                    } else {
                        &tr.fine[round]
                    };
                    g += s.grad_norm_sq;
                    l += s.loss;
                }
                text.push_str(&format!("{stage},{round},{},{}\n", g / count, l / count));
            }
        }
    }
    std::fs::write(path.as_ref(), text).map_err(|source| Error::Write {
        path: path.as_ref().to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_task(alpha: f64, shift: f64) -> QuadraticTask {
        let mut w_star_fine = vec![0.0; 4];
        w_star_fine[1] = (2.0 * shift).sqrt(); // rho_hat = 1
        QuadraticTask {
            dim: 4,
            rho: 1.0,
            rho_hat: 1.0,
            w_star_pre: vec![0.0; 4],
            w_star_fine,
            alpha,
            alpha_hat: alpha,
            w0: vec![2.0, 0.0, 0.0, 0.0],
            base_pre: 0.0,
            base_fine: 0.0,
        }
    }

    #[test]
    fn noiseless_gradient_decays_geometrically() {
        let task = toy_task(0.0, 0.0);
        let gamma = 0.3;
        let b = vec![vec![50.0; 4]; 2];
        let tr = run_synthetic_sgd(&task, gamma, &[10.0; 5], &b, 7).unwrap();
        let rate = (1.0 - gamma * task.rho) * (1.0 - gamma * task.rho);
        for w in tr.pre.windows(2) {
            assert_relative_eq!(
                w[1].grad_norm_sq / w[0].grad_norm_sq,
                rate,
                max_relative = 1e-10
            );
        }
        for w in tr.fine.windows(2) {
            assert_relative_eq!(
                w[1].grad_norm_sq / w[0].grad_norm_sq,
                rate,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn at_optimum_with_matched_tasks_everything_is_zero() {
        let mut task = toy_task(0.0, 0.0);
        task.w0 = vec![0.0; 4];
        let b = vec![vec![10.0; 3]];
        let tr = run_synthetic_sgd(&task, 0.5, &[5.0; 2], &b, 3).unwrap();
        for s in tr.pre.iter().chain(tr.fine.iter()) {
            assert_eq!(s.grad_norm_sq, 0.0);
            assert_eq!(s.loss, 0.0);
        }
    }

    #[test]
    fn noiseless_loss_is_monotone_per_stage() {
        let task = toy_task(0.0, 0.3);
        let b = vec![vec![50.0; 6]; 2];
        let tr = run_synthetic_sgd(&task, 0.4, &[10.0; 4], &b, 1).unwrap();
        for w in tr.pre.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        for w in tr.fine.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
    }

    #[test]
    fn traces_are_reproducible_per_seed() {
        let task = toy_task(1.0, 0.2);
        let b = vec![vec![20.0; 3], vec![30.0; 3]];
        let a = run_synthetic_sgd(&task, 0.2, &[8.0; 2], &b, 99).unwrap();
        let c = run_synthetic_sgd(&task, 0.2, &[8.0; 2], &b, 99).unwrap();
        assert_eq!(a.loss_fine_end, c.loss_fine_end);
        let d = run_synthetic_sgd(&task, 0.2, &[8.0; 2], &b, 100).unwrap();
        assert_ne!(a.loss_fine_end, d.loss_fine_end);
    }

    #[test]
    fn rate_above_cap_is_rejected() {
        let task = toy_task(0.0, 0.0);
        assert!(run_synthetic_sgd(&task, 1.5, &[5.0], &[vec![5.0]], 0).is_err());
    }

    #[test]
    fn lemma_inequalities_hold_on_noisy_runs() {
        let task = toy_task(1.5, 0.4);
        let gamma = 0.25;
        let d = vec![12.0; 4];
        let b = vec![vec![25.0; 5], vec![40.0; 5]];
        let shift = required_shift(&task, &d, gamma).max(0.0);
        let traces: Vec<SgdTrace> = (0..100)
            .map(|s| run_synthetic_sgd(&task, gamma, &d, &b, s).unwrap())
            .collect();
        let report = check_lemma_inequalities(&task, gamma, &d, &b, shift, &traces).unwrap();
        assert!(
            report.finetune_descent.holds,
            "{:?}",
            report.finetune_descent
        );
        assert!(
            report.pretrain_transfer.holds,
            "{:?}",
            report.pretrain_transfer
        );

        let bound = check_convergence_bound(&task, gamma, &d, &b, shift, &traces).unwrap();
        assert!(bound.holds, "{bound:?}");
    }

    #[test]
    fn noiseless_descent_is_tight_at_rate_one_over_rho() {
        // One round, learning rate 1/rho_hat: the descent inequality is an
        // equality for quadratics.
        let task = toy_task(0.0, 0.0);
        let gamma = 1.0;
        let b = vec![vec![10.0]];
        let tr = run_synthetic_sgd(&task, gamma, &[], &b, 0).unwrap();
        let lhs = tr.loss_fine_end - tr.loss_fine_start;
        let rhs = -gamma * (1.0 - task.rho_hat * gamma / 2.0) * tr.fine[0].grad_norm_sq;
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn empty_finetune_stage_gives_empty_sums() {
        let task = toy_task(1.0, 0.0);
        let tr = run_synthetic_sgd(&task, 0.3, &[10.0; 3], &[], 5).unwrap();
        assert!(tr.fine.is_empty());
        assert_eq!(tr.loss_fine_start, tr.loss_fine_end);
    }

    #[test]
    fn lemma_checks_need_thirty_seeds() {
        let task = toy_task(1.0, 0.0);
        let b = vec![vec![10.0; 2]];
        let traces: Vec<SgdTrace> = (0..10)
            .map(|s| run_synthetic_sgd(&task, 0.3, &[5.0], &b, s).unwrap())
            .collect();
        assert!(check_lemma_inequalities(&task, 0.3, &[5.0], &b, 0.0, &traces).is_err());
    }

    #[test]
    fn required_shift_matches_monte_carlo() {
        let task = toy_task(1.2, 0.5);
        let gamma = 0.2;
        let d = vec![9.0; 3];
        let exact = required_shift(&task, &d, gamma);
        let seeds = 4000;
        let mut acc = 0.0;
        for s in 0..seeds {
            let tr = run_synthetic_sgd(&task, gamma, &d, &[], s).unwrap();
            acc += tr.loss_fine_start - tr.loss_pre_end;
        }
        let mc = acc / seeds as f64;
        assert!((mc - exact).abs() < 0.05, "mc {mc} vs exact {exact}");
    }
}
