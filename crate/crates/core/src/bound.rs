//! The convergence bound on the average squared gradient norm, its
//! large-round-count limit, and empirical Wasserstein-1 distances.

use crate::config::LearningProfile;
use crate::error::{Error, Result};

/// The bound split into its three summands.
///
/// `upsilon = noise_term + shift_term + init_term`, where the noise term
/// carries the reciprocal-batch sums `lambda` (pre-training) and `omega`
/// (fine-tuning), the shift term prices the distribution change between
/// stages, and the init term carries the starting loss gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundBreakdown {
    pub lambda: f64,
    pub omega: f64,
    pub noise_term: f64,
    pub shift_term: f64,
    pub init_term: f64,
    pub upsilon: f64,
}

/// Evaluates the bound for `m = d_batch.len()` pre-training rounds and
/// `n = b_batch[k].len()` fine-tuning rounds with `k` devices.
///
/// With no pre-training rounds the shift term is dropped: there is no
/// transferred model whose data change it would price, and the loss gap is
/// read on the fine-tuning task instead.
pub fn convergence_bound(
    learning: &LearningProfile,
    k: usize,
    d_batch: &[f64],
    b_batch: &[Vec<f64>],
) -> Result<BoundBreakdown> {
    let m = d_batch.len();
    if b_batch.len() != k {
        return Err(Error::ShapeMismatch {
            what: "b_batch".into(),
            expected: format!("{k} device rows"),
            got: b_batch.len().to_string(),
        });
    }
    let n = b_batch.first().map_or(0, Vec::len);
    if b_batch.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch {
            what: "b_batch".into(),
            expected: format!("{n} rounds per device"),
            got: "ragged rows".into(),
        });
    }
    if m + n == 0 {
        return Err(Error::Invalid(
            "bound undefined for zero total rounds".into(),
        ));
    }

    let mut lambda = 0.0;
    for (mi, &d) in d_batch.iter().enumerate() {
        if d < 1.0 {
            return Err(Error::Invalid(format!(
                "pre-training batch {d} in active round {mi} must be at least 1"
            )));
        }
        lambda += 1.0 / d;
    }
    let mut omega = 0.0;
    for ni in 0..n {
        let b_tot: f64 = b_batch.iter().map(|row| row[ni]).sum();
        if b_batch.iter().any(|row| row[ni] < 0.0) || b_tot < 1.0 {
            return Err(Error::Invalid(format!(
                "fine-tuning round {ni} needs a total batch of at least 1, got {b_tot}"
            )));
        }
        omega += 1.0 / b_tot;
    }

    let rounds = (m + n) as f64;
    let gamma = learning.gamma;
    let noise_term = gamma
        * (learning.rho * learning.alpha * learning.alpha * lambda
            + learning.rho_hat * learning.alpha_hat * learning.alpha_hat * k as f64 * omega)
        / rounds;
    let shift_term = if m > 0 {
        2.0 * learning.rho_tilde * learning.wdist / (rounds * gamma)
    } else {
        0.0
    };
    let init_term = 2.0 * learning.loss_gap / (rounds * gamma);

    Ok(BoundBreakdown {
        lambda,
        omega,
        noise_term,
        shift_term,
        init_term,
        upsilon: noise_term + shift_term + init_term,
    })
}

/// Limit of the bound as the fine-tuning round count grows without bound,
/// at a fixed per-round total batch `b_tot`.
pub fn asymptotic_limit(learning: &LearningProfile, k: usize, b_tot: f64) -> f64 {
    learning.gamma * learning.rho_hat * learning.alpha_hat * learning.alpha_hat * k as f64 / b_tot
}

/// Exact empirical Wasserstein-1 distance between two 1-d samples.
///
/// Inputs are sorted internally. Equal counts reduce to the mean absolute
/// difference of order statistics; unequal counts integrate the quantile
/// gap over the merged grid, which is exact for empirical measures.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("empty sample set".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);

    if a.len() == b.len() {
        let n = a.len() as f64;
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }

    // Merged quantile grid: breakpoints are multiples of 1/(na*nb), so the
    // interval widths are exact integers in those units.
    let (na, nb) = (a.len(), b.len());
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut pos = 0u64; // current quantile in units of 1/(na*nb)
    let mut acc = 0.0f64;
    while ia < na && ib < nb {
        let qa = ((ia + 1) * nb) as u64;
        let qb = ((ib + 1) * na) as u64;
        let next = qa.min(qb);
        acc += (next - pos) as f64 * (a[ia] - b[ib]).abs();
        pos = next;
        if qa == next {
            ia += 1;
        }
        if qb == next {
            ib += 1;
        }
    }
    Ok(acc / (na as f64 * nb as f64))
}

/// Exact empirical Wasserstein-1 distance between small point clouds in
/// R^d via minimum-cost perfect matching on Euclidean costs.
pub fn wasserstein_exact_small(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    const MAX_POINTS: usize = 64;
    if a.is_empty() {
        return Err(Error::Invalid("empty sample set".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "matching needs equal sample counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() > MAX_POINTS {
        return Err(Error::Invalid(format!(
            "matching estimator is limited to {MAX_POINTS} points, got {}",
            a.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|p| p.len() != dim) {
        return Err(Error::Invalid("inconsistent point dimensions".into()));
    }

    let n = a.len();
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|pa| b.iter().map(|pb| euclidean(pa, pb)).collect())
        .collect();
    Ok(min_cost_matching(&cost) / n as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum-cost perfect matching on a square cost matrix via shortest
/// augmenting paths with potentials (O(n^3)).
fn min_cost_matching(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1]; // row potentials; last = scratch
    let mut v = vec![0.0f64; n + 1]; // column potentials; last = virtual column
    let mut matched_row = vec![NONE; n + 1]; // per column, assigned row
    let mut way = vec![0usize; n + 1];

    for row in 0..n {
        matched_row[n] = row;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[i0][j] - u[i0] - v[j];
                    if cur < min_slack[j] {
                        min_slack[j] = cur;
                        way[j] = j0;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    if matched_row[j] != NONE {
                        u[matched_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == NONE {
                break;
            }
        }
        // Augment along the recorded path.
        while j0 != n {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    (0..n).map(|j| cost[matched_row[j]][j]).sum()
}
