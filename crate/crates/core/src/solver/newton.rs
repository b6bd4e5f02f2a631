//! Log-barrier interior-point minimizer with damped Newton steps.
//!
//! Minimizes a convex objective subject to convex inequality constraints
//! `g_i(x) <= 0` by centering `f(x) + mu * sum(-ln(-g_i(x)))` along a
//! decreasing barrier schedule. A feasibility variant minimizes the maximum
//! constraint slack to produce a strictly interior starting point.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::expr::Expr;

#[derive(Debug, Clone)]
pub struct BarrierOptions {
    /// Initial barrier weight.
    pub mu0: f64,
    /// Multiplicative decrease per stage.
    pub mu_shrink: f64,
    /// Stop once `#constraints * mu` falls below this duality-gap target.
    pub gap_target: f64,
    /// Newton decrement threshold per centering stage.
    pub newton_tol: f64,
    pub max_newton_per_stage: u32,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            mu0: 1.0,
            mu_shrink: 0.1,
            gap_target: 1e-9,
            newton_tol: 1e-12,
            max_newton_per_stage: 80,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierOutcome {
    pub x: Vec<f64>,
    /// Objective value at `x` (without barrier terms).
    pub objective: f64,
    pub newton_iters: u32,
    /// `#constraints * mu` at exit: an upper bound on the suboptimality of
    /// `x` for the constrained problem.
    pub dual_gap: f64,
    /// Infinity norm of the KKT stationarity residual with the barrier
    /// multipliers `lambda_i = mu / (-g_i(x))`.
    pub stationarity: f64,
    pub converged: bool,
}

/// Minimizes `objective` over `g_i(x) <= 0` from a strictly feasible `x0`.
///
/// `stop_below`: optional `(var, threshold)` early exit used by the
/// feasibility phase — the solve returns as soon as `x[var] < threshold`.
pub fn minimize_barrier(
    objective: &Expr,
    constraints: &[Expr],
    x0: &[f64],
    opts: &BarrierOptions,
    stop_below: Option<(usize, f64)>,
) -> BarrierOutcome {
    debug_assert!(objective.is_convex());
    debug_assert!(constraints.iter().all(Expr::is_convex));
    debug_assert!(
        constraints.iter().all(|c| c.value(x0) < 0.0),
        "barrier start must be strictly feasible"
    );

    let n = x0.len();
    let mut x = x0.to_vec();
    let mut mu = opts.mu0;
    let mut newton_iters = 0u32;
    let mut stationarity = f64::INFINITY;
    let mut converged = true;

    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut con_grad = vec![0.0; n];

    loop {
        // Center at the current mu.
        let mut stage_ok = false;
        for _ in 0..opts.max_newton_per_stage {
            newton_iters += 1;
            grad.fill(0.0);
            hess.fill(0.0);
            objective.grad_into(&x, 1.0, grad.as_mut_slice());
            objective.hess_into(&x, 1.0, &mut hess);
            for con in constraints {
                let g = con.value(&x);
                debug_assert!(g < 0.0);
                let w = mu / (-g);
                con.grad_into(&x, w, grad.as_mut_slice());
                con.hess_into(&x, w, &mut hess);
                // Rank-one term (mu / g^2) * grad_g * grad_g^T.
                con_grad.iter_mut().for_each(|v| *v = 0.0);
                con.grad_into(&x, 1.0, &mut con_grad);
                let vars = con.vars();
                let r = mu / (g * g);
                for &i in &vars {
                    for &j in &vars {
                        hess[(i, j)] += r * con_grad[i] * con_grad[j];
                    }
                }
            }

            let step = solve_regularized(&mut hess, &grad);
            let decrement = 0.5 * grad.dot(&step);
            stationarity = grad.amax();
            if decrement.abs() <= opts.newton_tol || stationarity <= 1e-12 {
                stage_ok = true;
                break;
            }

            // Backtracking line search on the barrier function.
            let b0 = barrier_value(objective, constraints, &x, mu);
            let slope = -2.0 * decrement; // grad . direction, negative
            let mut t = 1.0;
            let mut moved = false;
            while t >= 1e-14 {
                let cand: Vec<f64> = x
                    .iter()
                    .zip(step.iter())
                    .map(|(xi, si)| xi - t * si)
                    .collect();
                let bv = barrier_value(objective, constraints, &cand, mu);
                if bv.is_finite() && bv <= b0 + 1e-4 * t * slope {
                    x = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                // Stalled: the current point is as centered as the
                // arithmetic allows at this mu.
                stage_ok = true;
                break;
            }
        }
        converged &= stage_ok;

        if let Some((var, thresh)) = stop_below {
            if x[var] < thresh {
                break;
            }
        }
        if constraints.len() as f64 * mu <= opts.gap_target {
            break;
        }
        mu *= opts.mu_shrink;
        // Keep a sane floor: below ~1e-18 the barrier no longer moves f64s.
        if mu < 1e-18 {
            break;
        }
    }

    BarrierOutcome {
        objective: objective.value(&x),
        newton_iters,
        dual_gap: constraints.len() as f64 * mu,
        stationarity,
        converged,
        x,
    }
}

fn barrier_value(objective: &Expr, constraints: &[Expr], x: &[f64], mu: f64) -> f64 {
    let mut v = objective.value(x);
    if !v.is_finite() {
        return f64::INFINITY;
    }
    for con in constraints {
        let g = con.value(x);
        if g >= 0.0 || g.is_nan() {
            return f64::INFINITY;
        }
        v += mu * -(-g).ln();
    }
    v
}

/// Solves `H d = g` with escalating diagonal regularization.
fn solve_regularized(hess: &mut DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let n = grad.len();
    let diag_scale = (0..n)
        .map(|i| hess[(i, i)].abs())
        .fold(0.0f64, f64::max)
        .max(1e-30);
    let mut reg = 0.0;
    loop {
        let trial = if reg == 0.0 {
            hess.clone()
        } else {
            let mut h = hess.clone();
            for i in 0..n {
                h[(i, i)] += reg;
            }
            h
        };
        if let Some(chol) = Cholesky::new(trial) {
            return chol.solve(grad);
        }
        reg = if reg == 0.0 {
            1e-12 * diag_scale
        } else {
            reg * 100.0
        };
        if reg > diag_scale {
            // Last resort: steepest descent scaled to the diagonal.
            return grad / diag_scale;
        }
    }
}

#[derive(Debug, Clone)]
pub enum PhaseOneOutcome {
    /// A point with every constraint strictly negative.
    Feasible(Vec<f64>),
    /// Best achievable max-slack stayed nonnegative.
    Infeasible { best_slack: f64, x: Vec<f64> },
}

/// Searches for a strictly feasible point of `g_i(x) <= 0`.
///
/// Minimizes the auxiliary slack `s` subject to `g_i(x) - s <= 0`, starting
/// from any in-domain `x0`, and returns early once `s` dips below zero.
pub fn phase_one(
    nvars: usize,
    constraints: &[Expr],
    x0: &[f64],
    opts: &BarrierOptions,
) -> PhaseOneOutcome {
    let s_idx = nvars;
    let mut shifted: Vec<Expr> = Vec::with_capacity(constraints.len());
    for con in constraints {
        let mut c = con.clone();
        c.push_lin(s_idx, -1.0);
        shifted.push(c);
    }
    let mut objective = Expr::default();
    objective.push_lin(s_idx, 1.0);

    let worst = constraints
        .iter()
        .map(|c| c.value(x0))
        .fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(worst.is_finite(), "phase-one start must be in-domain");
    let mut start = x0.to_vec();
    start.push(worst.abs() * 0.05 + worst + 0.1);

    let out = minimize_barrier(&objective, &shifted, &start, opts, Some((s_idx, -1e-7)));
    let slack = out.x[s_idx];
    let x = out.x[..nvars].to_vec();
    if slack < 0.0 && constraints.iter().all(|c| c.value(&x) < 0.0) {
        PhaseOneOutcome::Feasible(x)
    } else {
        PhaseOneOutcome::Infeasible {
            best_slack: slack,
            x,
        }
    }
}
