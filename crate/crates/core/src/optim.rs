//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Every accepted step satisfies the sufficient-decrease condition, so the
//! recorded objective trace is non-increasing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop once the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
    /// Stop once the objective is at or below this value.
    pub target: f64,
    /// Relative decrease below which an iteration counts as stalled.
    pub stall_tol: f64,
    /// Consecutive stalled iterations before giving up.
    pub stall_iters: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            memory: 12,
            grad_tol: 1e-12,
            target: 0.0,
            stall_tol: 1e-13,
            stall_iters: 20,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    GradientTolerance,
    Stalled,
    LineSearchFailed,
    MaxIterations,
}

/// Diagnostics from a minimization run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop_reason: StopReason,
    /// Objective after initialization and after every accepted step.
    pub trace: Vec<f64>,
}

impl FitReport {
    /// False when the run failed to improve on its starting point.
    pub fn reduced(&self) -> bool {
        self.final_objective < self.initial_objective || self.final_objective == 0.0
    }

    pub fn converged(&self) -> bool {
        matches!(
            self.stop_reason,
            StopReason::TargetReached | StopReason::GradientTolerance | StopReason::Stalled
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> (Vec<f64>, FitReport)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut trace = vec![fx];
    let initial = fx;

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut stalled = 0;
    let mut iterations = 0;

    let stop_reason = loop {
        if fx <= opts.target {
            break StopReason::TargetReached;
        }
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break StopReason::MaxIterations;
        }

        // Two-loop recursion for dir = -H g.
        dir.copy_from_slice(&g);
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (a - b) * si;
            }
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) || !slope.is_finite() {
            history.clear();
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi;
            }
            slope = -dot(&g, &g);
        }

        let mut step = if history.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_trial = f(&x_new, &mut g_new);
            evaluations += 1;
            if f_trial.is_finite() && f_trial <= fx + 1e-4 * step * slope {
                accepted = Some(f_trial);
                break;
            }
            step *= 0.5;
        }

        let Some(f_next) = accepted else {
            if history.is_empty() {
                break StopReason::LineSearchFailed;
            }
            // Curvature model went bad; restart from steepest descent.
            history.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let decrease = fx - f_next;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_next;
        trace.push(fx);
        iterations += 1;

        if decrease <= opts.stall_tol * fx.abs().max(1e-300) {
            stalled += 1;
            if stalled >= opts.stall_iters {
                break StopReason::Stalled;
            }
        } else {
            stalled = 0;
        }
    };

    let report = FitReport {
        initial_objective: initial,
        final_objective: fx,
        iterations,
        evaluations,
        stop_reason,
        trace,
    };
    (x, report)
}
