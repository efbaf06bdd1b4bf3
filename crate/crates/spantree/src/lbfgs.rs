//! Distributed preconditioned L-BFGS.
//!
//! Gradients are local sums aggregated with one AllReduce per iteration
//! (the scalar loss rides along as an extra vector element); everything
//! else — the two-loop recursion, the line search decisions, the history
//! update — is replicated arithmetic on identical inputs, so every node
//! walks the identical iterate sequence bit for bit.
//!
//! The inverse-Hessian seed is the Jacobi preconditioner: the global
//! Hessian diagonal at the starting point plus the L2 coefficient, computed
//! once with one extra AllReduce and kept fixed. Once a correction pair
//! exists, the seed is additionally scaled by `y's / y'y` of the newest
//! pair, the standard heuristic.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::comm::{Collective, ReduceOp};
use crate::data::Shard;
use crate::loss::Objective;
use crate::{Error, Result};

/// Pairs with `y's <= floor * ||y|| ||s||` are skipped to keep the inverse
/// Hessian positive definite.
const CURVATURE_FLOOR: f64 = 1e-12;
/// Preconditioner entries at or below this get neutral scaling 1.0
/// (coordinates with no curvature anywhere and no regularization).
const PRECOND_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct LineSearchConfig {
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per failed trial.
    pub backtrack: f64,
    pub max_trials: u32,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            c1: 1e-4,
            backtrack: 0.5,
            max_trials: 30,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsParams {
    pub max_iters: usize,
    /// Correction pairs kept.
    pub memory: usize,
    /// Stop when the preconditioned gradient norm drops to this.
    pub tol: f64,
    pub line_search: LineSearchConfig,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams {
            max_iters: 20,
            memory: 10,
            tol: 1e-6,
            line_search: LineSearchConfig::default(),
        }
    }
}

impl LbfgsParams {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("history size must be >= 1".into()));
        }
        let ls = &self.line_search;
        if !(ls.c1 > 0.0 && ls.c1 < 1.0) {
            return Err(Error::Config(format!("c1 must be in (0,1), got {}", ls.c1)));
        }
        if !(ls.backtrack > 0.0 && ls.backtrack < 1.0) {
            return Err(Error::Config(format!(
                "backtrack factor must be in (0,1), got {}",
                ls.backtrack
            )));
        }
        if ls.max_trials == 0 {
            return Err(Error::Config("line search needs at least one trial".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tolerance must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Replicated optimizer state.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub weights: Vec<f64>,
    history: VecDeque<Pair>,
    /// Jacobi diagonal (global Hessian diagonal + lambda), fixed.
    pub precond: Vec<f64>,
    pub iterations: usize,
    /// Last accepted (unscaled, regularized) objective value.
    pub objective: f64,
    memory: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LbfgsState {
    pub fn new(weights: Vec<f64>, precond: Vec<f64>, memory: usize) -> Self {
        assert_eq!(weights.len(), precond.len());
        LbfgsState {
            weights,
            history: VecDeque::with_capacity(memory),
            precond,
            iterations: 0,
            objective: f64::INFINITY,
            memory,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn reset_history(&mut self) {
        self.history.clear();
    }

    /// Store a correction pair unless it fails the curvature screen.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let ys = dot(&y, &s);
        if !(ys > CURVATURE_FLOOR * norm(&y) * norm(&s)) {
            return false;
        }
        if self.history.len() == self.memory {
            self.history.pop_front();
        }
        self.history.push_back(Pair { s, y, rho: 1.0 / ys });
        true
    }

    fn gamma(&self) -> f64 {
        match self.history.back() {
            None => 1.0,
            Some(p) => {
                let yy = dot(&p.y, &p.y);
                if yy > 0.0 {
                    dot(&p.y, &p.s) / yy
                } else {
                    1.0
                }
            }
        }
    }

    /// Two-loop recursion: `-H grad` with `H` seeded by
    /// `gamma * precond^-1`. With empty history this is preconditioned
    /// steepest descent.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.weights.len());
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for p in self.history.iter().rev() {
            let alpha = p.rho * dot(&p.s, &q);
            for (qj, yj) in q.iter_mut().zip(&p.y) {
                *qj -= alpha * yj;
            }
            alphas.push(alpha);
        }
        let gamma = self.gamma();
        for (qj, dj) in q.iter_mut().zip(&self.precond) {
            *qj = gamma * *qj / dj;
        }
        for (p, alpha) in self.history.iter().zip(alphas.iter().rev()) {
            let beta = p.rho * dot(&p.y, &q);
            for (qj, sj) in q.iter_mut().zip(&p.s) {
                *qj += (alpha - beta) * sj;
            }
        }
        for qj in q.iter_mut() {
            *qj = -*qj;
        }
        q
    }

    /// `|| precond^-1/2 grad ||`, the stopping quantity.
    pub fn precond_grad_norm(&self, grad: &[f64]) -> f64 {
        grad.iter()
            .zip(&self.precond)
            .map(|(g, d)| g * g / d)
            .sum::<f64>()
            .sqrt()
    }
}

/// Global objective and gradient at `w` (identical on every node): local
/// sums are aggregated in a single vector AllReduce with the scalar loss as
/// one extra element, then the regularizer is added locally once.
pub fn global_gradient<C: Collective>(
    w: &[f64],
    shard: &Shard,
    objective: &Objective,
    coll: &mut C,
) -> Result<(f64, Vec<f64>)> {
    let (f_local, mut grad) = objective.batch_objective_and_gradient(w, shard)?;
    grad.push(f_local);
    coll.allreduce(&mut grad, ReduceOp::Sum)?;
    let f_data = grad.pop().expect("loss element");
    let f = f_data + objective.regularizer(w);
    for (g, wj) in grad.iter_mut().zip(w) {
        *g += objective.lambda * wj;
    }
    Ok((f, grad))
}

/// Jacobi preconditioner at `w`: AllReduce of the local Hessian diagonals,
/// plus lambda, floored away from zero.
pub fn global_preconditioner<C: Collective>(
    w: &[f64],
    shard: &Shard,
    objective: &Objective,
    coll: &mut C,
) -> Result<Vec<f64>> {
    let mut diag = objective.hessian_diagonal(w, shard)?;
    coll.allreduce(&mut diag, ReduceOp::Sum)?;
    for d in diag.iter_mut() {
        *d += objective.lambda;
        if !(*d > PRECOND_FLOOR) {
            *d = 1.0;
        }
    }
    Ok(diag)
}

/// One line of the per-iteration trace. `objective` is the scaled value
/// (divided by the global example count), `grad_norm` the preconditioned
/// gradient norm, `seconds` wall time since the optimization started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: u32,
    pub objective: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,objective,grad_norm,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.objective, r.grad_norm, r.seconds);
    }
    out
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_to_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    /// Preconditioned gradient norm reached the tolerance.
    Converged,
    MaxIters,
    /// The line search could not make progress even after a history reset.
    Stalled,
}

#[derive(Debug)]
pub struct LbfgsOutcome {
    pub state: LbfgsState,
    pub trace: Vec<TraceRow>,
    pub status: LbfgsStatus,
    /// Line-search trials per attempted iteration (each trial is one scalar
    /// collective).
    pub trials: Vec<u32>,
    /// Cumulative seconds spent inside collectives, one entry per trace
    /// row; drives the stall-time accounting in run reports.
    pub coll_seconds: Vec<f64>,
}

/// Run the full optimization from `w0`, which must be identical on every
/// node. `examples` is the global example count used to scale reported
/// objectives. `on_iterate(iter, state)` fires at iteration 0 and after
/// every accepted step.
pub fn lbfgs_optimize<C: Collective>(
    w0: Vec<f64>,
    shard: &Shard,
    objective: &Objective,
    params: &LbfgsParams,
    examples: f64,
    coll: &mut C,
    mut on_iterate: impl FnMut(u32, &LbfgsState),
) -> Result<LbfgsOutcome> {
    params.validate()?;
    let scale = if examples > 0.0 { examples } else { 1.0 };
    let started = Instant::now();

    let precond = global_preconditioner(&w0, shard, objective, coll)?;
    let (mut f, mut grad) = global_gradient(&w0, shard, objective, coll)?;
    let mut state = LbfgsState::new(w0, precond, params.memory);
    state.objective = f;

    let mut trace = vec![TraceRow {
        iter: 0,
        objective: f / scale,
        grad_norm: state.precond_grad_norm(&grad),
        seconds: started.elapsed().as_secs_f64(),
    }];
    let mut coll_seconds = vec![coll.stats().seconds];
    on_iterate(0, &state);

    let mut trials_log = Vec::new();
    let mut reset_used = false;
    let status = loop {
        if state.precond_grad_norm(&grad) <= params.tol {
            break LbfgsStatus::Converged;
        }
        if state.iterations >= params.max_iters {
            break LbfgsStatus::MaxIters;
        }

        let mut dir = state.direction(&grad);
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            // Numerically non-descent; drop the history and fall back to
            // preconditioned steepest descent.
            state.reset_history();
            dir = state.direction(&grad);
            slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                break LbfgsStatus::Stalled;
            }
        }

        // Backtracking Armijo; every trial costs one scalar collective.
        let mut step = 1.0;
        let mut accepted = None;
        let mut trials = 0u32;
        while trials < params.line_search.max_trials {
            trials += 1;
            let w_try: Vec<f64> = state
                .weights
                .iter()
                .zip(&dir)
                .map(|(w, d)| w + step * d)
                .collect();
            let f_local = objective.batch_objective(&w_try, shard)?;
            let f_try =
                coll.allreduce_scalar(f_local, ReduceOp::Sum)? + objective.regularizer(&w_try);
            if f_try <= f + params.line_search.c1 * step * slope {
                accepted = Some((w_try, f_try));
                break;
            }
            step *= params.line_search.backtrack;
        }
        trials_log.push(trials);

        let Some((w_new, f_new)) = accepted else {
            if !reset_used {
                reset_used = true;
                state.reset_history();
                continue;
            }
            break LbfgsStatus::Stalled;
        };

        let (f_check, grad_new) = global_gradient(&w_new, shard, objective, coll)?;
        debug_assert_eq!(
            f_check.to_bits(),
            f_new.to_bits(),
            "line-search and gradient objectives must agree bitwise"
        );
        let s: Vec<f64> = w_new
            .iter()
            .zip(&state.weights)
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        state.push_pair(s, y);
        state.weights = w_new;
        state.objective = f_new;
        state.iterations += 1;
        f = f_new;
        grad = grad_new;

        trace.push(TraceRow {
            iter: state.iterations as u32,
            objective: f / scale,
            grad_norm: state.precond_grad_norm(&grad),
            seconds: started.elapsed().as_secs_f64(),
        });
        coll_seconds.push(coll.stats().seconds);
        on_iterate(state.iterations as u32, &state);
    };

    Ok(LbfgsOutcome {
        state,
        trace,
        status,
        trials: trials_log,
        coll_seconds,
    })
}
