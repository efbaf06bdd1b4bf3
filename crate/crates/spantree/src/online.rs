//! Single-node adaptive-gradient SGD pass.
//!
//! Per example: compute the gradient, step the weights with the
//! per-coordinate rate `eta / sqrt(G_jj)` composed with the invariance step
//! size, then accumulate the squared gradient into `G`. The pass is
//! completely local; no communication happens here.
//!
//! # Step-size invariance
//!
//! With importance weight `h`, one update should be equivalent to `h`
//! infinitesimal updates on the same example. Reduced to margin space, the
//! weight step `w -= s * slope * G^{-1/2} x` moves the margin by
//! `-s * slope * n2` where `n2 = sum_j x_j^2 / sqrt(G_jj)` is the squared
//! norm of the example under the adaptive metric (frozen at the start of
//! the example). The invariance step integrates the gradient flow
//! `dq/dt = -n2 * loss'(q)` for time `eta * h` and returns the `s` that
//! lands the margin on that solution:
//!
//! * squared loss has the closed form `s = (1 - exp(-eta_eff * n2)) / n2`;
//! * logistic loss needs the root of `u + e^u = u0 + e^u0 + n2 * eta_eff`
//!   (with `u = y*margin`), found by safeguarded Newton on the bracketed
//!   increment.
//!
//! As `eta_eff -> 0` both reduce to the plain step `s = eta_eff`.

use crate::data::Shard;
use crate::loss::{LossKind, Objective};
use crate::model::{ModelState, Phase};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariance {
    /// Solve the implicit update; equivalent to infinitely many
    /// infinitesimal steps on the example.
    ImportanceAware,
    /// `s = eta_effective`, the textbook explicit step.
    Plain,
}

#[derive(Debug, Clone, Copy)]
pub struct OnlineConfig {
    /// Base learning rate.
    pub eta: f64,
    pub invariance: Invariance,
    /// Number of online passes a strategy should run (>= 1).
    pub passes: u32,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            eta: 0.5,
            invariance: Invariance::ImportanceAware,
            passes: 1,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be a positive finite number, got {}",
                self.eta
            )));
        }
        if self.passes == 0 {
            return Err(Error::Config("online passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Counters reported by one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassStats {
    pub examples: u64,
    /// Times the logistic invariance solve failed to converge and fell back
    /// to the plain step.
    pub invariance_fallbacks: u64,
    /// Importance-weighted mean loss observed during the pass (at the
    /// pre-update weights of each example).
    pub mean_loss: f64,
}

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_RESIDUAL: f64 = 1e-10;

/// Step-size multiplier for the update `w -= s * slope * G^{-1/2} x`.
///
/// `scaled_norm2` is `sum_j x_j^2 / sqrt(G_jj)` over the example's support
/// and `eta_effective` is the base rate times the importance weight.
/// Returns the step and whether the solver fell back to the plain step.
pub fn invariance_step(
    loss: LossKind,
    margin: f64,
    label: f64,
    scaled_norm2: f64,
    eta_effective: f64,
    invariance: Invariance,
) -> (f64, bool) {
    if matches!(invariance, Invariance::Plain) {
        return (eta_effective, false);
    }
    if !(scaled_norm2 > 0.0) || eta_effective == 0.0 {
        return (eta_effective, false);
    }
    match loss {
        LossKind::Squared => {
            // Closed-form gradient flow on 0.5*(q - y)^2.
            let s = -(-eta_effective * scaled_norm2).exp_m1() / scaled_norm2;
            (s, false)
        }
        LossKind::Logistic => {
            let y = if label > 0.5 { 1.0 } else { -1.0 };
            let u0 = y * margin;
            let budget = scaled_norm2 * eta_effective;
            // For very confident correct predictions the flow barely moves
            // and s -> eta_effective; solving would divide 0 by 0.
            if u0 >= 700.0 {
                return (eta_effective, false);
            }
            match solve_logistic_increment(u0, budget) {
                Some(delta) => {
                    let a = u0.exp();
                    ((delta + delta * a) / scaled_norm2, false)
                }
                None => (eta_effective, true),
            }
        }
    }
}

/// Root of `phi(d) = d + e^{u0} (e^d - 1) - budget` on `[0, budget]`.
///
/// `phi` is increasing, `phi(0) = -budget <= 0` and `phi(budget) >= 0`, so
/// the root is bracketed; Newton steps are clamped into the bracket and any
/// overflow in the exponential simply tightens the upper bound.
fn solve_logistic_increment(u0: f64, budget: f64) -> Option<f64> {
    let a = u0.exp(); // may be 0 for very negative u0; never inf (u0 < 700)
    let phi = |d: f64| -> f64 {
        let grow = a * d.exp_m1();
        d + grow - budget
    };
    let mut lo = 0.0f64;
    let mut hi = budget;
    // First-order guess: d ~= budget * sigmoid(-u0).
    let mut x = budget / (1.0 + a);
    if !x.is_finite() || x <= lo || x >= hi {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..NEWTON_MAX_ITERS {
        let fx = phi(x);
        if fx.is_nan() {
            return None;
        }
        if fx.abs() <= NEWTON_RESIDUAL {
            return Some(x);
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let deriv = 1.0 + a * x.exp();
        let mut next = x - fx / deriv;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        x = next;
    }
    None
}

/// One in-order pass of Algorithm-style adaptive SGD over a shard.
///
/// Coordinates outside the examples' support are untouched; `G` entries
/// never decrease. Deterministic: same shard, same config, same result.
pub fn sgd_pass(
    shard: &Shard,
    model: &mut ModelState,
    config: &OnlineConfig,
    objective: &Objective,
) -> Result<PassStats> {
    config.validate()?;
    if model.dim() != objective.dim {
        return Err(Error::Argument(format!(
            "model dimension {} does not match objective dimension {}",
            model.dim(),
            objective.dim
        )));
    }
    let mut stats = PassStats::default();
    let w = &mut model.weights;
    let g2 = model.scaling.values_mut();
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;

    for x in shard.iter() {
        if let Some(max) = x.max_index() {
            if max as usize >= objective.dim {
                return Err(Error::Dimension {
                    index: max as usize,
                    dim: objective.dim,
                });
            }
        }
        let margin: f64 = x.features.iter().map(|&(i, v)| w[i as usize] * v).sum();
        let (loss, slope) = objective.loss.loss_and_slope(margin, x.label);
        loss_sum += loss * x.importance;
        weight_sum += x.importance;
        stats.examples += 1;

        if slope != 0.0 {
            let scaled_norm2: f64 = x
                .features
                .iter()
                .map(|&(i, v)| v * v / g2[i as usize].sqrt())
                .sum();
            let (step, fell_back) = invariance_step(
                objective.loss,
                margin,
                x.label,
                scaled_norm2,
                config.eta * x.importance,
                config.invariance,
            );
            if fell_back {
                stats.invariance_fallbacks += 1;
            }
            // Weight update with the pre-update G, then the G accumulation,
            // in that order.
            for &(i, v) in &x.features {
                let j = i as usize;
                w[j] -= step * slope * v / g2[j].sqrt();
            }
            for &(i, v) in &x.features {
                let j = i as usize;
                let g = slope * x.importance * v;
                g2[j] += g * g;
            }
        }
    }

    stats.mean_loss = if weight_sum > 0.0 {
        loss_sum / weight_sum
    } else {
        0.0
    };
    model.passes += 1;
    model.phase = Phase::Online;
    Ok(stats)
}

/// One pass of plain (non-adaptive) SGD with the decaying rate
/// `eta_t = 1 / (L + gamma * sqrt(t))`, `t` counting updates from
/// `t_start + 1`. Used by the overcomplete baseline. Returns the counter
/// after the pass.
pub fn plain_sgd_pass(
    shard: &Shard,
    w: &mut [f64],
    objective: &Objective,
    lr_l: f64,
    lr_gamma: f64,
    t_start: u64,
) -> Result<u64> {
    let mut t = t_start;
    for x in shard.iter() {
        if let Some(max) = x.max_index() {
            if max as usize >= objective.dim {
                return Err(Error::Dimension {
                    index: max as usize,
                    dim: objective.dim,
                });
            }
        }
        t += 1;
        let margin: f64 = x.features.iter().map(|&(i, v)| w[i as usize] * v).sum();
        let (_, slope) = objective.loss.loss_and_slope(margin, x.label);
        if slope == 0.0 {
            continue;
        }
        let denom = lr_l + lr_gamma * (t as f64).sqrt();
        if denom <= 0.0 {
            return Err(Error::Config(format!(
                "learning-rate denominator is not positive at t={t} (L={lr_l}, gamma={lr_gamma})"
            )));
        }
        let eta = 1.0 / denom;
        let scale = eta * slope * x.importance;
        for &(i, v) in &x.features {
            w[i as usize] -= scale * v;
        }
    }
    Ok(t)
}
