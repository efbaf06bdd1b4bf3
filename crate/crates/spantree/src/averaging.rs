//! Confidence-weighted averaging of per-node weights and scaling matrices.
//!
//! The average over `m` nodes weights each coordinate by how much squared
//! gradient the node accumulated there:
//!
//! ```text
//! w_bar = (sum_k G^k)^-1 (sum_k G^k w^k)
//! G_bar = (sum_k G^k)^-1 (sum_k (G^k)^2)
//! ```
//!
//! Each average costs exactly two AllReduce calls (the matrices are
//! diagonal); the division happens locally afterwards, identically on every
//! node. Since every `G` entry is at least 1 the denominators never vanish,
//! and coordinates no node ever touched come out as exactly the mean of
//! zeros.

use crate::comm::{Collective, ReduceOp};
use crate::model::ScalingDiag;
use crate::{Error, Result};

/// Per-coordinate division kernel shared by both averages.
pub fn weighted_combine(numerator: &[f64], denominator: &[f64]) -> Vec<f64> {
    numerator
        .iter()
        .zip(denominator)
        .map(|(n, d)| n / d)
        .collect()
}

fn check_dims(w_len: usize, g_len: usize) -> Result<()> {
    if w_len != g_len {
        return Err(Error::Argument(format!(
            "weights dimension {w_len} does not match scaling dimension {g_len}"
        )));
    }
    Ok(())
}

/// Scaling-weighted average of the per-node weight vectors.
///
/// Every node calls this with its own `(w, G)` and all nodes return the
/// identical averaged vector. With one node this is the identity.
pub fn weighted_average_w<C: Collective>(
    w: &[f64],
    scaling: &ScalingDiag,
    coll: &mut C,
) -> Result<Vec<f64>> {
    check_dims(w.len(), scaling.len())?;
    if coll.nodes() == 1 {
        return Ok(w.to_vec());
    }
    let mut g_sum: Vec<f64> = scaling.values().to_vec();
    coll.allreduce(&mut g_sum, ReduceOp::Sum)?;
    let mut gw_sum: Vec<f64> = scaling
        .values()
        .iter()
        .zip(w)
        .map(|(g, x)| g * x)
        .collect();
    coll.allreduce(&mut gw_sum, ReduceOp::Sum)?;
    Ok(weighted_combine(&gw_sum, &g_sum))
}

/// The matching average of the scaling matrices:
/// `sum (G^k)^2 / sum G^k` per coordinate.
pub fn weighted_average_g<C: Collective>(
    scaling: &ScalingDiag,
    coll: &mut C,
) -> Result<ScalingDiag> {
    if coll.nodes() == 1 {
        return Ok(scaling.clone());
    }
    let mut g_sum: Vec<f64> = scaling.values().to_vec();
    coll.allreduce(&mut g_sum, ReduceOp::Sum)?;
    let mut g2_sum: Vec<f64> = scaling.values().iter().map(|g| g * g).collect();
    coll.allreduce(&mut g2_sum, ReduceOp::Sum)?;
    ScalingDiag::from_values(weighted_combine(&g2_sum, &g_sum))
}
