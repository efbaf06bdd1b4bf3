//! Ranking metrics (auROC, auPRC), negative log-likelihood, and the
//! per-node communication cost model used to compare learning strategies.

use crate::{Error, Result};

/// A scored test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub label: bool,
}

fn class_counts(set: &[Scored]) -> (u64, u64) {
    let pos = set.iter().filter(|s| s.label).count() as u64;
    (pos, set.len() as u64 - pos)
}

/// Sort scores descending and walk tie groups, yielding cumulative
/// (true positives, false positives) after each distinct threshold.
fn threshold_sweep(set: &[Scored]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<Scored> = set.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Area under the ROC curve, trapezoidal, ties handled as a single
/// threshold step. Equals `P(score+ > score-) + 0.5 P(tie)`.
pub fn auroc(set: &[Scored]) -> Result<f64> {
    let (pos, neg) = class_counts(set);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "auROC needs both classes (got {pos} positives, {neg} negatives)"
        )));
    }
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for (_, tp, fp) in threshold_sweep(set) {
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 * 0.5;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Area under the precision/recall step curve by descending-score sweep,
/// summing `precision * delta_recall` with no interpolation.
pub fn auprc(set: &[Scored]) -> Result<f64> {
    let (pos, _) = class_counts(set);
    if pos == 0 {
        return Err(Error::Metric("auPRC needs at least one positive".into()));
    }
    let mut area = 0.0;
    let mut prev_tp = 0u64;
    for (_, tp, fp) in threshold_sweep(set) {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            let delta_recall = (tp - prev_tp) as f64 / pos as f64;
            area += precision * delta_recall;
        }
        prev_tp = tp;
    }
    Ok(area)
}

const PROB_CLAMP: f64 = 1e-15;

/// Mean negative log-likelihood of probabilistic predictions; probabilities
/// are clamped to `[1e-15, 1 - 1e-15]` so overconfident models stay finite.
pub fn nll(predictions: &[(f64, bool)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Metric("NLL of an empty set".into()));
    }
    let mut total = 0.0;
    for &(p, label) in predictions {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if label { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / predictions.len() as f64)
}

/// Algorithm family for the communication cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFamily {
    /// Online warmstart + batch optimization: `d * T`.
    Hybrid,
    /// Repeated online passes with averaging: `d * T`.
    OnlineAveraging,
    /// Independent SGD over a replicated partition, one final average:
    /// `n * s + d` (the first term is the data movement that builds the
    /// overcomplete partition).
    Overcomplete,
    /// Distributed mini-batch SGD, dense updates: `d * T * n / b`.
    MinibatchDense,
    /// Distributed mini-batch SGD, sparse updates: `n * s * T`.
    MinibatchSparse,
    /// Online learning over a feature-sharded layout: `n * s / m + n * T`.
    ParallelOnlineFeatureSharded,
}

impl CostFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "hybrid" => Ok(CostFamily::Hybrid),
            "online" => Ok(CostFamily::OnlineAveraging),
            "overcomplete" => Ok(CostFamily::Overcomplete),
            "minibatch-dense" | "minibatch" => Ok(CostFamily::MinibatchDense),
            "minibatch-sparse" => Ok(CostFamily::MinibatchSparse),
            "parallel-online" => Ok(CostFamily::ParallelOnlineFeatureSharded),
            _ => Err(Error::Argument(format!(
                "unknown algorithm family {name:?} (expected hybrid, online, overcomplete, \
                 minibatch-dense, minibatch-sparse, parallel-online)"
            ))),
        }
    }
}

/// Problem sizes the cost model needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    /// Node count `m`.
    pub nodes: f64,
    /// Total examples `n`.
    pub examples: f64,
    /// Nonzero features per example `s`.
    pub nnz: f64,
    /// Parameter dimension `d`.
    pub dim: f64,
    /// Passes over the data `T`.
    pub passes: f64,
    /// Global mini-batch size `b` (mini-batch families only).
    pub minibatch: Option<f64>,
    /// Replication factor (overcomplete only).
    pub replication: Option<f64>,
}

/// A cost in transmitted numbers per node, plus the formula it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub formula: String,
    pub value: f64,
}

/// Instantiate the per-node communication cost of an algorithm family.
///
/// Unit constants are dropped: the value counts transmitted numbers, so
/// ratios between families are meaningful, absolutes only up to a small
/// constant.
pub fn comm_cost(family: CostFamily, inputs: &CostInputs) -> Result<CostEstimate> {
    let check_pos = |name: &str, v: f64| -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Argument(format!("{name} must be positive, got {v}")))
        }
    };
    let m = check_pos("m", inputs.nodes)?;
    let n = check_pos("n", inputs.examples)?;
    let s = check_pos("s", inputs.nnz)?;
    let d = check_pos("d", inputs.dim)?;
    let t = check_pos("T", inputs.passes)?;

    let est = match family {
        CostFamily::Hybrid => CostEstimate {
            formula: format!("d*T = {d}*{t}"),
            value: d * t,
        },
        CostFamily::OnlineAveraging => CostEstimate {
            formula: format!("d*T = {d}*{t}"),
            value: d * t,
        },
        CostFamily::Overcomplete => {
            let rep = inputs
                .replication
                .ok_or_else(|| Error::Argument("overcomplete needs a replication factor".into()))?;
            check_pos("replication", rep)?;
            if rep > m {
                return Err(Error::Argument(format!(
                    "replication {rep} exceeds node count {m}"
                )));
            }
            CostEstimate {
                formula: format!("n*s + d = {n}*{s} + {d}"),
                value: n * s + d,
            }
        }
        CostFamily::MinibatchDense => {
            let b = inputs
                .minibatch
                .ok_or_else(|| Error::Argument("mini-batch families need a batch size".into()))?;
            check_pos("b", b)?;
            if b > n {
                return Err(Error::Argument(format!("batch size {b} exceeds n={n}")));
            }
            CostEstimate {
                formula: format!("d*T*n/b = {d}*{t}*{n}/{b}"),
                value: d * t * n / b,
            }
        }
        CostFamily::MinibatchSparse => {
            let b = inputs
                .minibatch
                .ok_or_else(|| Error::Argument("mini-batch families need a batch size".into()))?;
            check_pos("b", b)?;
            if b > n {
                return Err(Error::Argument(format!("batch size {b} exceeds n={n}")));
            }
            CostEstimate {
                formula: format!("n*s*T = {n}*{s}*{t}"),
                value: n * s * t,
            }
        }
        CostFamily::ParallelOnlineFeatureSharded => CostEstimate {
            formula: format!("n*s/m + n*T = {n}*{s}/{m} + {n}*{t}"),
            value: n * s / m + n * t,
        },
    };
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(pairs: &[(f64, bool)]) -> Vec<Scored> {
        pairs
            .iter()
            .map(|&(score, label)| Scored { score, label })
            .collect()
    }

    #[test]
    fn perfect_and_reversed_ranking() {
        let set = scored(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        assert_eq!(auroc(&set).unwrap(), 1.0);
        assert_eq!(auprc(&set).unwrap(), 1.0);
        let rev = scored(&[(0.9, false), (0.8, false), (0.2, true), (0.1, true)]);
        assert_eq!(auroc(&rev).unwrap(), 0.0);
    }

    #[test]
    fn single_positive_ranked_last() {
        let n = 10;
        let mut pairs: Vec<(f64, bool)> = (1..n).map(|k| (1.0 + k as f64, false)).collect();
        pairs.push((0.5, true));
        let set = scored(&pairs);
        assert!((auprc(&set).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn degenerate_classes_are_errors() {
        assert!(auroc(&scored(&[(0.5, true)])).is_err());
        assert!(auprc(&scored(&[(0.5, false)])).is_err());
        assert!(nll(&[]).is_err());
    }

    #[test]
    fn ties_get_half_credit() {
        // One positive and one negative tied: P(tie)/2 = 0.5.
        let set = scored(&[(0.5, true), (0.5, false)]);
        assert_eq!(auroc(&set).unwrap(), 0.5);
    }

    fn splitmix(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    /// O(n^2) pair-counting oracle for auROC.
    fn auroc_pairs(set: &[Scored]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for p in set.iter().filter(|s| s.label) {
            for q in set.iter().filter(|s| !s.label) {
                total += 1.0;
                if p.score > q.score {
                    wins += 1.0;
                } else if p.score == q.score {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    /// Exhaustive-threshold oracle for auPRC: recompute precision/recall
    /// from scratch at every distinct score.
    fn auprc_exhaustive(set: &[Scored]) -> f64 {
        let pos = set.iter().filter(|s| s.label).count() as f64;
        let mut thresholds: Vec<f64> = set.iter().map(|s| s.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let tp = set.iter().filter(|s| s.label && s.score >= t).count() as f64;
            let fp = set.iter().filter(|s| !s.label && s.score >= t).count() as f64;
            let recall = tp / pos;
            if recall > prev_recall {
                area += tp / (tp + fp) * (recall - prev_recall);
            }
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn random_sets_match_oracles() {
        let mut seed = 2024u64;
        for round in 0..60 {
            let n = 20 + (splitmix(&mut seed) * 180.0) as usize;
            let mut set = Vec::with_capacity(n);
            let mut has = [false, false];
            for _ in 0..n {
                // Quantized scores so ties actually happen.
                let score = (splitmix(&mut seed) * 20.0).floor() / 20.0;
                let label = splitmix(&mut seed) > 0.6;
                has[usize::from(label)] = true;
                set.push(Scored { score, label });
            }
            if !(has[0] && has[1]) {
                continue;
            }
            let fast = auroc(&set).unwrap();
            let slow = auroc_pairs(&set);
            assert!((fast - slow).abs() <= 1e-12, "round {round}: {fast} vs {slow}");
            let fast = auprc(&set).unwrap();
            let slow = auprc_exhaustive(&set);
            assert!((fast - slow).abs() <= 1e-12, "round {round}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms() {
        let mut seed = 5u64;
        let set: Vec<Scored> = (0..100)
            .map(|_| Scored {
                score: splitmix(&mut seed) * 4.0 - 2.0,
                label: splitmix(&mut seed) > 0.5,
            })
            .collect();
        let base = auroc(&set).unwrap();
        for transform in [|x: f64| 3.0 * x + 7.0, |x: f64| x.exp(), |x: f64| x.powi(3)] {
            let mapped: Vec<Scored> = set
                .iter()
                .map(|s| Scored {
                    score: transform(s.score),
                    label: s.label,
                })
                .collect();
            assert!((auroc(&mapped).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn nll_of_coin_flip_predictions_is_ln2() {
        // Size 2 keeps the mean exact in floating point.
        let preds = [(0.5, true), (0.5, false)];
        assert_eq!(nll(&preds).unwrap(), std::f64::consts::LN_2);
        let many: Vec<(f64, bool)> = (0..100).map(|k| (0.5, k % 3 == 0)).collect();
        assert!((nll(&many).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // Perfect (clamped) predictions are ~0.
        let perfect = [(1.0, true), (0.0, false)];
        assert!(nll(&perfect).unwrap() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_sum() {
        let mut seed = 9u64;
        let preds: Vec<(f64, bool)> = (0..50)
            .map(|_| (splitmix(&mut seed), splitmix(&mut seed) > 0.5))
            .collect();
        let direct: f64 = preds
            .iter()
            .map(|&(p, y)| {
                let p = p.clamp(1e-15, 1.0 - 1e-15);
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / preds.len() as f64;
        assert!((nll(&preds).unwrap() - direct).abs() <= 1e-15);
    }

    #[test]
    fn cost_model_examples() {
        let base = CostInputs {
            nodes: 10.0,
            examples: 1e6,
            nnz: 100.0,
            dim: 1000.0,
            passes: 15.0,
            minibatch: None,
            replication: None,
        };
        assert_eq!(comm_cost(CostFamily::Hybrid, &base).unwrap().value, 15000.0);

        let over = CostInputs {
            replication: Some(4.0),
            ..base
        };
        assert_eq!(
            comm_cost(CostFamily::Overcomplete, &over).unwrap().value,
            1e8 + 1e3
        );

        // b = sqrt(n) reduces the dense mini-batch cost to d*T*sqrt(n).
        let mini = CostInputs {
            minibatch: Some(1000.0),
            ..base
        };
        assert_eq!(
            comm_cost(CostFamily::MinibatchDense, &mini).unwrap().value,
            1000.0 * 15.0 * 1000.0
        );

        // Missing parameters are argument errors.
        assert!(comm_cost(CostFamily::Overcomplete, &base).is_err());
        assert!(comm_cost(CostFamily::MinibatchDense, &base).is_err());
    }
}
