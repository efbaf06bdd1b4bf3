//! Loss, gradient and curvature primitives for L2-regularized linear models
//! on sparse examples.
//!
//! All batch quantities here are *local* sums over a shard; the regularizer
//! is added exactly once, globally, by the callers in [`crate::lbfgs`] after
//! gradients have been aggregated across nodes.

use crate::data::{Shard, SparseExample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Log loss on labels in {0, 1} (mapped internally to {-1, +1}).
    Logistic,
    /// Half squared error on real labels.
    Squared,
}

impl LossKind {
    /// Unweighted loss and its derivative with respect to the margin.
    ///
    /// Logistic uses the stable `log1p(exp(-|t|))` branch, so margins up to
    /// 1e4 in magnitude neither overflow nor lose the loss value.
    pub fn loss_and_slope(self, margin: f64, label: f64) -> (f64, f64) {
        match self {
            LossKind::Logistic => {
                let y = if label > 0.5 { 1.0 } else { -1.0 };
                let t = y * margin;
                // loss = log(1 + exp(-t)), slope = -y * sigmoid(-t)
                let loss = if t >= 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                };
                (loss, -y * sigmoid(-t))
            }
            LossKind::Squared => {
                let r = margin - label;
                (0.5 * r * r, r)
            }
        }
    }

    /// Second derivative of the loss with respect to the margin.
    pub fn curvature(self, margin: f64, label: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                let _ = label;
                let p = sigmoid(margin);
                p * (1.0 - p)
            }
            LossKind::Squared => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Squared => "squared",
        }
    }
}

/// Numerically stable `1 / (1 + exp(-z))`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A margin and the score derived from it: the logistic probability for
/// [`LossKind::Logistic`], the margin itself for [`LossKind::Squared`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub margin: f64,
    pub probability: f64,
}

/// The optimization target: a loss, an L2 coefficient and the model
/// dimension (`2^bits` of the hash space).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub lambda: f64,
    pub dim: usize,
}

impl Objective {
    pub fn new(loss: LossKind, lambda: f64, dim: usize) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Argument(format!(
                "l2 coefficient must be finite and >= 0, got {lambda}"
            )));
        }
        if dim == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        Ok(Objective { loss, lambda, dim })
    }

    fn check_example(&self, x: &SparseExample) -> Result<()> {
        if let Some(max) = x.max_index() {
            if max as usize >= self.dim {
                return Err(Error::Dimension {
                    index: max as usize,
                    dim: self.dim,
                });
            }
        }
        Ok(())
    }

    /// Sparse dot product; indices are checked against the dimension.
    pub fn margin(&self, w: &[f64], x: &SparseExample) -> Result<f64> {
        self.check_example(x)?;
        Ok(x.features.iter().map(|&(i, v)| w[i as usize] * v).sum())
    }

    pub fn predict(&self, w: &[f64], x: &SparseExample) -> Result<Prediction> {
        let margin = self.margin(w, x)?;
        let probability = match self.loss {
            LossKind::Logistic => sigmoid(margin),
            LossKind::Squared => margin,
        };
        Ok(Prediction {
            margin,
            probability,
        })
    }

    /// Importance-weighted loss of one example and its gradient over the
    /// example's support.
    pub fn example_gradient(
        &self,
        w: &[f64],
        x: &SparseExample,
    ) -> Result<(f64, Vec<(u32, f64)>)> {
        let margin = self.margin(w, x)?;
        let (loss, slope) = self.loss.loss_and_slope(margin, x.label);
        let g = x
            .features
            .iter()
            .map(|&(i, v)| (i, slope * v * x.importance))
            .collect();
        Ok((loss * x.importance, g))
    }

    /// Local loss sum over a shard, without the regularizer.
    pub fn batch_objective(&self, w: &[f64], shard: &Shard) -> Result<f64> {
        let mut total = 0.0;
        for x in shard.iter() {
            let margin = self.margin(w, x)?;
            let (loss, _) = self.loss.loss_and_slope(margin, x.label);
            total += loss * x.importance;
        }
        Ok(total)
    }

    /// Local loss sum and dense gradient sum over a shard, without the
    /// regularizer.
    pub fn batch_objective_and_gradient(
        &self,
        w: &[f64],
        shard: &Shard,
    ) -> Result<(f64, Vec<f64>)> {
        let (f, grad, _) = self.gradient_over(w, shard.iter())?;
        Ok((f, grad))
    }

    /// Loss sum, dense gradient sum and example count over any example
    /// stream (used for mini-batch slices as well as whole shards).
    pub fn gradient_over<'a>(
        &self,
        w: &[f64],
        examples: impl Iterator<Item = &'a SparseExample>,
    ) -> Result<(f64, Vec<f64>, u64)> {
        let mut total = 0.0;
        let mut grad = vec![0.0; self.dim];
        let mut count = 0u64;
        for x in examples {
            let margin = self.margin(w, x)?;
            let (loss, slope) = self.loss.loss_and_slope(margin, x.label);
            total += loss * x.importance;
            count += 1;
            let scale = slope * x.importance;
            for &(i, v) in &x.features {
                grad[i as usize] += scale * v;
            }
        }
        Ok((total, grad, count))
    }

    /// Local Hessian diagonal sum over a shard, without the regularizer:
    /// `sum_i x_ij^2 * curvature_i * importance_i` per coordinate `j`.
    pub fn hessian_diagonal(&self, w: &[f64], shard: &Shard) -> Result<Vec<f64>> {
        let mut diag = vec![0.0; self.dim];
        for x in shard.iter() {
            let margin = self.margin(w, x)?;
            let c = self.loss.curvature(margin, x.label) * x.importance;
            for &(i, v) in &x.features {
                diag[i as usize] += v * v * c;
            }
        }
        Ok(diag)
    }

    /// `0.5 * lambda * ||w||^2`.
    pub fn regularizer(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Shard;

    fn ex(label: f64, features: Vec<(u32, f64)>) -> SparseExample {
        SparseExample {
            label,
            importance: 1.0,
            features,
        }
    }

    #[test]
    fn zero_weights_predict_half() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 4).unwrap();
        let w = vec![0.0; 4];
        let p = obj.predict(&w, &ex(1.0, vec![(1, 3.0), (2, -1.0)])).unwrap();
        assert_eq!(p.margin, 0.0);
        assert_eq!(p.probability, 0.5);
    }

    #[test]
    fn known_margin_probability() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 2).unwrap();
        let w = vec![2.0, 0.0];
        let p = obj.predict(&w, &ex(1.0, vec![(0, 1.0)])).unwrap();
        assert_eq!(p.margin, 2.0);
        assert!((p.probability - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn dimension_error_on_out_of_range_index() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 2).unwrap();
        let w = vec![0.0; 2];
        let err = obj.margin(&w, &ex(1.0, vec![(5, 1.0)])).unwrap_err();
        assert!(matches!(err, Error::Dimension { index: 5, dim: 2 }));
    }

    #[test]
    fn margin_matches_dense_dot_oracle() {
        let obj = Objective::new(LossKind::Squared, 0.0, 32).unwrap();
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let w: Vec<f64> = (0..32).map(|_| next()).collect();
            let mut feats: Vec<(u32, f64)> = Vec::new();
            for i in 0..32u32 {
                if next() > 0.0 {
                    feats.push((i, next()));
                }
            }
            let x = ex(0.0, feats.clone());
            let dense: f64 = {
                let mut xd = vec![0.0; 32];
                for (i, v) in feats {
                    xd[i as usize] += v;
                }
                w.iter().zip(&xd).map(|(a, b)| a * b).sum()
            };
            assert!((obj.margin(&w, &x).unwrap() - dense).abs() <= 1e-12 * (1.0 + dense.abs()));
        }
    }

    #[test]
    fn gradient_at_zero_is_half_signed() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 2).unwrap();
        let w = vec![0.0; 2];
        let (loss, g) = obj.example_gradient(&w, &ex(1.0, vec![(0, 1.0)])).unwrap();
        assert_eq!(g, vec![(0, -0.5)]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let (_, g0) = obj.example_gradient(&w, &ex(0.0, vec![(0, 1.0)])).unwrap();
        assert_eq!(g0, vec![(0, 0.5)]);
    }

    #[test]
    fn logistic_is_stable_for_huge_margins() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 1).unwrap();
        for &m in &[1e4, -1e4] {
            let w = vec![m];
            let (loss, g) = obj.example_gradient(&w, &ex(1.0, vec![(0, 1.0)])).unwrap();
            assert!(loss.is_finite());
            assert!(g[0].1.is_finite());
        }
        // Deep negative side: loss grows linearly, slope saturates at -1.
        let (loss, _) = LossKind::Logistic.loss_and_slope(-1e4, 1.0);
        assert!((loss - 1e4).abs() < 1e-9);
    }

    #[test]
    fn hessian_diagonal_examples() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 2).unwrap();
        let w = vec![0.0; 2];
        let shard = Shard::from_examples(vec![ex(1.0, vec![(0, 2.0)])]);
        let diag = obj.hessian_diagonal(&w, &shard).unwrap();
        assert_eq!(diag[0], 1.0); // 4 * 0.25
        assert_eq!(diag[1], 0.0);

        let sq = Objective::new(LossKind::Squared, 0.0, 2).unwrap();
        let w = vec![3.0, -7.0];
        let diag = sq.hessian_diagonal(&w, &shard).unwrap();
        assert_eq!(diag[0], 4.0); // sum x^2 regardless of w
    }

    #[test]
    fn empty_shard_gives_zero_sums() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 4).unwrap();
        let shard = Shard::from_examples(vec![]);
        let (f, g) = obj
            .batch_objective_and_gradient(&vec![0.0; 4], &shard)
            .unwrap();
        assert_eq!(f, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_example_batch_equals_example_gradient() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 4).unwrap();
        let x = SparseExample {
            label: 1.0,
            importance: 2.0,
            features: vec![(1, 0.5), (3, -2.0)],
        };
        let w = vec![0.1, -0.2, 0.0, 0.4];
        let (fx, gx) = obj.example_gradient(&w, &x).unwrap();
        let shard = Shard::from_examples(vec![x]);
        let (fb, gb) = obj.batch_objective_and_gradient(&w, &shard).unwrap();
        assert_eq!(fx, fb);
        for (i, v) in gx {
            assert_eq!(gb[i as usize], v);
        }
    }

    // Central finite differences as the independent oracle for gradients and
    // the Hessian diagonal.
    fn fd_gradient(obj: &Objective, w: &[f64], x: &SparseExample, j: usize, h: f64) -> f64 {
        let mut wp = w.to_vec();
        let mut wm = w.to_vec();
        wp[j] += h;
        wm[j] -= h;
        let margin_p = x
            .features
            .iter()
            .map(|&(i, v)| wp[i as usize] * v)
            .sum::<f64>();
        let margin_m = x
            .features
            .iter()
            .map(|&(i, v)| wm[i as usize] * v)
            .sum::<f64>();
        let lp = obj.loss.loss_and_slope(margin_p, x.label).0 * x.importance;
        let lm = obj.loss.loss_and_slope(margin_m, x.label).0 * x.importance;
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 8).unwrap();
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for trial in 0..100 {
            let w: Vec<f64> = (0..8).map(|_| next()).collect();
            let mut features: Vec<(u32, f64)> = Vec::new();
            for i in 0..8u32 {
                if next() > -0.2 {
                    features.push((i, next() * 2.0));
                }
            }
            let x = SparseExample {
                label: if trial % 2 == 0 { 1.0 } else { 0.0 },
                importance: 1.0 + next().abs(),
                features,
            };
            if x.features.is_empty() {
                continue;
            }
            let (_, g) = obj.example_gradient(&w, &x).unwrap();
            for (i, gv) in g {
                let fd = fd_gradient(&obj, &w, &x, i as usize, 1e-5);
                let denom = gv.abs().max(1e-3);
                assert!(
                    (gv - fd).abs() / denom <= 1e-6,
                    "trial {trial}: coord {i}: grad {gv} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn hessian_diagonal_matches_fd_of_gradient() {
        let obj = Objective::new(LossKind::Logistic, 0.0, 6).unwrap();
        let mut state = 1234u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..30 {
            let w: Vec<f64> = (0..6).map(|_| next()).collect();
            let xs: Vec<SparseExample> = (0..5)
                .map(|k| SparseExample {
                    label: f64::from(k % 2),
                    importance: 1.0,
                    features: (0..6u32).map(|i| (i, next())).collect(),
                })
                .collect();
            let shard = Shard::from_examples(xs.clone());
            let diag = obj.hessian_diagonal(&w, &shard).unwrap();
            let h = 1e-5;
            for j in 0..6 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let gp: f64 = xs
                    .iter()
                    .map(|x| {
                        let (_, g) = obj.example_gradient(&wp, x).unwrap();
                        g.iter().find(|&&(i, _)| i as usize == j).map_or(0.0, |&(_, v)| v)
                    })
                    .sum();
                let gm: f64 = xs
                    .iter()
                    .map(|x| {
                        let (_, g) = obj.example_gradient(&wm, x).unwrap();
                        g.iter().find(|&&(i, _)| i as usize == j).map_or(0.0, |&(_, v)| v)
                    })
                    .sum();
                let fd = (gp - gm) / (2.0 * h);
                let denom = diag[j].abs().max(1e-3);
                assert!(
                    (diag[j] - fd).abs() / denom <= 1e-6,
                    "coord {j}: hess {} vs fd {fd}",
                    diag[j]
                );
            }
        }
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let obj = Objective::new(LossKind::Logistic, 0.3, 5).unwrap();
        let shard = Shard::from_examples(vec![
            ex(1.0, vec![(0, 1.0), (2, -1.0)]),
            ex(0.0, vec![(1, 2.0), (4, 0.5)]),
            ex(1.0, vec![(3, -0.7)]),
        ]);
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let f = |w: &Vec<f64>| obj.batch_objective(w, &shard).unwrap() + obj.regularizer(w);
        for _ in 0..200 {
            let u: Vec<f64> = (0..5).map(|_| next() * 4.0 - 2.0).collect();
            let v: Vec<f64> = (0..5).map(|_| next() * 4.0 - 2.0).collect();
            let a = next();
            let mix: Vec<f64> = u
                .iter()
                .zip(&v)
                .map(|(x, y)| a * x + (1.0 - a) * y)
                .collect();
            assert!(f(&mix) <= a * f(&u) + (1.0 - a) * f(&v) + 1e-12);
        }
    }
}
