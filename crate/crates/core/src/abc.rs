//! Auxiliary balanced classifier: one extra linear layer on the backbone
//! features, trained on a Bernoulli-masked subset where each sample is kept
//! with probability `N_min / N_class`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Dense;
use crate::numkit::{argmax_unchecked, cross_entropy, RealMatrix, SeededRng};

/// `beta_c = min(counts) / counts[c]`.
pub fn abc_mask_prob(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(invalid("no class counts"));
    }
    if class_counts.contains(&0) {
        return Err(invalid("every class needs at least one labeled sample"));
    }
    let min = *class_counts.iter().min().expect("non-empty") as f64;
    Ok(class_counts.iter().map(|&n| min / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcState {
    pub layer: Dense,
    pub beta: Vec<f64>,
    pub loss_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcLoss {
    pub loss: f64,
    pub kept: usize,
    pub layer_grad: Dense,
    /// Gradient of `loss` with respect to the backbone features.
    pub feature_grad: RealMatrix,
}

impl AbcState {
    pub fn new(
        feature_dim: usize,
        class_counts: &[usize],
        loss_weight: f64,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let beta = abc_mask_prob(class_counts)?;
        Ok(Self {
            layer: Dense::init_uniform(feature_dim, beta.len(), init_scale, rng),
            beta,
            loss_weight,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.beta.len()
    }

    /// Draws the keep-mask: sample `b` survives with probability `beta[targets[b]]`.
    pub fn draw_mask(&self, targets: &[usize], rng: &mut SeededRng) -> Vec<bool> {
        targets.iter().map(|&c| rng.bernoulli(self.beta[c])).collect()
    }

    /// Masked cross-entropy averaged over the kept samples (0 when none kept).
    pub fn loss(&self, features: &RealMatrix, targets: &[usize], rng: &mut SeededRng) -> Result<AbcLoss> {
        let mask = self.draw_mask(targets, rng);
        self.loss_with_mask(features, targets, &mask)
    }

    pub fn loss_with_mask(&self, features: &RealMatrix, targets: &[usize], mask: &[bool]) -> Result<AbcLoss> {
        let n = features.rows();
        if targets.len() != n || mask.len() != n {
            return Err(invalid("ABC targets, mask and features differ in length"));
        }
        if features.cols() != self.layer.in_dim {
            return Err(invalid("ABC feature width mismatch"));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        let mut layer_grad = Dense::zeros(self.layer.in_dim, self.layer.out_dim);
        if kept == 0 {
            return Ok(AbcLoss {
                loss: 0.0,
                kept,
                layer_grad,
                feature_grad: RealMatrix::zeros(n, features.cols()),
            });
        }
        let probs = self.layer.forward(features).softmax_rows();
        let inv = 1.0 / kept as f64;
        let mut loss = 0.0;
        let mut dz = RealMatrix::zeros(n, self.num_classes());
        for b in 0..n {
            if !mask[b] {
                continue;
            }
            let q = probs.row(b);
            loss += cross_entropy(targets[b], q)?;
            let row = dz.row_mut(b);
            for (c, (d, p)) in row.iter_mut().zip(q).enumerate() {
                *d = (p - if c == targets[b] { 1.0 } else { 0.0 }) * inv;
            }
        }
        let feature_grad = self.layer.backward(features, &dz, &mut layer_grad);
        Ok(AbcLoss {
            loss: loss * inv,
            kept,
            layer_grad,
            feature_grad,
        })
    }

    /// Argmax of the auxiliary logits (lowest index on ties).
    pub fn predict(&self, features: &RealMatrix) -> Vec<usize> {
        self.layer
            .forward(features)
            .iter_rows()
            .map(argmax_unchecked)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_prob_examples() {
        assert_eq!(abc_mask_prob(&[1000, 10]).unwrap(), vec![0.01, 1.0]);
        assert_eq!(abc_mask_prob(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let b = abc_mask_prob(&[1000, 316, 100, 32, 10]).unwrap();
        let want = [0.01, 10.0 / 316.0, 0.1, 0.3125, 1.0];
        for (x, y) in b.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(abc_mask_prob(&[5, 0]).is_err());
    }

    #[test]
    fn beta_is_scale_invariant() {
        let a = abc_mask_prob(&[40, 12, 3]).unwrap();
        let b = abc_mask_prob(&[400, 120, 30]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn state(counts: &[usize]) -> AbcState {
        AbcState::new(3, counts, 1.0, 1.0, &mut SeededRng::new(2)).unwrap()
    }

    fn feats() -> RealMatrix {
        RealMatrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75], [0.0, 1.0, 1.0]], 3).unwrap()
    }

    #[test]
    fn nothing_kept_gives_zero() {
        let s = state(&[4, 4]);
        let l = s.loss_with_mask(&feats(), &[0, 1, 0], &[false; 3]).unwrap();
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.kept, 0);
        assert!(l.feature_grad.as_slice().iter().all(|v| *v == 0.0));
        assert!(l.layer_grad.weights.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_beta_is_plain_cross_entropy() {
        let s = state(&[4, 4]);
        let targets = [0, 1, 1];
        let l = s.loss(&feats(), &targets, &mut SeededRng::new(9)).unwrap();
        assert_eq!(l.kept, 3);
        let probs = s.layer.forward(&feats()).softmax_rows();
        let plain: f64 = targets
            .iter()
            .enumerate()
            .map(|(b, &c)| cross_entropy(c, probs.row(b)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((l.loss - plain).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let s = AbcState {
            layer: Dense::zeros(3, 2),
            beta: vec![1.0, 1.0],
            loss_weight: 1.0,
        };
        assert_eq!(s.predict(&feats()), vec![0, 0, 0]);
        let mut s2 = s.clone();
        s2.layer = Dense::zeros(1, 2);
        s2.layer.bias = vec![0.1, 0.9];
        assert_eq!(s2.predict(&RealMatrix::zeros(1, 1)), vec![1]);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let s = state(&[2, 2]);
        let x = feats();
        let targets = [1, 0, 1];
        let mask = [true, false, true];
        let l = s.loss_with_mask(&x, &targets, &mask).unwrap();
        let h = 1e-6;
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (s.loss_with_mask(&xp, &targets, &mask).unwrap().loss
                - s.loss_with_mask(&xm, &targets, &mask).unwrap().loss)
                / (2.0 * h);
            assert!((fd - l.feature_grad.as_slice()[i]).abs() < 1e-7);
        }
    }
}
