use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const NUM_CLASSES: usize = 6;
const INIT_STD: f64 = 0.01;

/// Single fully connected layer `F × C` plus bias, followed by softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    feature_dim: usize,
    classes: usize,
    /// Row-major `[feature][class]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A fresh head with small random weights and zero bias.
pub fn attach_head(feature_dim: usize, classes: usize, seed: u64) -> Result<Head> {
    if feature_dim == 0 || classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "head dimensions must be positive, got {feature_dim}x{classes}"
        )));
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = util::rng(seed, "head");
    let weights = (0..feature_dim * classes)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Ok(Head {
        feature_dim,
        classes,
        weights,
        bias: vec![0.0; classes],
    })
}

impl Head {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Head {
            feature_dim,
            classes,
            weights: vec![0.0; feature_dim * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * self.classes + class]
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.feature_dim, "feature length");
        let mut z = self.bias.clone();
        for (f, x) in features.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let row = &self.weights[f * self.classes..(f + 1) * self.classes];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += x * w;
            }
        }
        z
    }

    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        softmax(&self.logits(features))
    }

    /// Backward pass given dL/dlogits. Accumulates into `grad_w`/`grad_b` and
    /// returns dL/dfeatures.
    pub fn backward(
        &self,
        features: &[f64],
        grad_logits: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let c = self.classes;
        for (gb, g) in grad_b.iter_mut().zip(grad_logits) {
            *gb += g;
        }
        let mut grad_x = vec![0.0; self.feature_dim];
        for (f, x) in features.iter().enumerate() {
            let row = &self.weights[f * c..(f + 1) * c];
            let grow = &mut grad_w[f * c..(f + 1) * c];
            let mut acc = 0.0;
            for k in 0..c {
                grow[k] += x * grad_logits[k];
                acc += row[k] * grad_logits[k];
            }
            grad_x[f] = acc;
        }
        grad_x
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let h = attach_head(1024, 6, 0).unwrap();
        assert_eq!((h.weights.len(), h.bias.len()), (6144, 6));
        let h = attach_head(8, 6, 0).unwrap();
        assert_eq!(h.weights.len(), 48);
        assert!(h.bias.iter().all(|b| *b == 0.0));
        assert!(attach_head(0, 6, 0).is_err());
        assert!(attach_head(4, 0, 0).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let p = Head::zeros(8, 6).forward(&[0.3; 8]);
        for v in p {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn output_is_probability_vector() {
        let h = attach_head(5, 6, 3).unwrap();
        let p = h.forward(&[100.0, -3.0, 0.5, 7.0, 2.0]);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
