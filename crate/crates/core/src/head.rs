//! Multinomial logistic-regression head trained on device.
//!
//! The model scores precomputed feature vectors: logits `z = xW + b` with
//! `W: [n_features, n_classes]` row-major and `b: [n_classes]`, class
//! probabilities by softmax, loss as mean cross-entropy. Gradients are the
//! closed forms `gW = Xᵀ(P − Y)/n` and `gb = colmean(P − Y)`, verified
//! against finite differences in the tests below.
//!
//! All reductions run in fixed index order, so identical inputs produce
//! bit-identical floats on every platform.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::CodecError;
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("expected 2 tensors (weights, bias), got {0}")]
    TensorCount(usize),
    #[error("bad tensor shapes: weights {weights:?}, bias {bias:?}")]
    Shape { weights: Vec<u32>, bias: Vec<u32> },
}

/// Softmax classifier head. Weights are row-major `[n_features, n_classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    n_features: usize,
    n_classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl HeadModel {
    pub fn zeros(n_features: usize, n_classes: usize) -> Self {
        assert!(n_features > 0 && n_classes > 0, "degenerate model shape");
        Self {
            n_features,
            n_classes,
            weights: vec![0.0; n_features * n_classes],
            bias: vec![0.0; n_classes],
        }
    }

    /// Weights drawn uniformly from (-0.05, 0.05) in row-major order from a
    /// seeded generator; bias starts at zero. Same seed, same model.
    pub fn random_init(n_features: usize, n_classes: usize, seed: u64) -> Self {
        let mut model = Self::zeros(n_features, n_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-0.05, 0.05);
        for w in &mut model.weights {
            *w = dist.sample(&mut rng);
        }
        model
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Export as two tensors, weights then bias. Fails only if training has
    /// driven a value non-finite, which the wire format refuses to carry.
    pub fn to_parameters(&self) -> Result<Parameters, CodecError> {
        let w = Tensor::new(
            vec![self.n_features as u32, self.n_classes as u32],
            self.weights.clone(),
        )?;
        let b = Tensor::new(vec![self.n_classes as u32], self.bias.clone())?;
        Ok(Parameters {
            tensors: vec![w, b],
        })
    }

    /// Inverse of [`to_parameters`](Self::to_parameters); shape is read from
    /// the weight tensor and cross-checked against the bias.
    pub fn from_parameters(params: &Parameters) -> Result<Self, ModelError> {
        if params.tensors.len() != 2 {
            return Err(ModelError::TensorCount(params.tensors.len()));
        }
        let (w, b) = (&params.tensors[0], &params.tensors[1]);
        let shape_err = || ModelError::Shape {
            weights: w.shape().to_vec(),
            bias: b.shape().to_vec(),
        };
        let (&[d, k], &[bk]) = (w.shape(), b.shape()) else {
            return Err(shape_err());
        };
        if d == 0 || k == 0 || bk != k {
            return Err(shape_err());
        }
        Ok(Self {
            n_features: d as usize,
            n_classes: k as usize,
            weights: w.data().to_vec(),
            bias: b.data().to_vec(),
        })
    }

    /// Per-row `z − max(z)` and `ln Σ exp(z − max(z))`; probabilities and
    /// log-probabilities both derive from these without ever taking `ln 0`.
    fn shifted_logits(&self, x_row: &[f64]) -> (Vec<f64>, f64) {
        let k = self.n_classes;
        let mut z = self.bias.clone();
        for (i, &xi) in x_row.iter().enumerate() {
            let w_row = &self.weights[i * k..(i + 1) * k];
            for (zj, &wj) in z.iter_mut().zip(w_row) {
                *zj += xi * wj;
            }
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for zj in &mut z {
            *zj -= max;
        }
        let lse = z.iter().map(|zj| zj.exp()).sum::<f64>().ln();
        (z, lse)
    }

    /// Mean cross-entropy and its gradients over the rows listed in `rows`.
    /// `features` is `[n, n_features]` row-major; `labels[i] < n_classes`.
    pub fn loss_and_gradients(
        &self,
        features: &[f64],
        labels: &[usize],
        rows: &[usize],
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let (d, k) = (self.n_features, self.n_classes);
        assert!(!rows.is_empty(), "gradient of an empty batch");
        let mut loss = 0.0;
        let mut grad_w = vec![0.0; d * k];
        let mut grad_b = vec![0.0; k];
        for &row in rows {
            let x = &features[row * d..(row + 1) * d];
            let label = labels[row];
            debug_assert!(label < k, "label out of range");
            let (z, lse) = self.shifted_logits(x);
            loss += lse - z[label];
            // residual = p − onehot(label)
            for j in 0..k {
                let mut r = (z[j] - lse).exp();
                if j == label {
                    r -= 1.0;
                }
                grad_b[j] += r;
                for (i, &xi) in x.iter().enumerate() {
                    grad_w[i * k + j] += xi * r;
                }
            }
        }
        let inv_n = 1.0 / rows.len() as f64;
        loss *= inv_n;
        for g in &mut grad_w {
            *g *= inv_n;
        }
        for g in &mut grad_b {
            *g *= inv_n;
        }
        (loss, grad_w, grad_b)
    }

    /// One mini-batch gradient step at learning rate `lr`.
    pub fn sgd_step(&mut self, features: &[f64], labels: &[usize], rows: &[usize], lr: f64) {
        let (_, grad_w, grad_b) = self.loss_and_gradients(features, labels, rows);
        for (w, g) in self.weights.iter_mut().zip(&grad_w) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
    }

    /// Mean cross-entropy and top-1 accuracy over all rows. Argmax ties go
    /// to the lowest class index, so scoring is deterministic too.
    pub fn evaluate(&self, features: &[f64], labels: &[usize]) -> (f64, f64) {
        let d = self.n_features;
        let n = labels.len();
        assert!(n > 0, "evaluating an empty set");
        assert_eq!(features.len(), n * d, "feature matrix shape");
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &label) in labels.iter().enumerate() {
            let x = &features[row * d..(row + 1) * d];
            let (z, lse) = self.shifted_logits(x);
            loss += lse - z[label];
            let argmax = z
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            if argmax == label {
                correct += 1;
            }
        }
        (loss / n as f64, correct as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small deterministic task: 6 rows, 3 features, 3 classes.
    fn fixture() -> (Vec<f64>, Vec<usize>) {
        let features = vec![
            0.5, -1.2, 0.3, //
            1.5, 0.2, -0.7, //
            -0.4, 0.9, 1.1, //
            0.0, 0.0, 2.0, //
            -1.0, -1.0, 0.5, //
            2.0, 0.1, 0.1, //
        ];
        let labels = vec![0, 1, 2, 2, 0, 1];
        (features, labels)
    }

    #[test]
    fn zero_model_loss_is_ln_k() {
        let (features, labels) = fixture();
        let model = HeadModel::zeros(3, 3);
        let (loss, _) = model.evaluate(&features, &labels);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let (features, labels) = fixture();
        let rows: Vec<usize> = (0..labels.len()).collect();
        let model = HeadModel::random_init(3, 3, 11);
        let (_, grad_w, grad_b) = model.loss_and_gradients(&features, &labels, &rows);

        let h = 1e-6;
        let loss_of = |m: &HeadModel| m.loss_and_gradients(&features, &labels, &rows).0;
        for (idx, &analytic) in grad_w.iter().enumerate() {
            let mut plus = model.clone();
            plus.weights[idx] += h;
            let mut minus = model.clone();
            minus.weights[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() < 1e-8,
                "weight {idx}: analytic {analytic} vs fd {fd}"
            );
        }
        for (idx, &analytic) in grad_b.iter().enumerate() {
            let mut plus = model.clone();
            plus.bias[idx] += h;
            let mut minus = model.clone();
            minus.bias[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() < 1e-8,
                "bias {idx}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_step_reduces_loss() {
        let (features, labels) = fixture();
        let rows: Vec<usize> = (0..labels.len()).collect();
        let mut model = HeadModel::random_init(3, 3, 5);
        let before = model.loss_and_gradients(&features, &labels, &rows).0;
        model.sgd_step(&features, &labels, &rows, 0.1);
        let after = model.loss_and_gradients(&features, &labels, &rows).0;
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn subset_gradient_uses_only_listed_rows() {
        let (features, labels) = fixture();
        let (full_loss, ..) = HeadModel::zeros(3, 3).loss_and_gradients(
            &features,
            &labels,
            &(0..6).collect::<Vec<_>>(),
        );
        let (sub_loss, ..) = HeadModel::zeros(3, 3).loss_and_gradients(&features, &labels, &[0, 1]);
        // Both are ln 3 at the zero model, but against different row counts;
        // verify via a model where the subset actually differs.
        assert!((full_loss - sub_loss).abs() < 1e-12);
        let model = HeadModel::random_init(3, 3, 2);
        let (l_full, ..) =
            model.loss_and_gradients(&features, &labels, &(0..6).collect::<Vec<_>>());
        let (l_sub, ..) = model.loss_and_gradients(&features, &labels, &[0, 1]);
        assert_ne!(l_full, l_sub);
    }

    #[test]
    fn parameters_roundtrip_preserves_model() {
        let model = HeadModel::random_init(4, 3, 9);
        let params = model.to_parameters().unwrap();
        assert_eq!(params.tensors[0].shape(), &[4, 3]);
        assert_eq!(params.tensors[1].shape(), &[3]);
        let back = HeadModel::from_parameters(&params).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn from_parameters_rejects_mismatched_shapes() {
        let w = Tensor::new(vec![4, 3], vec![0.0; 12]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let err = HeadModel::from_parameters(&Parameters {
            tensors: vec![w, b],
        })
        .unwrap_err();
        assert!(matches!(err, ModelError::Shape { .. }));
        let err = HeadModel::from_parameters(&Parameters::default()).unwrap_err();
        assert_eq!(err, ModelError::TensorCount(0));
    }

    #[test]
    fn same_seed_same_init_different_seed_different() {
        let a = HeadModel::random_init(8, 4, 33);
        assert_eq!(a, HeadModel::random_init(8, 4, 33));
        assert_ne!(a, HeadModel::random_init(8, 4, 34));
        assert!(a.weights.iter().all(|w| w.abs() < 0.05));
        assert!(a.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut model = HeadModel::zeros(2, 3);
        model.weights = vec![500.0, -500.0, 0.0, 500.0, -500.0, 0.0];
        let features = vec![2.0, 2.0, -2.0, -2.0];
        let labels = vec![1, 0];
        let (loss, acc) = model.evaluate(&features, &labels);
        assert!(loss.is_finite(), "loss {loss}");
        assert!((0.0..=1.0).contains(&acc));
        let (l2, gw, gb) = model.loss_and_gradients(&features, &labels, &[0, 1]);
        assert!(l2.is_finite());
        assert!(gw.iter().chain(&gb).all(|g| g.is_finite()));
    }
}
