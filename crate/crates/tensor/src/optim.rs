//! AdamW with decoupled weight decay.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// A trainable tensor with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
        }
    }

    /// One AdamW update. The parameter is left untouched when `grad`
    /// contains a non-finite entry.
    pub fn adamw_step(&mut self, grad: &Tensor, cfg: &AdamWConfig) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return shape_err("adamw_step", self.value.shape(), grad.shape());
        }
        if !grad.all_finite() {
            return Err(TensorError::NonFinite {
                name: self.name.clone(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        let p = self.value.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_leaves_value() {
        let mut p = Parameter::new("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        p.adamw_step(&Tensor::zeros([3]), &cfg).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn single_step_matches_scalar_reference() {
        // scalar AdamW written out independently
        fn reference(p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
            let m = (1.0 - b1) * g;
            let v = (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1);
            let vhat = v / (1.0 - b2);
            p - lr * wd * p - lr * mhat / (vhat.sqrt() + eps)
        }
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = Parameter::new("w", Tensor::new([1], vec![0.7]).unwrap());
        p.adamw_step(&Tensor::new([1], vec![1.0]).unwrap(), &cfg).unwrap();
        let want = reference(0.7, 1.0, 0.1, 0.9, 0.999, 1e-8, 0.0);
        assert!((p.value.data()[0] - want).abs() < 1e-15);
        // first step moves by lr / (1 + eps/|g|)
        assert!((0.7 - p.value.data()[0] - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn default_weight_decay() {
        assert_eq!(AdamWConfig::default().weight_decay, 1e-4);
    }

    #[test]
    fn decay_shrinks_value_without_gradient() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = Parameter::new("w", Tensor::new([1], vec![2.0]).unwrap());
        p.adamw_step(&Tensor::zeros([1]), &cfg).unwrap();
        assert!((p.value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Parameter::new("decoder.w", Tensor::zeros([2]));
        let err = p
            .adamw_step(&Tensor::new([2], vec![0.0, f64::NAN]).unwrap(), &AdamWConfig::default())
            .unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFinite {
                name: "decoder.w".into()
            }
        );
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Parameter::new("w", Tensor::zeros([2]));
        assert!(p.adamw_step(&Tensor::zeros([3]), &AdamWConfig::default()).is_err());
    }
}
