use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam optimizer state: first/second moments per parameter and a step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }

    /// One bias-corrected Adam update of every parameter, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<(), TensorError> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.lr);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));

        for (name, p) in params.iter_mut() {
            let grad: Tensor<T> = p.grad.take().expect("checked above");
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                (
                    vec![T::zero(); p.value.len()],
                    vec![T::zero(); p.value.len()],
                )
            });
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
