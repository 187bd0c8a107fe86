use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::ParamTensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step_count: 0 }
    }

    pub fn with_beta2(mut self, beta2: f64) -> Self {
        self.beta2 = beta2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "invalid Adam settings lr={} beta1={} beta2={}",
                self.learning_rate, self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over `params`, then clears gradients.
pub fn adam_step<T: Scalar>(params: &mut [&mut ParamTensor<T>], config: &mut AdamConfig) -> Result<()> {
    config.validate()?;
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::numeric("adam_step", format!("non-finite gradient in {}", p.name)));
        }
    }
    config.step_count += 1;
    let t = config.step_count as i32;
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let one = T::one();
    let corr1 = T::of(1.0 - config.beta1.powi(t));
    let corr2 = T::of(1.0 - config.beta2.powi(t));
    let lr = T::of(config.learning_rate);
    let eps = T::of(config.epsilon);
    for p in params.iter_mut() {
        let ParamTensor { value, grad, adam_m, adam_v, .. } = &mut **p;
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(adam_m.data_mut().iter_mut())
            .zip(adam_v.data_mut().iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}
