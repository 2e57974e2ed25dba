use serde::{Deserialize, Serialize};

use super::{DenoiserError, DenoiserParams, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: DenoiserParams<S>,
    pub second_moment: DenoiserParams<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &DenoiserParams<S>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn optimizer_step<S: Scalar>(
    params: &mut DenoiserParams<S>,
    grads: &DenoiserParams<S>,
    state: &mut OptimizerState<S>,
) -> Result<(), DenoiserError> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.first_moment)?;
    params.check_same_shape(&state.second_moment)?;

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = S::from_f64(cfg.beta1).unwrap();
    let b2 = S::from_f64(cfg.beta2).unwrap();
    let one = S::one();
    let bias1 = S::from_f64(1.0 - cfg.beta1.powi(t)).unwrap();
    let bias2 = S::from_f64(1.0 - cfg.beta2.powi(t)).unwrap();
    let lr = S::from_f64(cfg.learning_rate).unwrap();
    let eps = S::from_f64(cfg.epsilon).unwrap();

    let grads = grads.tensors();
    let mut m = state.first_moment.tensors_mut();
    let mut v = state.second_moment.tensors_mut();
    for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].1;
        let m = &mut *m[i].1;
        let v = &mut *v[i].1;
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
