use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count used for
/// bias correction.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters whose gradient
/// is `None` (frozen or unused) are left untouched. Any non-finite gradient
/// aborts the step before anything is modified.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(format!("parameter #{i}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = g else { continue };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = md[j] / bc1;
            let v_hat = vd[j] / bc2;
            pd[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * pd[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: f64, g: f64, cfg: &AdamWConfig) -> f64 {
        let mut params = vec![Tensor::scalar(p)];
        let mut state = AdamWState::new(&params);
        adamw_step(&mut params, &[Some(Tensor::scalar(g))], &mut state, cfg).unwrap();
        params[0].item().unwrap()
    }

    #[test]
    fn examples() {
        let base = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        assert_eq!(run(1.5, 0.0, &base), 1.5);
        assert!((run(1.0, 1.0, &base) - 0.9).abs() < 1e-8);
        let decay = AdamWConfig {
            weight_decay: 0.01,
            ..base
        };
        assert!((run(1.0, 0.0, &decay) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut state = AdamWState::new(&params);
        let grads = [Some(Tensor::scalar(1.0)), Some(Tensor::scalar(f64::NAN))];
        let err = adamw_step(&mut params, &grads, &mut state, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        assert_eq!(params[0].item().unwrap(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamWState::new(&params);
        adamw_step(&mut params, &[None], &mut state, &AdamWConfig::default()).unwrap();
        assert_eq!(params[0].item().unwrap(), 1.0);
    }
}
