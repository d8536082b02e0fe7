use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::TrainError;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Decay is decoupled (`p -= lr·wd·p`) and applies only to
/// parameters flagged for it. Parameters without a gradient are left
/// untouched, moments included. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                    value: *bad,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let shrink = if params.decays(id) { 1.0 - lr * config.weight_decay } else { 1.0 };
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * shrink - lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
