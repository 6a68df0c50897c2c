//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        OptimizerState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::for_shapes(&store.shapes())
    }
}

/// One Adam update of `params` in place from `grads`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Invalid("learning rate must be positive".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adam slot {i}: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Applies [`adam_step`] to every parameter of a store using its gradient buffers.
pub fn adam_step_store(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    let (mut params, grads): (Vec<&mut Tensor>, Vec<&Tensor>) = store.values_and_grads().unzip();
    adam_step(&mut params, &grads, state, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut state = OptimizerState::for_shapes(&[vec![2]]);
        let g = Tensor::zeros(&[2]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = OptimizerState::for_shapes(&[vec![2]]);
        state.m[0] = Tensor::from_vec(vec![0.5, 0.5]);
        state.v[0] = Tensor::from_vec(vec![0.25, 0.25]);
        let g = Tensor::zeros(&[2]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        let g = Tensor::from_vec(vec![3.0, -0.2, 1e-3]);
        let mut state = OptimizerState::for_shapes(&[vec![3]]);
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
        // m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
        for (w, gk) in p.data().iter().zip(g.data()) {
            let expect = -cfg.lr * gk / (gk.abs() + cfg.eps);
            assert!((w - expect).abs() < 1e-15);
            assert!((w.abs() - cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut x = Tensor::from_vec(vec![1.0]);
        let mut state = OptimizerState::for_shapes(&[vec![1]]);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * x.data()[0]]);
            adam_step(&mut [&mut x], &[&g], &mut state, &cfg).unwrap();
        }
        assert!(x.data()[0].abs() < 1e-2, "x = {}", x.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = OptimizerState::for_shapes(&[vec![2]]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).is_err());
    }
}
