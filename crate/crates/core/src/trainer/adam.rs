use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a flat tensor; `t` is the 1-based step count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            config,
        }
    }
}

/// Applies one Adam step to every tensor outside the `frozen` groups.
/// A non-finite gradient aborts the step before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    frozen: &[ParamGroup],
) -> Result<()> {
    let grad_views = grads.tensors();
    if let Some(bad) = grad_views
        .iter()
        .find(|g| g.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical(format!(
            "non-finite gradient in {}",
            bad.name
        )));
    }
    state.t += 1;
    let t = state.t;
    let cfg = state.config;
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_views)
        .zip(moments)
    {
        if frozen.contains(&ParamGroup::of(&p.name)) {
            continue;
        }
        adam_update(p.data, g.data, m.data, v.data, t, lr, &cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([1.5], [0.0], [0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(p, [1.5]);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02] {
            let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, 0.01, &cfg);
            let expected = -0.01 * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        // reference recursion for f(x) = x^2 from x = 1 with lr 0.1
        let cfg = AdamConfig::default();
        let (mut x, mut m, mut v) = ([1.0], [0.0], [0.0]);
        for t in 1..=200 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, &cfg);
        }
        assert!(x[0].abs() < 0.1, "x = {}", x[0]);
    }
}
