//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::Rng;

use crate::model::ModelParams;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that exactly-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn record(&mut self, name: &str, idx: usize, numeric: f64, analytic: f64) {
        let rel = relative_error(numeric, analytic);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
    }
}

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    let diff = (numeric - analytic).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / numeric.abs().max(analytic.abs()).max(REL_FLOOR)
}

/// Checks `grad` against central differences of `f` at `x` on the listed
/// coordinates (all coordinates when `coords` is `None`).
pub fn check_gradient(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: Option<&[usize]>,
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    let all: Vec<usize> = (0..x.len()).collect();
    let mut probe = x.to_vec();
    for &i in coords.unwrap_or(&all) {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        report.record("x", i, (up - down) / (2.0 * FD_STEP), grad[i]);
    }
    report
}

/// Model-level gradient check. Up to `per_tensor` coordinates are sampled
/// from each tensor (all of them for small tensors).
pub fn check_model_gradient(
    f: impl Fn(&ModelParams) -> f64,
    params: &ModelParams,
    grads: &ModelParams,
    per_tensor: usize,
    tolerance: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    let mut probe = params.clone();
    let grad_views = grads.tensors();
    let plan: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|t| {
            let n = t.data.len();
            let picks = if n <= per_tensor {
                (0..n).collect()
            } else {
                let mut v = index::sample(rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            };
            (t.name.clone(), picks)
        })
        .collect();
    for (tensor_idx, (name, picks)) in plan.iter().enumerate() {
        for &i in picks {
            let orig = probe.tensors()[tensor_idx].data[i];
            set_coord(&mut probe, tensor_idx, i, orig + FD_STEP);
            let up = f(&probe);
            set_coord(&mut probe, tensor_idx, i, orig - FD_STEP);
            let down = f(&probe);
            set_coord(&mut probe, tensor_idx, i, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(name, i, numeric, grad_views[tensor_idx].data[i]);
        }
    }
    report
}

fn set_coord(params: &mut ModelParams, tensor: usize, i: usize, value: f64) {
    params.tensors_mut()[tensor].data[i] = value;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_is_exact() {
        let w = [0.5, -2.0, 3.25];
        let f = |x: &[f64]| 1.0 + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let report = check_gradient(f, &[0.1, 0.2, -0.7], &w, None, 1e-10);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |x: &[f64]| x[0] * x[0] + x[1].sin();
        let x = [0.7_f64, 0.3];
        let grad = [2.0 * x[0], x[1].cos()];
        assert!(check_gradient(f, &x, &grad, None, 1e-4).passed());
        let doubled = [grad[0] * 2.0, grad[1] * 2.0];
        let report = check_gradient(f, &x, &doubled, None, 1e-4);
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.4);
    }
}
