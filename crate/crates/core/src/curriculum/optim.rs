//! Decoupled-weight-decay adaptive-moment optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn reset(&mut self) {
        *self = OptimState::default();
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// One update of every parameter named in `grads`.
///
/// The whole step is rejected, leaving `params` and `state` untouched, if any
/// gradient is non-finite, names an unknown or frozen parameter, or has the
/// wrong shape.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter '{name}'")))?;
        if params.is_frozen(name) {
            return Err(Error::InvalidInput(format!("gradient for frozen parameter '{name}'")));
        }
        if p.shape() != g.shape() {
            return Err(Error::InvalidInput(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for '{name}' at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.rows(), g.cols()),
            v: Tensor::zeros(g.rows(), g.cols()),
        });
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (mo.m.data_mut(), mo.v.data_mut());
        for i in 0..gd.len() {
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gd[i];
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gd[i] * gd[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * weight_decay * pd[i];
            pd[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("qp.w", Tensor::from_vec(1, v.len(), v.to_vec()));
        s
    }

    fn grads(v: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("qp.w".to_string(), Tensor::from_vec(1, v.len(), v.to_vec()))])
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = store(&[0.3, -1.2]);
        let before = p.clone();
        adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut OptimState::default(), 0.1, 0.0).unwrap();
        assert_eq!(p.get("qp.w"), before.get("qp.w"));
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = store(&[2.0, -4.0]);
        adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut OptimState::default(), 0.1, 0.01).unwrap();
        let w = p.get("qp.w").unwrap();
        assert!((w.get(0, 0) - 2.0 * 0.999).abs() < 1e-15);
        assert!((w.get(0, 1) + 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Closed form: m̂ = g, v̂ = g², so Δ = lr·g/(|g|+ε).
        let mut p = store(&[1.0]);
        adamw_step(&mut p, &grads(&[1.0]), &mut OptimState::default(), 1e-3, 0.0).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + EPSILON);
        assert!((p.get("qp.w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut p = store(&[1.0, 1.0]);
        let before = p.clone();
        let mut st = OptimState::default();
        let err = adamw_step(&mut p, &grads(&[1.0, f64::NAN]), &mut st, 1e-3, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, before);
        assert_eq!(st, OptimState::default());
    }

    #[test]
    fn frozen_parameters_are_refused() {
        let mut p = store(&[1.0]);
        p.freeze_prefix("qp.");
        assert!(adamw_step(&mut p, &grads(&[1.0]), &mut OptimState::default(), 1e-3, 0.0).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = grads(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = g["qp.w"].sum_sq().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
