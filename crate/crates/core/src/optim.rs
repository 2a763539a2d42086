//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Named tensors, ordered by path.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first: ParamMap,
    pub second: ParamMap,
}

impl AdamWState {
    pub fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update. Parameters without a gradient entry are left untouched.
pub fn adamw_step(params: &mut ParamMap, grads: &ParamMap, state: &mut AdamWState, config: &AdamWConfig) -> Result<()> {
    if !(config.lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {}", config.lr)));
    }
    if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::UnknownParameter(name.clone()));
    }
    for (name, p) in params.iter() {
        let (m, v) = match (state.first.get(name), state.second.get(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::MissingParameter(name.clone())),
        };
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw state",
                left: p.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        if let Some(g) = grads.get(name) {
            p.expect_same_shape(g, "adamw gradient")?;
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.lr * config.weight_decay;

    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        let m = state.first.get_mut(name).expect("validated");
        let v = state.second.get_mut(name).expect("validated");
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let g = gi as f64;
            let m_new = config.beta1 * *mi as f64 + (1.0 - config.beta1) * g;
            let v_new = config.beta2 * *vi as f64 + (1.0 - config.beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let updated = *pi as f64 * decay - config.lr * m_hat / (v_hat.sqrt() + config.eps);
            *pi = updated as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32) -> ParamMap {
        ParamMap::from([("w".to_string(), Tensor::scalar(w))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamMap::from([("a".to_string(), Tensor::from_fn(&[3, 2], |i| i as f32 - 2.0))]);
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let g = ParamMap::from([("a".to_string(), Tensor::zeros(&[3, 2]))]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        for &g in &[3.0f32, -0.25] {
            let mut p = single(1.0);
            let mut st = AdamWState::new(&p);
            let cfg = AdamWConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..Default::default()
            };
            adamw_step(&mut p, &single(g), &mut st, &cfg).unwrap();
            let delta = p["w"].item() - 1.0;
            assert!((delta + g.signum() * 0.01).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = single(1.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..100 {
            let w = p["w"].item();
            adamw_step(&mut p, &single(2.0 * w), &mut st, &cfg).unwrap();
        }
        assert!(p["w"].item().abs() < 0.5, "{}", p["w"].item());
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut p = single(2.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &single(0.0), &mut st, &cfg).unwrap();
        assert!((p["w"].item() - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = single(1.0);
        let mut st = AdamWState::new(&ParamMap::from([("w".to_string(), Tensor::zeros(&[2]))]));
        let err = adamw_step(&mut p, &single(1.0), &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let mut st = AdamWState::new(&p);
        let stray = ParamMap::from([("nope".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(
            adamw_step(&mut p, &stray, &mut st, &AdamWConfig::default()),
            Err(Error::UnknownParameter(_))
        ));
    }
}
