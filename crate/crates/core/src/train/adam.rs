//! Adam with bias correction and per-group learning rates.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamSet;
use indexmap::IndexMap;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First/second moment buffers, keyed and ordered like the trainable set.
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    /// Buffers for the parameters selected by `trainable`.
    pub fn new(params: &ParamSet, trainable: impl Fn(&str) -> bool) -> AdamState {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in params.iter() {
            if trainable(name) {
                m.insert(name.to_string(), Tensor::zeros(t.shape()));
                v.insert(name.to_string(), Tensor::zeros(t.shape()));
            }
        }
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        }
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(|s| s.as_str())
    }
}

/// One bias-corrected update over the state's trainable set.
///
/// Gradients absent from `grads` count as zero. Non-finite gradients reject
/// the whole step, leaving parameters and state untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamSet,
    grads: &HashMap<String, Tensor>,
    lr_of: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
        if state.m.contains_key(name) && g.shape() != params.get(name).shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: params.get(name).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let names: Vec<String> = state.m.keys().cloned().collect();
    for name in names {
        let lr = lr_of(&name);
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative learning rate for '{name}'"
            )));
        }
        let p = params.get(&name);
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape());
                &zero
            }
        };
        let m = state.m.get(&name).unwrap();
        let v = state.v.get(&name).unwrap();
        let mut m_new = Vec::with_capacity(g.numel());
        let mut v_new = Vec::with_capacity(g.numel());
        let mut p_new = Vec::with_capacity(g.numel());
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            m_new.push(mi);
            v_new.push(vi);
            p_new.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + state.eps));
        }
        let shape = p.shape().to_vec();
        state.m.insert(name.clone(), Tensor::from_raw(m_new, shape.clone()));
        state.v.insert(name.clone(), Tensor::from_raw(v_new, shape.clone()));
        params.set(&name, Tensor::from_raw(p_new, shape))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(v));
        p.insert("b", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_matches_analytic_form() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(&params, |_| true);
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        adam_step(&mut state, &mut params, &grads, |_| 1e-4).unwrap();
        // delta = -lr * 1 / (1 + eps)
        let expect = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((params.get("a").item() - expect).abs() < 1e-15);
        // no gradient -> unchanged exactly
        assert_eq!(params.get("b").item(), 1.0);
    }

    #[test]
    fn zero_gradient_never_moves_parameters() {
        let mut params = scalar_params(0.5);
        let mut state = AdamState::new(&params, |_| true);
        for _ in 0..10 {
            adam_step(&mut state, &mut params, &HashMap::new(), |_| 1e-2).unwrap();
        }
        assert_eq!(params.get("a").item(), 0.5);
        assert_eq!(params.get("b").item(), 0.5);
    }

    #[test]
    fn groups_update_independently() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new(&params, |_| true);
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        grads.insert("b".to_string(), Tensor::scalar(1.0));
        adam_step(&mut state, &mut params, &grads, |n| if n == "a" { 1e-2 } else { 1e-4 }).unwrap();
        let da = -params.get("a").item();
        let db = -params.get("b").item();
        assert!((da / db - 100.0).abs() < 1e-6, "da {da} db {db}");
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(&params, |_| true);
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::from_raw(vec![f64::NAN], vec![]));
        let before = params.get("a").clone();
        assert!(adam_step(&mut state, &mut params, &grads, |_| 1e-3).is_err());
        assert_eq!(params.get("a"), &before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn untracked_parameters_never_update() {
        let mut params = scalar_params(2.0);
        let mut state = AdamState::new(&params, |n| n == "a");
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        grads.insert("b".to_string(), Tensor::scalar(1.0));
        adam_step(&mut state, &mut params, &grads, |_| 1e-2).unwrap();
        assert!(params.get("a").item() < 2.0);
        assert_eq!(params.get("b").item(), 2.0);
    }
}
