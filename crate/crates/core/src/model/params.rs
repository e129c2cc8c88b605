//! Named parameter registry and per-sample forward context.
//!
//! Parameters are plain tensors keyed by dotted names; each forward pass
//! lifts the ones it touches onto a fresh tape as shared leaves so that
//! reuse (e.g. GRU weights across timesteps) accumulates gradients on a
//! single node.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    /// Xavier-uniform weight plus zero bias under `<name>.w` / `<name>.b`.
    pub fn insert_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = crate::rng::stream(seed, &format!("init.{name}"), &[]);
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.map
            .insert(format!("{name}.w"), Tensor::from_raw(data, vec![fan_in, fan_out]));
        self.map.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Layer-norm gain/shift under `<name>.g` / `<name>.s`.
    pub fn insert_layer_norm(&mut self, name: &str, dim: usize) {
        self.map.insert(format!("{name}.g"), Tensor::ones(&[dim]));
        self.map.insert(format!("{name}.s"), Tensor::zeros(&[dim]));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "ParamSet::set",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

/// Per-sample forward context: a tape plus cached parameter leaves.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    trainable: bool,
    leaves: RefCell<HashMap<String, Var>>,
}

impl<'a> Forward<'a> {
    /// Training context: parameters become tracked leaves.
    pub fn train(params: &'a ParamSet) -> Forward<'a> {
        Forward {
            tape: Tape::new(),
            params,
            trainable: true,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Inference context: parameters are constants, nothing is recorded.
    pub fn eval(params: &'a ParamSet) -> Forward<'a> {
        Forward {
            tape: Tape::new(),
            params,
            trainable: false,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// The shared leaf (or constant) for a named parameter.
    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let tensor = self.params.get(name).clone();
        let var = if self.trainable {
            self.tape.leaf(tensor)
        } else {
            Var::constant(tensor)
        };
        self.leaves.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    /// x . W + b for the linear registered under `name`.
    pub fn linear(&self, x: &Var, name: &str) -> Result<Var> {
        x.matmul(&self.p(&format!("{name}.w")))?
            .add(&self.p(&format!("{name}.b")))
    }

    /// Layer norm over the trailing feature axis of a 2-D input.
    pub fn layer_norm(&self, x: &Var, name: &str) -> Result<Var> {
        let n = x.shape()[0];
        let mean = x.mean_axis(1)?.reshape(&[n, 1])?;
        let centered = x.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_axis(1)?.reshape(&[n, 1])?;
        let denom = var.add_scalar(1e-6)?.sqrt()?;
        let normed = centered.div(&denom)?;
        normed
            .mul(&self.p(&format!("{name}.g")))?
            .add(&self.p(&format!("{name}.s")))
    }

    /// Gradients per parameter name (zeros for untouched parameters are
    /// omitted; callers treat missing as zero).
    pub fn grads_of(&self, root: &Var) -> Result<HashMap<String, Tensor>> {
        let grads = root.backward()?;
        let mut out = HashMap::new();
        for (name, var) in self.leaves.borrow().iter() {
            if let Some(g) = grads.wrt(var) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(3.0));
        let fw = Forward::train(&ps);
        let w1 = fw.p("w");
        let w2 = fw.p("w");
        let y = w1.mul(&w2).unwrap(); // w^2
        let g = fw.grads_of(&y).unwrap();
        assert_eq!(g["w"].item(), 6.0);
    }

    #[test]
    fn eval_mode_records_nothing() {
        let mut ps = ParamSet::new();
        ps.insert_linear("lin", 3, 2, 7);
        let fw = Forward::eval(&ps);
        let x = Var::constant(Tensor::ones(&[1, 3]));
        let y = fw.linear(&x, "lin").unwrap();
        assert!(!y.is_tracked());
        assert!(fw.tape.is_empty());
    }

    #[test]
    fn init_is_seed_and_name_stable() {
        let mut a = ParamSet::new();
        a.insert_linear("x", 4, 4, 1);
        let mut b = ParamSet::new();
        b.insert_linear("x", 4, 4, 1);
        assert_eq!(a.get("x.w"), b.get("x.w"));
        let mut c = ParamSet::new();
        c.insert_linear("x", 4, 4, 2);
        assert!(a.get("x.w") != c.get("x.w"));
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamSet::new();
        ps.insert_layer_norm("ln", 4);
        let fw = Forward::eval(&ps);
        let x = Var::constant(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0], &[2, 4]).unwrap());
        let y = fw.layer_norm(&x, "ln").unwrap();
        for r in 0..2 {
            let row = y.value().row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
