//! Named parameter storage and the Adam update rule.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{NumericError, Result};
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub requires_grad: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps every update and checkpoint deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NumericError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), Parameter { tensor, requires_grad: true });
        Ok(())
    }

    pub fn insert_randn<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        self.insert(name, Tensor::randn(shape, std, rng))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params.get(name).ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params.get_mut(name).ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Put every parameter on `tape`, honoring `requires_grad`, and return
    /// the name -> var binding for this forward pass.
    pub fn bind(&self, tape: &mut Tape) -> Result<ParamBinding> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            let var = if p.requires_grad {
                tape.param(name, p.tensor.clone())?
            } else {
                tape.leaf(p.tensor.clone())
            };
            vars.insert(name.clone(), var);
        }
        Ok(ParamBinding { vars })
    }

    /// Bind every parameter as a constant: forwards run, gradients don't
    /// flow. Used to hold one component fixed while training the other.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<ParamBinding> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), tape.leaf(p.tensor.clone()));
        }
        Ok(ParamBinding { vars })
    }
}

/// Tape-local handle for a bound `ParamStore`.
pub struct ParamBinding {
    vars: BTreeMap<String, VarId>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.vars.get(name).copied().ok_or_else(|| NumericError::UnknownParameter(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One bias-corrected Adam step. Parameters without an entry in
    /// `grads` are left untouched; non-finite gradients are rejected by
    /// parameter id before anything is mutated.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(NumericError::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.tensor.shape() != g.shape() {
                return Err(NumericError::shape(
                    "adam_step",
                    format!("param `{}` {:?} vs grad {:?}", name, p.tensor.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if !p.requires_grad {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let pd = p.tensor.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, g: Tensor) -> Gradients {
        let mut gr = Gradients::default();
        gr.insert(name.to_string(), g);
        gr
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &grads_of("w", Tensor::vector(vec![0.0, 0.0]))).unwrap();
        assert_eq!(params.get("w").unwrap().tensor.data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // At t=1 the bias-corrected update is lr * g / (|g| + eps), so a
        // unit gradient moves the parameter by almost exactly -lr.
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.step(&mut params, &grads_of("x", Tensor::scalar(1.0))).unwrap();
        let x = params.get("x").unwrap().tensor.data()[0];
        assert!((x + 0.1).abs() < 1e-8, "x = {}", x);
    }

    #[test]
    fn identical_grads_give_identical_updates() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(0.5)).unwrap();
        params.insert("b", Tensor::scalar(0.5)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let mut grads = Gradients::default();
        grads.insert("a".into(), Tensor::scalar(0.3));
        grads.insert("b".into(), Tensor::scalar(0.3));
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(
            params.get("a").unwrap().tensor.data(),
            params.get("b").unwrap().tensor.data()
        );
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_id() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.step(&mut params, &grads_of("w", Tensor::scalar(f64::NAN))).unwrap_err();
        assert!(err.to_string().contains("w"));
        // nothing moved
        assert_eq!(params.get("w").unwrap().tensor.data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }
}
