//! Named parameter storage and the Adam update rule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::Tensor;

/// Parameters keyed by a stable path string. BTreeMap keeps iteration order
/// deterministic, which checkpoint bytes and replay tests rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Register every parameter on a tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect();
        BoundParams { ids }
    }

    /// Register every parameter as a constant leaf (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { ids }
    }
}

/// Tape handles for a bound parameter set.
pub struct BoundParams {
    ids: BTreeMap<String, ValueId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ValueId)> {
        self.ids.iter()
    }
}

/// First and second moment estimates per parameter, plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every bound parameter. A NaN or Inf
/// gradient aborts the step before any parameter is touched.
pub fn adam_step(
    params: &mut ParamStore,
    bound: &BoundParams,
    grads: &Gradients,
    tape: &Tape,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::invalid(format!("adam: lr {} must be > 0", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::invalid(format!(
            "adam: betas ({}, {}) must be in [0,1)",
            cfg.beta1, cfg.beta2
        )));
    }
    // Validate all gradients first so a bad one leaves params untouched.
    let mut grad_map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, &id) in bound.iter() {
        let g = grads.get(id, tape);
        if !g.all_finite() {
            return Err(Error::numeric(format!(
                "adam: non-finite gradient for parameter {name:?}"
            )));
        }
        grad_map.insert(name.clone(), g);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grad_map {
        let p = params
            .get(&name)
            .unwrap_or_else(|| panic!("adam: unknown parameter {name:?}"))
            .clone();
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let gd = g.data();
        let mut new_data = p.data().to_vec();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            new_data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        params.insert(name, Tensor::new(p.shape(), new_data)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[value.len()], value.to_vec()).unwrap());
        p
    }

    fn run_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> f64 {
        // loss = sum(w^2) / 2, so grad = w
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let w = bound.id("w");
        let sq = tape.mul(w, w).unwrap();
        let half = tape.scale(sq, 0.5);
        let loss = tape.sum(half);
        let grads = tape.backward(loss).unwrap();
        adam_step(params, &bound, &grads, &tape, state, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(&[1.0, -2.0]);
        let mut state = AdamState::default();
        let cfg = AdamConfig::default();
        // Build a loss that ignores w: gradient is exactly zero.
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let c = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        adam_step(&mut params, &bound, &grads, &tape, &mut state, &cfg).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = single_param(&[0.3, -0.7]);
        let mut state = AdamState::default();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        run_step(&mut params, &mut state, &cfg);
        let w = params.get("w").unwrap().data().to_vec();
        // Bias correction makes the first update lr * sign(g) up to eps effects.
        assert!((w[0] - (0.3 - 0.1)).abs() < 1e-6, "{w:?}");
        assert!((w[1] - (-0.7 + 0.1)).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn quadratic_descent_is_strictly_decreasing() {
        let mut params = single_param(&[1.0]);
        let mut state = AdamState::default();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            run_step(&mut params, &mut state, &cfg);
            let w = params.get("w").unwrap().data()[0].abs();
            assert!(w < prev, "|w|={w} did not decrease from {prev}");
            prev = w;
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let mut params = single_param(&[1.0]);
        let mut state = AdamState::default();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let w = bound.id("w");
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        for bad in [
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
        ] {
            assert!(adam_step(&mut params, &bound, &grads, &tape, &mut state, &bad).is_err());
        }
        assert_eq!(params.get("w").unwrap().data(), &[1.0]);
    }
}
