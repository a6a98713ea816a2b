use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first and second moment estimates.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Named trainable tensors with their gradients and optimizer state.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    /// Number of optimizer steps taken; drives Adam bias correction.
    pub step: u64,
    /// Distinguishes sets sharing one graph. Clones keep it.
    pub(crate) uid: u64,
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

impl Default for ParameterSet {
    fn default() -> Self {
        ParameterSet {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.params == other.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl UpdateRule {
    pub fn adam(lr: f32) -> UpdateRule {
        UpdateRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            UpdateRule::Sgd { lr } | UpdateRule::Adam { lr, .. } => lr,
        }
    }
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let n = value.len();
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    /// He-normal initialisation with standard deviation `gain * sqrt(2 / fan_in)`.
    pub fn insert_he<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f32,
        rng: &mut R,
    ) -> Result<ParamId, AutodiffError> {
        let std = gain * (2.0 / fan_in.max(1) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients held by parameter leaves of `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, g) in graph.param_leaves(self.uid) {
            let p = &mut self.params[id.0];
            p.grad
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b);
        }
    }

    /// Takes over the identity of `other`, so handles issued against
    /// `other` address this set.
    pub(crate) fn adopt_identity(&mut self, other: &ParameterSet) {
        self.uid = other.uid;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One update with `rule`, then clears gradients. Non-finite gradients
    /// abort before any parameter is touched.
    pub fn optimizer_step(&mut self, rule: UpdateRule) -> Result<(), AutodiffError> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.grad.data().iter().any(|g| !g.is_finite()))
        {
            return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        match rule {
            UpdateRule::Sgd { lr } => {
                for p in &mut self.params {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
            }
            UpdateRule::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for p in &mut self.params {
                    let Parameter {
                        value, grad, m, v, ..
                    } = p;
                    for (((w, &g), mi), vi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        self.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32, g: f32) -> (ParameterSet, ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::scalar(v)).unwrap();
        ps.params[0].grad = Tensor::scalar(g);
        (ps, id)
    }

    #[test]
    fn sgd_step() {
        let (mut ps, id) = one(1.0, 2.0);
        ps.optimizer_step(UpdateRule::Sgd { lr: 0.1 }).unwrap();
        assert!((ps.value(id).item() - 0.8).abs() < 1e-7);
        assert_eq!(ps.grad(id).item(), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.5f32, -3.0, 1e-3] {
            let (mut ps, id) = one(1.0, g);
            ps.optimizer_step(UpdateRule::adam(0.01)).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let delta = ps.value(id).item() - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-6, "g={g}: {delta} vs {expected}");
            assert!((delta.abs() - 0.01).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for rule in [UpdateRule::Sgd { lr: 0.5 }, UpdateRule::adam(0.5)] {
            let (mut ps, id) = one(3.25, 0.0);
            ps.optimizer_step(rule).unwrap();
            assert_eq!(ps.value(id).item(), 3.25);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut ps, id) = one(1.0, f32::NAN);
        let err = ps.optimizer_step(UpdateRule::Sgd { lr: 0.1 }).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient("w".into()));
        assert_eq!(ps.value(id).item(), 1.0);
        assert_eq!(ps.step, 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(1.0)).is_err());
    }
}
