use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments per parameter name.
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self::from_config(&AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        })
    }

    pub fn from_config(cfg: &AdamWConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor<T>, Tensor<T>)> {
        &self.moments
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Advances the shared step counter; call once per optimisation step
    /// before [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place from its gradient.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adamw", param.shape(), grad.shape()));
        }
        let t = self.step.max(1) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (lr, eps) = (self.lr, self.eps);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let p = param.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = grad.data()[i];
            m[i] = b1t * m[i] + one_b1 * gi;
            v[i] = b2t * v[i] + one_b2 * gi * gi;
            let m_hat = m[i].to_f64().unwrap() / bc1;
            let v_hat = v[i].to_f64().unwrap() / bc2;
            p[i] = p[i] * decay - T::lit(lr * m_hat / (v_hat.sqrt() + eps));
        }
        Ok(())
    }
}

/// One AdamW step on every trainable parameter of `model`, reading the
/// gradients accumulated on `g`. Frozen parameters are left untouched.
pub fn adamw_step<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, g: &Graph<T>, opt: &mut AdamW<T>) -> Result<()> {
    // Gather first so a missing gradient leaves the model unchanged.
    let mut grads = Vec::new();
    for p in model.parameters() {
        if !p.trainable {
            continue;
        }
        let grad = g
            .param_grad(&p.name)
            .ok_or_else(|| Error::Graph(format!("no gradient for trainable parameter `{}`", p.name)))?;
        grads.push(grad);
    }
    opt.begin_step();
    let mut grads = grads.into_iter();
    let mut result = Ok(());
    model.visit_mut(&mut |p| {
        if !p.trainable || result.is_err() {
            return;
        }
        let grad = grads.next().expect("one gradient per trainable parameter");
        result = opt.update(&p.name, &mut p.tensor, &grad);
    });
    result
}
