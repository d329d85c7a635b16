use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let z: Vec<Vec<T>> = params
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.numel()])
            .collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            state: AdamState::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        self.state.step += 1;
        let t = self.state.step as f64;
        let c = &self.config;
        let b1 = T::c(c.beta1);
        let b2 = T::c(c.beta2);
        let one = T::one();
        let lr_t = T::c(c.lr);
        let bc1 = T::c(1.0 - c.beta1.powf(t));
        let bc2 = T::c(1.0 - c.beta2.powf(t));
        let eps = T::c(c.eps);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(i);
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam_step", &[p.len()], &[g.len()]));
            }
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
