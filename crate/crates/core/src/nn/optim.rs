use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Gradients, Tensor};

use super::params::{Bound, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(cfg: AdamConfig, params: &Params<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![0.0; t.len()];
        Adam {
            cfg,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Float>(&mut self, params: &mut Params<T>, bound: &Bound, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(bound.var(id)) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k].f64();
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if update != 0.0 {
                    p[k] = T::of(p[k].f64() - update);
                }
            }
        }
    }
}
