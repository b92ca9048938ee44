use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::Parameterized;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with moment state keyed by parameter name, so one optimizer can
/// serve a chosen subset of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter block of `net` using its
    /// accumulated gradient, then clears the gradients.
    pub fn step<P: Parameterized + ?Sized>(&mut self, net: &mut P, prefix: &str) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let state = &mut self.state;
        net.visit_mut(prefix, &mut |name, p| {
            let s = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                t: 0,
            });
            s.t += 1;
            let c1 = 1.0 - beta1.powi(s.t);
            let c2 = 1.0 - beta2.powi(s.t);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                let mh = s.m[i] / c1;
                let vh = s.v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
                p.grad[i] = 0.0;
            }
        });
    }
}
