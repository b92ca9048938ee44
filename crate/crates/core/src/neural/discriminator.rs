//! Domain discriminator on globally pooled bottleneck features.

use rand::Rng;

use super::layers::{join, relu_slice, relu_slice_backward, sigmoid, Linear, Param, Parameterized};
use super::tensor::TensorGrid;

/// Logits are clamped to this magnitude before the logistic so the
/// probability stays strictly inside (0, 1) in f64.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

pub struct DiscTrace {
    shape: [usize; 5],
    pooled: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl DiscTrace {
    pub fn kink_signature(&self, h: &mut impl std::hash::Hasher) {
        super::layers::hash_active(h, &self.h1);
        super::layers::hash_active(h, &self.h2);
    }
}

impl Discriminator {
    pub fn new(channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(channels, width, rng),
            fc2: Linear::new(width, width, rng),
            out: Linear::new(width, 1, rng),
        }
    }

    /// One raw logit per batch element.
    pub fn logits(&self, z: &TensorGrid) -> (Vec<f64>, DiscTrace) {
        let (b_n, c_n, p) = (z.batch(), z.channels(), z.plane());
        let mut pooled = vec![0.0; b_n * c_n];
        for b in 0..b_n {
            for c in 0..c_n {
                pooled[b * c_n + c] = z.channel(b, c).iter().sum::<f64>() / p as f64;
            }
        }
        let mut h1 = self.fc1.forward(&pooled, b_n);
        relu_slice(&mut h1);
        let mut h2 = self.fc2.forward(&h1, b_n);
        relu_slice(&mut h2);
        let logits = self.out.forward(&h2, b_n);
        (
            logits,
            DiscTrace {
                shape: z.shape,
                pooled,
                h1,
                h2,
            },
        )
    }

    /// Probability that each batch element came from the source domain.
    pub fn probability(&self, z: &TensorGrid) -> Vec<f64> {
        self.logits(z)
            .0
            .into_iter()
            .map(|l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect()
    }

    /// Accumulates parameter gradients from logit gradients; returns `dZ`.
    pub fn backward(&mut self, trace: &DiscTrace, glogits: &[f64]) -> TensorGrid {
        let b_n = trace.shape[0];
        let mut g2 = self.out.backward(&trace.h2, glogits, b_n);
        relu_slice_backward(&trace.h2, &mut g2);
        let mut g1 = self.fc2.backward(&trace.h1, &g2, b_n);
        relu_slice_backward(&trace.h1, &mut g1);
        let gp = self.fc1.backward(&trace.pooled, &g1, b_n);
        let mut gz = TensorGrid::zeros(trace.shape);
        let (c_n, p) = (trace.shape[1], gz.plane());
        for b in 0..b_n {
            for c in 0..c_n {
                let g = gp[b * c_n + c] / p as f64;
                gz.channel_mut(b, c).iter_mut().for_each(|v| *v = g);
            }
        }
        gz
    }
}

impl Parameterized for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
