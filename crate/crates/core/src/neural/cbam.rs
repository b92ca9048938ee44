//! Convolutional block attention: channel gate from pooled descriptors
//! through a shared bottleneck MLP, then a spatial gate from channel-wise
//! average/max maps through one convolution.

use std::hash::{Hash, Hasher};

use rand::Rng;

use super::layers::{hash_active, join, sigmoid, Conv3d, ConvCache, Linear, Param, Parameterized};
use super::tensor::TensorGrid;
use super::NeuralError;

#[derive(Clone, Debug, PartialEq)]
pub struct Cbam {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv3d,
}

#[derive(Clone, Debug)]
pub struct CbamCache {
    input: TensorGrid,
    avg: Vec<f64>,
    mx: Vec<f64>,
    mx_idx: Vec<usize>,
    h_avg: Vec<f64>,
    h_max: Vec<f64>,
    ca: Vec<f64>,
    gated: TensorGrid,
    sp_idx: Vec<u32>,
    sp_cache: ConvCache,
    sa: Vec<f64>,
}

impl CbamCache {
    pub fn hash_kinks(&self, h: &mut impl Hasher) {
        self.mx_idx.hash(h);
        self.sp_idx.hash(h);
        hash_active(h, &self.h_avg);
        hash_active(h, &self.h_max);
    }
}

impl Cbam {
    pub fn new(
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            channels,
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
            spatial: Conv3d::new(2, 1, spatial_kernel, 1, rng),
        }
    }

    fn mlp(&self, v: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.fc1.forward(v, batch);
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        let o = self.fc2.forward(&h, batch);
        (h, o)
    }

    pub fn forward(&self, f: &TensorGrid) -> Result<(TensorGrid, CbamCache), NeuralError> {
        let (b_n, c_n, p) = (f.batch(), f.channels(), f.plane());
        if c_n != self.channels {
            return Err(NeuralError::Shape(format!(
                "cbam expects {} channels, got {}",
                self.channels, c_n
            )));
        }
        let mut avg = vec![0.0; b_n * c_n];
        let mut mx = vec![0.0; b_n * c_n];
        let mut mx_idx = vec![0usize; b_n * c_n];
        for b in 0..b_n {
            for c in 0..c_n {
                let plane = f.channel(b, c);
                avg[b * c_n + c] = plane.iter().sum::<f64>() / p as f64;
                let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
                for (i, &v) in plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        bi = i;
                    }
                }
                mx[b * c_n + c] = best;
                mx_idx[b * c_n + c] = bi;
            }
        }
        let (h_avg, o_avg) = self.mlp(&avg, b_n);
        let (h_max, o_max) = self.mlp(&mx, b_n);
        let ca: Vec<f64> = o_avg
            .iter()
            .zip(&o_max)
            .map(|(a, b)| sigmoid(a + b))
            .collect();

        let mut gated = f.clone();
        for b in 0..b_n {
            for c in 0..c_n {
                let g = ca[b * c_n + c];
                gated.channel_mut(b, c).iter_mut().for_each(|v| *v *= g);
            }
        }

        let mut desc = TensorGrid::zeros([b_n, 2, f.shape[2], f.shape[3], f.shape[4]]);
        let mut sp_idx = vec![0u32; b_n * p];
        for b in 0..b_n {
            for v in 0..p {
                let mut s = 0.0;
                let (mut best, mut bi) = (f64::NEG_INFINITY, 0u32);
                for c in 0..c_n {
                    let x = gated.data[(b * c_n + c) * p + v];
                    s += x;
                    if x > best {
                        best = x;
                        bi = c as u32;
                    }
                }
                desc.data[(b * 2) * p + v] = s / c_n as f64;
                desc.data[(b * 2 + 1) * p + v] = best;
                sp_idx[b * p + v] = bi;
            }
        }
        let (logits, sp_cache) = self.spatial.forward(&desc)?;
        let sa: Vec<f64> = logits.data.iter().map(|&x| sigmoid(x)).collect();
        let mut out = gated.clone();
        for b in 0..b_n {
            for c in 0..c_n {
                let gate = &sa[b * p..(b + 1) * p];
                for (o, s) in out.channel_mut(b, c).iter_mut().zip(gate) {
                    *o *= s;
                }
            }
        }
        let cache = CbamCache {
            input: f.clone(),
            avg,
            mx,
            mx_idx,
            h_avg,
            h_max,
            ca,
            gated,
            sp_idx,
            sp_cache,
            sa,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &CbamCache, gout: &TensorGrid) -> TensorGrid {
        let f = &cache.input;
        let (b_n, c_n, p) = (f.batch(), f.channels(), f.plane());

        // spatial gate
        let mut g_gated = gout.clone();
        let mut g_logit = TensorGrid::zeros([b_n, 1, f.shape[2], f.shape[3], f.shape[4]]);
        for b in 0..b_n {
            for c in 0..c_n {
                let off = (b * c_n + c) * p;
                for v in 0..p {
                    let s = cache.sa[b * p + v];
                    g_logit.data[b * p + v] += gout.data[off + v] * cache.gated.data[off + v];
                    g_gated.data[off + v] = gout.data[off + v] * s;
                }
            }
        }
        for b in 0..b_n {
            for v in 0..p {
                let s = cache.sa[b * p + v];
                g_logit.data[b * p + v] *= s * (1.0 - s);
            }
        }
        let g_desc = self
            .spatial
            .backward(&cache.sp_cache, &g_logit, true)
            .expect("input grad requested");
        for b in 0..b_n {
            for v in 0..p {
                let ga = g_desc.data[(b * 2) * p + v] / c_n as f64;
                for c in 0..c_n {
                    g_gated.data[(b * c_n + c) * p + v] += ga;
                }
                let c = cache.sp_idx[b * p + v] as usize;
                g_gated.data[(b * c_n + c) * p + v] += g_desc.data[(b * 2 + 1) * p + v];
            }
        }

        // channel gate
        let mut g_f = g_gated.clone();
        let mut g_o = vec![0.0; b_n * c_n];
        for b in 0..b_n {
            for c in 0..c_n {
                let off = (b * c_n + c) * p;
                let a = cache.ca[b * c_n + c];
                let mut acc = 0.0;
                for v in 0..p {
                    acc += g_gated.data[off + v] * f.data[off + v];
                    g_f.data[off + v] = g_gated.data[off + v] * a;
                }
                g_o[b * c_n + c] = acc * a * (1.0 - a);
            }
        }
        let mut branch = |pooled: &[f64], hidden: &[f64]| -> Vec<f64> {
            let mut g_h = self.fc2.backward(hidden, &g_o, b_n);
            for (g, h) in g_h.iter_mut().zip(hidden) {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            }
            self.fc1.backward(pooled, &g_h, b_n)
        };
        let g_avg = branch(&cache.avg, &cache.h_avg);
        let g_max = branch(&cache.mx, &cache.h_max);
        for b in 0..b_n {
            for c in 0..c_n {
                let off = (b * c_n + c) * p;
                let ga = g_avg[b * c_n + c] / p as f64;
                g_f.data[off..off + p].iter_mut().for_each(|g| *g += ga);
                g_f.data[off + cache.mx_idx[b * c_n + c]] += g_max[b * c_n + c];
            }
        }
        g_f
    }
}

impl Parameterized for Cbam {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_gates_are_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut cb = Cbam::new(4, 4, 3, &mut r);
        cb.fc1.weight.value.iter_mut().for_each(|w| *w = 0.0);
        cb.fc2.weight.value.iter_mut().for_each(|w| *w = 0.0);
        cb.fc2.bias.value.iter_mut().for_each(|b| *b = 20.0);
        cb.spatial.weight.value.iter_mut().for_each(|w| *w = 0.0);
        cb.spatial.bias.value[0] = 30.0;
        let x = TensorGrid::from_vec(
            [2, 4, 4, 4, 4],
            (0..512).map(|_| r.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let (y, _) = cb.forward(&x).unwrap();
        assert_eq!(y.shape, x.shape);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
