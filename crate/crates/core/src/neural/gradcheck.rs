//! Central-difference verification of the hand-written backward passes.
//!
//! Each probe exposes a scalar loss, its analytic gradient over a flat
//! coordinate list (parameters, then inputs) and mutable access to those
//! coordinates. Coordinates whose perturbation flips a rectifier or an
//! argmax selection are skipped: the function is not differentiable there.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cbam::Cbam;
use super::discriminator::Discriminator;
use super::layers::{
    hash_active, relu, relu_backward, upsample2, upsample2_backward, Conv3d, Linear, Parameterized,
};
use super::loss::{bce_logits, mse, point_mse};
use super::tensor::TensorGrid;
use super::unet::{chain_signature, Arch, Decoder, Encoder};
use crate::rng;

pub trait GradProbe {
    /// Loss and a signature of the piecewise-linear regime it was evaluated in.
    fn loss(&self) -> (f64, u64);
    /// Analytic gradient in coordinate order.
    fn analytic(&mut self) -> Vec<f64>;
    /// Visits every coordinate block in the same order as `analytic`.
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates to probe; all of them when the probe has fewer.
    pub probes: usize,
    pub seed: u64,
    /// Added to the analytic gradient of the first probed coordinate.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            probes: 200,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

fn with_coord<P: GradProbe + ?Sized>(p: &mut P, idx: usize, f: impl FnOnce(&mut f64)) {
    let mut off = 0;
    let mut f = Some(f);
    p.blocks_mut(&mut |b| {
        if idx >= off && idx < off + b.len() {
            if let Some(f) = f.take() {
                f(&mut b[idx - off]);
            }
        }
        off += b.len();
    });
}

pub fn grad_check<P: GradProbe + ?Sized>(p: &mut P, opts: &GradCheckOptions) -> GradCheckReport {
    assert!(
        (1e-7..=1e-3).contains(&opts.eps),
        "epsilon outside [1e-7, 1e-3]"
    );
    let mut analytic = p.analytic();
    let n = analytic.len();
    let mut r = rng::stream(opts.seed, "gradcheck.coords");
    let mut picks = sample(&mut r, n, opts.probes.min(n)).into_vec();
    picks.sort_unstable();
    if let (Some(c), Some(&first)) = (opts.corrupt, picks.first()) {
        analytic[first] += c;
    }
    let (_, base_sig) = p.loss();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &i in &picks {
        let mut orig = 0.0;
        with_coord(p, i, |v| {
            orig = *v;
            *v = orig + opts.eps;
        });
        let (lp, sp) = p.loss();
        with_coord(p, i, |v| *v = orig - opts.eps);
        let (lm, sm) = p.loss();
        with_coord(p, i, |v| *v = orig);
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report
}

fn random_tensor(shape: [usize; 5], r: &mut impl Rng) -> TensorGrid {
    let n = shape.iter().product();
    TensorGrid {
        shape,
        data: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    }
}

fn project(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn params_and_grads<P: Parameterized + ?Sized>(net: &P) -> Vec<f64> {
    let mut g = Vec::new();
    net.visit("", &mut |_, p| g.extend_from_slice(&p.grad));
    g
}

/// Operations covered by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Linear,
    Conv {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Upsample,
    Cbam,
    Discriminator,
    Mse,
    PointMse,
    Bce,
    /// Encoder → decoder → MSE over the whole chain.
    Chain,
}

/// Builds a probe for `op` on an input of `shape = [b, c, z, y, x]`.
pub fn probe_for(op: Op, shape: [usize; 5], seed: u64) -> Box<dyn GradProbe> {
    let mut r = rng::stream(seed, "gradcheck.probe");
    match op {
        Op::Linear => {
            let (b, n_in) = (shape[0], shape[1..].iter().product::<usize>());
            let mut lin = Linear::new(n_in, 5, &mut r);
            lin.bias
                .value
                .iter_mut()
                .for_each(|v| *v = r.gen_range(-0.5..0.5));
            let x = (0..b * n_in).map(|_| r.gen_range(-1.0..1.0)).collect();
            let w = (0..b * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
            Box::new(LinearProbe {
                lin,
                x,
                w,
                batch: b,
            })
        }
        Op::Conv { kernel, stride } => {
            let mut conv = Conv3d::new(shape[1], 3, kernel, stride, &mut r);
            conv.bias
                .value
                .iter_mut()
                .for_each(|v| *v = r.gen_range(-0.5..0.5));
            let x = random_tensor(shape, &mut r);
            let [z, y, xx] = conv.out_dims(x.spatial());
            let w = random_tensor([shape[0], 3, z, y, xx], &mut r).data;
            Box::new(ConvProbe { conv, x, w })
        }
        Op::Relu => {
            let x = random_tensor(shape, &mut r);
            let w = random_tensor(shape, &mut r).data;
            Box::new(ReluProbe { x, w })
        }
        Op::Upsample => {
            let x = random_tensor(shape, &mut r);
            let mut up = shape;
            (2..5).for_each(|i| up[i] *= 2);
            let w = random_tensor(up, &mut r).data;
            Box::new(UpsampleProbe { x, w })
        }
        Op::Cbam => {
            let mut cb = Cbam::new(shape[1], 2, 3, &mut r);
            cb.visit_mut("", &mut |name, p| {
                if name.ends_with("bias") {
                    p.value.iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
                }
            });
            let x = random_tensor(shape, &mut r);
            let w = random_tensor(shape, &mut r).data;
            Box::new(CbamProbe { cb, x, w })
        }
        Op::Discriminator => {
            let mut d = Discriminator::new(shape[1], 8, &mut r);
            d.visit_mut("", &mut |name, p| {
                if name.ends_with("bias") {
                    p.value.iter_mut().for_each(|v| *v = r.gen_range(0.0..0.3));
                }
            });
            let z = random_tensor(shape, &mut r);
            let labels = (0..shape[0]).map(|i| (i % 2) as f64).collect();
            Box::new(DiscProbe { d, z, labels })
        }
        Op::Mse => {
            let x = random_tensor(shape, &mut r);
            let t = random_tensor(shape, &mut r).data;
            Box::new(MseProbe { x, t, points: None })
        }
        Op::PointMse => {
            let x = random_tensor(shape, &mut r);
            let k = (x.len() / 3).max(1);
            let mut idx = sample(&mut r, x.len(), k).into_vec();
            idx.sort_unstable();
            let points = idx
                .into_iter()
                .map(|i| (i, r.gen_range(-1.0..1.0)))
                .collect();
            Box::new(MseProbe {
                x,
                t: Vec::new(),
                points: Some(points),
            })
        }
        Op::Bce => {
            let logits = (0..shape[0]).map(|_| r.gen_range(-3.0..3.0)).collect();
            let labels = (0..shape[0]).map(|i| (i % 2) as f64).collect();
            Box::new(BceProbe { logits, labels })
        }
        Op::Chain => {
            let arch = Arch {
                in_channels: shape[1],
                base_channels: 2,
                reduction: 2,
                ..Default::default()
            };
            let mut enc = Encoder::new(&arch, &mut r);
            let mut dec = Decoder::new(&arch, &mut r);
            // small positive biases keep most rectifiers away from their kink
            let mut jitter = |_: &str, p: &mut super::layers::Param| {
                if p.value.len() <= 64 {
                    p.value.iter_mut().for_each(|v| *v = r.gen_range(0.0..0.2));
                }
            };
            enc.visit_mut("", &mut jitter);
            dec.visit_mut("", &mut jitter);
            let x = random_tensor(shape, &mut rng::stream(seed, "gradcheck.chain_input"));
            let mut ts = shape;
            ts[1] = 1;
            let t = random_tensor(ts, &mut rng::stream(seed, "gradcheck.chain_target")).data;
            Box::new(ChainProbe { enc, dec, x, t })
        }
    }
}

struct LinearProbe {
    lin: Linear,
    x: Vec<f64>,
    w: Vec<f64>,
    batch: usize,
}

impl GradProbe for LinearProbe {
    fn loss(&self) -> (f64, u64) {
        (project(&self.lin.forward(&self.x, self.batch), &self.w), 0)
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.lin.zero_grad();
        let gx = self.lin.backward(&self.x, &self.w, self.batch);
        let mut g = params_and_grads(&self.lin);
        g.extend(gx);
        g
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.lin.visit_mut("", &mut |_, p| f(&mut p.value));
        f(&mut self.x);
    }
}

struct ConvProbe {
    conv: Conv3d,
    x: TensorGrid,
    w: Vec<f64>,
}

impl GradProbe for ConvProbe {
    fn loss(&self) -> (f64, u64) {
        let (y, _) = self.conv.forward(&self.x).expect("probe shapes");
        (project(&y.data, &self.w), 0)
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.conv.zero_grad();
        let (y, cache) = self.conv.forward(&self.x).expect("probe shapes");
        let gout = TensorGrid {
            shape: y.shape,
            data: self.w.clone(),
        };
        let gx = self.conv.backward(&cache, &gout, true).expect("input grad");
        let mut g = params_and_grads(&self.conv);
        g.extend(gx.data);
        g
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.conv.visit_mut("", &mut |_, p| f(&mut p.value));
        f(&mut self.x.data);
    }
}

struct ReluProbe {
    x: TensorGrid,
    w: Vec<f64>,
}

impl GradProbe for ReluProbe {
    fn loss(&self) -> (f64, u64) {
        let y = relu(self.x.clone());
        let mut h = DefaultHasher::new();
        hash_active(&mut h, &y.data);
        (project(&y.data, &self.w), h.finish())
    }
    fn analytic(&mut self) -> Vec<f64> {
        let y = relu(self.x.clone());
        relu_backward(
            &y,
            TensorGrid {
                shape: y.shape,
                data: self.w.clone(),
            },
        )
        .data
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.x.data);
    }
}

struct UpsampleProbe {
    x: TensorGrid,
    w: Vec<f64>,
}

impl GradProbe for UpsampleProbe {
    fn loss(&self) -> (f64, u64) {
        (project(&upsample2(&self.x).data, &self.w), 0)
    }
    fn analytic(&mut self) -> Vec<f64> {
        let y = upsample2(&self.x);
        upsample2_backward(&TensorGrid {
            shape: y.shape,
            data: self.w.clone(),
        })
        .data
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.x.data);
    }
}

struct CbamProbe {
    cb: Cbam,
    x: TensorGrid,
    w: Vec<f64>,
}

impl GradProbe for CbamProbe {
    fn loss(&self) -> (f64, u64) {
        let (y, cache) = self.cb.forward(&self.x).expect("probe shapes");
        let mut h = DefaultHasher::new();
        cache.hash_kinks(&mut h);
        (project(&y.data, &self.w), h.finish())
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.cb.zero_grad();
        let (y, cache) = self.cb.forward(&self.x).expect("probe shapes");
        let gx = self.cb.backward(
            &cache,
            &TensorGrid {
                shape: y.shape,
                data: self.w.clone(),
            },
        );
        let mut g = params_and_grads(&self.cb);
        g.extend(gx.data);
        g
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.cb.visit_mut("", &mut |_, p| f(&mut p.value));
        f(&mut self.x.data);
    }
}

/// Discriminator head followed by the cross-entropy it is trained with.
struct DiscProbe {
    d: Discriminator,
    z: TensorGrid,
    labels: Vec<f64>,
}

impl GradProbe for DiscProbe {
    fn loss(&self) -> (f64, u64) {
        let (l, trace) = self.d.logits(&self.z);
        let mut h = DefaultHasher::new();
        trace.kink_signature(&mut h);
        (bce_logits(&l, &self.labels).0, h.finish())
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.d.zero_grad();
        let (l, trace) = self.d.logits(&self.z);
        let (_, gl) = bce_logits(&l, &self.labels);
        let gz = self.d.backward(&trace, &gl);
        let mut g = params_and_grads(&self.d);
        g.extend(gz.data);
        g
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.d.visit_mut("", &mut |_, p| f(&mut p.value));
        f(&mut self.z.data);
    }
}

struct MseProbe {
    x: TensorGrid,
    t: Vec<f64>,
    points: Option<Vec<(usize, f64)>>,
}

impl MseProbe {
    fn eval(&self) -> (f64, TensorGrid) {
        match &self.points {
            Some(p) => point_mse(&self.x, p).expect("probe shapes"),
            None => mse(&self.x, &self.t).expect("probe shapes"),
        }
    }
}

impl GradProbe for MseProbe {
    fn loss(&self) -> (f64, u64) {
        (self.eval().0, 0)
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.eval().1.data
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.x.data);
    }
}

struct BceProbe {
    logits: Vec<f64>,
    labels: Vec<f64>,
}

impl GradProbe for BceProbe {
    fn loss(&self) -> (f64, u64) {
        (bce_logits(&self.logits, &self.labels).0, 0)
    }
    fn analytic(&mut self) -> Vec<f64> {
        bce_logits(&self.logits, &self.labels).1
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.logits);
    }
}

struct ChainProbe {
    enc: Encoder,
    dec: Decoder,
    x: TensorGrid,
    t: Vec<f64>,
}

impl GradProbe for ChainProbe {
    fn loss(&self) -> (f64, u64) {
        let (e, et) = self.enc.forward(&self.x).expect("probe shapes");
        let (y, dt) = self.dec.forward(&e).expect("probe shapes");
        (
            mse(&y, &self.t).expect("probe shapes").0,
            chain_signature(&et, &dt),
        )
    }
    fn analytic(&mut self) -> Vec<f64> {
        self.enc.zero_grad();
        self.dec.zero_grad();
        let (e, et) = self.enc.forward(&self.x).expect("probe shapes");
        let (y, dt) = self.dec.forward(&e).expect("probe shapes");
        let (_, gy) = mse(&y, &self.t).expect("probe shapes");
        let (gz, gskips) = self.dec.backward(&dt, &gy, true).expect("input grad");
        self.enc.backward(&et, &gz, &gskips).expect("probe shapes");
        let mut g = params_and_grads(&self.enc);
        g.extend(params_and_grads(&self.dec));
        g
    }
    fn blocks_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.enc.visit_mut("", &mut |_, p| f(&mut p.value));
        self.dec.visit_mut("", &mut |_, p| f(&mut p.value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(op: Op, shape: [usize; 5], probes: usize) -> GradCheckReport {
        let mut p = probe_for(op, shape, 11);
        grad_check(
            p.as_mut(),
            &GradCheckOptions {
                probes,
                ..Default::default()
            },
        )
    }

    #[test]
    fn primitives_pass() {
        let cases = [
            (Op::Linear, [3, 4, 1, 1, 2], 1e-6),
            (
                Op::Conv {
                    kernel: 3,
                    stride: 1,
                },
                [2, 2, 4, 4, 4],
                1e-4,
            ),
            (
                Op::Conv {
                    kernel: 3,
                    stride: 2,
                },
                [1, 2, 4, 6, 4],
                1e-4,
            ),
            (
                Op::Conv {
                    kernel: 1,
                    stride: 1,
                },
                [1, 3, 2, 2, 2],
                1e-4,
            ),
            (Op::Relu, [1, 2, 2, 3, 4], 1e-4),
            (Op::Upsample, [1, 2, 2, 2, 2], 1e-4),
            (Op::Cbam, [2, 4, 4, 4, 4], 1e-4),
            (Op::Discriminator, [4, 6, 1, 2, 2], 1e-4),
            (Op::Mse, [1, 1, 2, 3, 4], 1e-4),
            (Op::PointMse, [1, 1, 2, 3, 4], 1e-4),
            (Op::Bce, [6, 1, 1, 1, 1], 1e-4),
        ];
        for (op, shape, tol) in cases {
            let r = check(op, shape, 300);
            assert!(r.checked > 0, "{op:?}: nothing checked");
            assert!(r.max_rel_error < tol, "{op:?}: {r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut p = probe_for(Op::Linear, [2, 3, 1, 1, 1], 3);
        let r = grad_check(
            p.as_mut(),
            &GradCheckOptions {
                corrupt: Some(1e-2),
                ..Default::default()
            },
        );
        assert!(r.max_rel_error > 1e-3, "{r:?}");
    }
}
