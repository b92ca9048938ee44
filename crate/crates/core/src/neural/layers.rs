//! Differentiable primitives with hand-written backward passes.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tensor::TensorGrid;
use super::NeuralError;

/// Trainable parameter block with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn he_normal(n: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            value: (0..n).map(|_| dist.sample(rng)).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn filled(n: usize, v: f64) -> Self {
        Self {
            value: vec![v; n],
            grad: vec![0.0; n],
        }
    }
}

/// Anything holding named parameter blocks.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

/// SHA-256 (hex) over the names and little-endian values of every parameter
/// block whose name starts with one of `prefixes` (all blocks when empty).
pub fn param_checksum<P: Parameterized + ?Sized>(net: &P, prefixes: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    net.visit("", &mut |name, p| {
        if prefixes.is_empty() || prefixes.iter().any(|q| name.starts_with(q)) {
            h.update(name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
    });
    hex::encode(h.finalize())
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Output index range `[lo, hi)` along one axis for which
/// `o * stride + q` is a valid input index.
#[inline]
fn valid(n_in: usize, n_out: usize, stride: usize, q: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if q >= 0 { 0 } else { (-q + s - 1) / s };
    let hi_incl = (n_in as isize - 1 - q).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, n_out as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// `out[x] += w0 * a[x-1] + w1 * a[x] + w2 * a[x+1]` with zero padding.
#[inline]
fn row3(out: &mut [f64], a: &[f64], [w0, w1, w2]: [f64; 3]) {
    let n = out.len();
    debug_assert_eq!(n, a.len());
    if n == 1 {
        out[0] += w1 * a[0];
        return;
    }
    out[0] += w1 * a[0] + w2 * a[1];
    for (((o, l), c), r) in out[1..n - 1]
        .iter_mut()
        .zip(&a[..n - 2])
        .zip(&a[1..n - 1])
        .zip(&a[2..])
    {
        *o += w0 * l + w1 * c + w2 * r;
    }
    out[n - 1] += w0 * a[n - 2] + w1 * a[n - 1];
}

/// `[Σ g[x] a[x-1], Σ g[x] a[x], Σ g[x] a[x+1]]` with zero padding, using
/// four-lane partial sums so the loops vectorize.
#[inline]
fn dot3(g: &[f64], a: &[f64]) -> [f64; 3] {
    let n = g.len();
    if n == 1 {
        return [0.0, g[0] * a[0], 0.0];
    }
    let lane = |x: &[f64], y: &[f64]| -> f64 {
        let mut acc = [0.0; 4];
        let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
        let (xr, yr) = (xc.remainder(), yc.remainder());
        for (p, q) in xc.zip(yc) {
            for l in 0..4 {
                acc[l] += p[l] * q[l];
            }
        }
        let mut t = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (p, q) in xr.iter().zip(yr) {
            t += p * q;
        }
        t
    };
    [
        lane(&g[1..], &a[..n - 1]),
        lane(g, a),
        lane(&g[..n - 1], &a[1..]),
    ]
}

/// 3-D convolution with cubic kernel, zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: TensorGrid,
}

impl Conv3d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * k * k * k;
        Self {
            c_in,
            c_out,
            k,
            stride,
            weight: Param::he_normal(c_out * fan_in, fan_in, rng),
            bias: Param::zeros(c_out),
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        d.map(|n| (n + 2 * p - self.k) / self.stride + 1)
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((o * self.c_in + i) * self.k + kz) * self.k + ky) * self.k + kx
    }

    pub fn forward(&self, x: &TensorGrid) -> Result<(TensorGrid, ConvCache), NeuralError> {
        if x.channels() != self.c_in {
            return Err(NeuralError::Shape(format!(
                "conv expects {} channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let [dz, dy, dx] = x.spatial();
        let [oz_n, oy_n, ox_n] = self.out_dims([dz, dy, dx]);
        let b_n = x.batch();
        let mut out = TensorGrid::zeros([b_n, self.c_out, oz_n, oy_n, ox_n]);
        let plane_out = oz_n * oy_n * ox_n;
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let w = &self.weight.value;
        out.data
            .par_chunks_mut(plane_out)
            .enumerate()
            .for_each(|(bo, out_plane)| {
                let b = bo / self.c_out;
                let o = bo % self.c_out;
                out_plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
                for oz in 0..oz_n {
                    for oy in 0..oy_n {
                        let row =
                            &mut out_plane[(oz * oy_n + oy) * ox_n..(oz * oy_n + oy + 1) * ox_n];
                        for i in 0..self.c_in {
                            let in_plane = x.channel(b, i);
                            for kz in 0..k {
                                let iz = (oz * s) as isize + kz as isize - p;
                                if iz < 0 || iz >= dz as isize {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy * s) as isize + ky as isize - p;
                                    if iy < 0 || iy >= dy as isize {
                                        continue;
                                    }
                                    let in_row =
                                        &in_plane[(iz as usize * dy + iy as usize) * dx..][..dx];
                                    if k == 3 && s == 1 {
                                        let wi = self.w_index(o, i, kz, ky, 0);
                                        row3(row, in_row, [w[wi], w[wi + 1], w[wi + 2]]);
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let wv = w[self.w_index(o, i, kz, ky, kx)];
                                        let q = kx as isize - p;
                                        let (lo, hi) = valid(dx, ox_n, s, q);
                                        if s == 1 {
                                            let src = &in_row[(lo as isize + q) as usize
                                                ..(hi as isize + q) as usize];
                                            for (r, v) in row[lo..hi].iter_mut().zip(src) {
                                                *r += wv * v;
                                            }
                                        } else {
                                            for ox in lo..hi {
                                                row[ox] +=
                                                    wv * in_row[((ox * s) as isize + q) as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Ok((out, ConvCache { input: x.clone() }))
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        gout: &TensorGrid,
        need_input: bool,
    ) -> Option<TensorGrid> {
        let x = &cache.input;
        let [dz, dy, dx] = x.spatial();
        let [oz_n, oy_n, ox_n] = gout.spatial();
        let b_n = x.batch();
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let per_o = self.c_in * k * k * k;

        // weight + bias gradients, one task per output channel
        let w_grads: Vec<(Vec<f64>, f64)> = (0..self.c_out)
            .into_par_iter()
            .map(|o| {
                let mut gw = vec![0.0; per_o];
                let mut gb = 0.0;
                for b in 0..b_n {
                    let g_plane = gout.channel(b, o);
                    gb += g_plane.iter().sum::<f64>();
                    for oz in 0..oz_n {
                        for oy in 0..oy_n {
                            let g_row = &g_plane[(oz * oy_n + oy) * ox_n..][..ox_n];
                            for i in 0..self.c_in {
                                let in_plane = x.channel(b, i);
                                for kz in 0..k {
                                    let iz = (oz * s) as isize + kz as isize - p;
                                    if iz < 0 || iz >= dz as isize {
                                        continue;
                                    }
                                    for ky in 0..k {
                                        let iy = (oy * s) as isize + ky as isize - p;
                                        if iy < 0 || iy >= dy as isize {
                                            continue;
                                        }
                                        let in_row = &in_plane
                                            [(iz as usize * dy + iy as usize) * dx..][..dx];
                                        if k == 3 && s == 1 {
                                            let a = dot3(g_row, in_row);
                                            let base = (i * k + kz) * k * k + ky * k;
                                            for kx in 0..3 {
                                                gw[base + kx] += a[kx];
                                            }
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let q = kx as isize - p;
                                            let (lo, hi) = valid(dx, ox_n, s, q);
                                            let mut acc = 0.0;
                                            if s == 1 {
                                                let src = &in_row[(lo as isize + q) as usize
                                                    ..(hi as isize + q) as usize];
                                                for (g, v) in g_row[lo..hi].iter().zip(src) {
                                                    acc += g * v;
                                                }
                                            } else {
                                                for ox in lo..hi {
                                                    acc += g_row[ox]
                                                        * in_row[((ox * s) as isize + q) as usize];
                                                }
                                            }
                                            gw[((i * k + kz) * k + ky) * k + kx] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect();
        for (o, (gw, gb)) in w_grads.into_iter().enumerate() {
            for (dst, v) in self.weight.grad[o * per_o..(o + 1) * per_o]
                .iter_mut()
                .zip(gw)
            {
                *dst += v;
            }
            self.bias.grad[o] += gb;
        }

        if !need_input {
            return None;
        }
        let mut gin = TensorGrid::zeros(x.shape);
        let plane_in = dz * dy * dx;
        let w = &self.weight.value;
        gin.data
            .par_chunks_mut(plane_in)
            .enumerate()
            .for_each(|(bi, gin_plane)| {
                let b = bi / self.c_in;
                let i = bi % self.c_in;
                for o in 0..self.c_out {
                    let g_plane = gout.channel(b, o);
                    for kz in 0..k {
                        let (z_lo, z_hi) = valid(dz, oz_n, s, kz as isize - p);
                        for oz in z_lo..z_hi {
                            let iz = ((oz * s) as isize + kz as isize - p) as usize;
                            for ky in 0..k {
                                let (y_lo, y_hi) = valid(dy, oy_n, s, ky as isize - p);
                                for oy in y_lo..y_hi {
                                    let iy = ((oy * s) as isize + ky as isize - p) as usize;
                                    let g_row = &g_plane[(oz * oy_n + oy) * ox_n..][..ox_n];
                                    let in_row = &mut gin_plane[(iz * dy + iy) * dx..][..dx];
                                    if k == 3 && s == 1 {
                                        // transpose of the forward stencil: flipped taps
                                        let wi = self.w_index(o, i, kz, ky, 0);
                                        row3(in_row, g_row, [w[wi + 2], w[wi + 1], w[wi]]);
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let wv = w[self.w_index(o, i, kz, ky, kx)];
                                        let q = kx as isize - p;
                                        let (lo, hi) = valid(dx, ox_n, s, q);
                                        if s == 1 {
                                            let dst = &mut in_row[(lo as isize + q) as usize
                                                ..(hi as isize + q) as usize];
                                            for (d, g) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                                *d += wv * g;
                                            }
                                        } else {
                                            for ox in lo..hi {
                                                in_row[((ox * s) as isize + q) as usize] +=
                                                    wv * g_row[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Some(gin)
    }
}

impl Parameterized for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer on `[batch, features]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_in,
            n_out,
            weight: Param::he_normal(n_in * n_out, n_in, rng),
            bias: Param::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.n_out];
        for b in 0..batch {
            let row = &x[b * self.n_in..(b + 1) * self.n_in];
            for o in 0..self.n_out {
                let w = &self.weight.value[o * self.n_in..(o + 1) * self.n_in];
                out[b * self.n_out + o] =
                    self.bias.value[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    pub fn backward(&mut self, x: &[f64], gout: &[f64], batch: usize) -> Vec<f64> {
        let mut gin = vec![0.0; batch * self.n_in];
        for b in 0..batch {
            let row = &x[b * self.n_in..(b + 1) * self.n_in];
            for o in 0..self.n_out {
                let g = gout[b * self.n_out + o];
                self.bias.grad[o] += g;
                let wg = &mut self.weight.grad[o * self.n_in..(o + 1) * self.n_in];
                for (d, v) in wg.iter_mut().zip(row) {
                    *d += g * v;
                }
                let w = &self.weight.value[o * self.n_in..(o + 1) * self.n_in];
                for (d, wv) in gin[b * self.n_in..(b + 1) * self.n_in].iter_mut().zip(w) {
                    *d += g * wv;
                }
            }
        }
        gin
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Rectifier applied in place; the returned tensor is the activation and
/// doubles as the cache for the backward pass.
pub fn relu(mut x: TensorGrid) -> TensorGrid {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn relu_backward(activation: &TensorGrid, mut gout: TensorGrid) -> TensorGrid {
    for (g, a) in gout.data.iter_mut().zip(&activation.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    gout
}

pub fn relu_slice(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn relu_slice_backward(activation: &[f64], gout: &mut [f64]) {
    for (g, a) in gout.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Hash of the active/inactive pattern of a rectified activation.
pub fn hash_active(h: &mut impl Hasher, activation: &[f64]) {
    for chunk in activation.chunks(64) {
        let mut bits = 0u64;
        for (j, v) in chunk.iter().enumerate() {
            if *v > 0.0 {
                bits |= 1 << j;
            }
        }
        bits.hash(h);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Nearest-neighbour ×2 upsampling on all three spatial axes.
pub fn upsample2(x: &TensorGrid) -> TensorGrid {
    let [dz, dy, dx] = x.spatial();
    let (nz, ny, nx) = (2 * dz, 2 * dy, 2 * dx);
    let mut out = TensorGrid::zeros([x.shape[0], x.shape[1], nz, ny, nx]);
    let plane = nz * ny * nx;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bc, o)| {
            let src = &x.data[bc * dz * dy * dx..(bc + 1) * dz * dy * dx];
            for z in 0..nz {
                for y in 0..ny {
                    let s_row = &src[((z / 2) * dy + y / 2) * dx..][..dx];
                    let d_row = &mut o[(z * ny + y) * nx..][..nx];
                    for (xi, d) in d_row.iter_mut().enumerate() {
                        *d = s_row[xi / 2];
                    }
                }
            }
        });
    out
}

pub fn upsample2_backward(gout: &TensorGrid) -> TensorGrid {
    let [nz, ny, nx] = gout.spatial();
    let (dz, dy, dx) = (nz / 2, ny / 2, nx / 2);
    let mut gin = TensorGrid::zeros([gout.shape[0], gout.shape[1], dz, dy, dx]);
    let plane = dz * dy * dx;
    gin.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bc, g)| {
            let src = &gout.data[bc * nz * ny * nx..(bc + 1) * nz * ny * nx];
            for z in 0..nz {
                for y in 0..ny {
                    let s_row = &src[(z * ny + y) * nx..][..nx];
                    let d_row = &mut g[((z / 2) * dy + y / 2) * dx..][..dx];
                    for (xi, v) in s_row.iter().enumerate() {
                        d_row[xi / 2] += v;
                    }
                }
            }
        });
    gin
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &TensorGrid, b: &TensorGrid) -> Result<TensorGrid, NeuralError> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(NeuralError::Shape(format!(
            "concat mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (ca, cb, p) = (a.channels(), b.channels(), a.plane());
    let mut out = TensorGrid::zeros([a.batch(), ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
    for n in 0..a.batch() {
        out.data[n * (ca + cb) * p..(n * (ca + cb) + ca) * p]
            .copy_from_slice(&a.data[n * ca * p..(n + 1) * ca * p]);
        out.data[(n * (ca + cb) + ca) * p..(n + 1) * (ca + cb) * p]
            .copy_from_slice(&b.data[n * cb * p..(n + 1) * cb * p]);
    }
    Ok(out)
}

pub fn split_channels(g: &TensorGrid, ca: usize) -> (TensorGrid, TensorGrid) {
    let (c, p) = (g.channels(), g.plane());
    let cb = c - ca;
    let mut a = TensorGrid::zeros([g.batch(), ca, g.shape[2], g.shape[3], g.shape[4]]);
    let mut b = TensorGrid::zeros([g.batch(), cb, g.shape[2], g.shape[3], g.shape[4]]);
    for n in 0..g.batch() {
        a.data[n * ca * p..(n + 1) * ca * p].copy_from_slice(&g.data[n * c * p..(n * c + ca) * p]);
        b.data[n * cb * p..(n + 1) * cb * p]
            .copy_from_slice(&g.data[(n * c + ca) * p..(n + 1) * c * p]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution used as an oracle for the row-based kernel.
    fn naive_conv(c: &Conv3d, x: &TensorGrid) -> TensorGrid {
        let [dz, dy, dx] = x.spatial();
        let [oz, oy, ox] = c.out_dims([dz, dy, dx]);
        let p = (c.k / 2) as isize;
        let mut out = TensorGrid::zeros([x.batch(), c.c_out, oz, oy, ox]);
        for b in 0..x.batch() {
            for o in 0..c.c_out {
                for z in 0..oz {
                    for y in 0..oy {
                        for xx in 0..ox {
                            let mut acc = c.bias.value[o];
                            for i in 0..c.c_in {
                                for kz in 0..c.k {
                                    for ky in 0..c.k {
                                        for kx in 0..c.k {
                                            let iz = (z * c.stride + kz) as isize - p;
                                            let iy = (y * c.stride + ky) as isize - p;
                                            let ix = (xx * c.stride + kx) as isize - p;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= dz as isize
                                                || iy >= dy as isize
                                                || ix >= dx as isize
                                            {
                                                continue;
                                            }
                                            acc += c.weight.value[c.w_index(o, i, kz, ky, kx)]
                                                * x.channel(b, i)[((iz as usize) * dy
                                                    + iy as usize)
                                                    * dx
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                            out.data[(((b * c.c_out + o) * oz + z) * oy + y) * ox + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut c = Conv3d::new(3, 2, k, s, &mut r);
            c.bias.value = vec![0.3, -0.2];
            let x = TensorGrid::from_vec(
                [2, 3, 4, 6, 8],
                (0..2 * 3 * 4 * 6 * 8)
                    .map(|_| r.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let (y, _) = c.forward(&x).unwrap();
            let z = naive_conv(&c, &x);
            assert_eq!(y.shape, z.shape);
            for (a, b) in y.data.iter().zip(&z.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let c = Conv3d::new(1, 1, 3, 2, &mut r);
        assert_eq!(c.out_dims([16, 48, 48]), [8, 24, 24]);
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let x = TensorGrid::from_vec([1, 2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let u = upsample2(&x);
        assert_eq!(u.shape, [1, 2, 2, 4, 4]);
        assert_eq!(u.data[0..4], [0.0, 0.0, 1.0, 1.0]);
        let g = upsample2_backward(&TensorGrid {
            shape: u.shape,
            data: vec![1.0; u.len()],
        });
        assert!(g.data.iter().all(|v| *v == 8.0));
        let c = concat_channels(&x, &x).unwrap();
        assert_eq!(c.channels(), 4);
        let (a, b) = split_channels(&c, 2);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn sigmoid_softplus_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
