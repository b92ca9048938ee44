//! 3-D U-Net encoder and decoder.
//!
//! Encoder: stem conv, then per level a stride-2 conv and a conv, all
//! rectified; the deepest level is the bottleneck `Z` (attention-refined
//! when enabled). Decoder: per level nearest ×2 upsampling + conv, concat
//! with the skip, fuse conv, optional attention; a 1×1×1 head emits one
//! channel.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cbam::{Cbam, CbamCache};
use super::layers::{
    concat_channels, hash_active, join, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv3d, ConvCache, Param, Parameterized,
};
use super::tensor::TensorGrid;
use super::NeuralError;

/// Architecture descriptor shared by every encoder/decoder of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Attention blocks at the bottleneck and at every decoder level.
    pub attention: bool,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub disc_width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            in_channels: 2,
            depth: 3,
            base_channels: 16,
            attention: true,
            reduction: 4,
            spatial_kernel: 3,
            disc_width: 64,
        }
    }
}

impl Arch {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn descriptor(&self) -> String {
        format!(
            "unet3d;in={};depth={};base={};attention={};reduction={};spatial_kernel={};disc_width={}",
            self.in_channels,
            self.depth,
            self.base_channels,
            u8::from(self.attention),
            self.reduction,
            self.spatial_kernel,
            self.disc_width
        )
    }

    pub fn parse_descriptor(s: &str) -> Result<Self, NeuralError> {
        let mut parts = s.split(';');
        if parts.next() != Some("unet3d") {
            return Err(NeuralError::Checkpoint(format!(
                "unknown architecture `{s}`"
            )));
        }
        let mut a = Arch::default();
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| NeuralError::Checkpoint(format!("bad descriptor field `{kv}`")))?;
            let n: usize = v
                .parse()
                .map_err(|_| NeuralError::Checkpoint(format!("bad descriptor value `{kv}`")))?;
            match k {
                "in" => a.in_channels = n,
                "depth" => a.depth = n,
                "base" => a.base_channels = n,
                "attention" => a.attention = n != 0,
                "reduction" => a.reduction = n,
                "spatial_kernel" => a.spatial_kernel = n,
                "disc_width" => a.disc_width = n,
                _ => {
                    return Err(NeuralError::Checkpoint(format!(
                        "unknown descriptor field `{k}`"
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<(), NeuralError> {
        let f = 1usize << self.depth;
        if spatial.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(NeuralError::Shape(format!(
                "spatial dims {:?} not divisible by 2^{} = {}",
                spatial, self.depth, f
            )));
        }
        Ok(())
    }
}

/// Bottleneck features plus one skip tensor per resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub z: TensorGrid,
    pub skips: Vec<TensorGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub arch: Arch,
    pub stem: Conv3d,
    pub downs: Vec<Conv3d>,
    pub convs: Vec<Conv3d>,
    pub attention: Option<Cbam>,
}

pub struct EncoderTrace {
    stem: ConvCache,
    stem_act: TensorGrid,
    levels: Vec<(ConvCache, TensorGrid, ConvCache, TensorGrid)>,
    attention: Option<CbamCache>,
}

impl EncoderTrace {
    pub fn kink_signature(&self, h: &mut impl Hasher) {
        hash_active(h, &self.stem_act.data);
        for (_, a, _, b) in &self.levels {
            hash_active(h, &a.data);
            hash_active(h, &b.data);
        }
        if let Some(c) = &self.attention {
            c.hash_kinks(h);
        }
    }
}

impl Encoder {
    pub fn new(arch: &Arch, rng: &mut impl Rng) -> Self {
        let stem = Conv3d::new(arch.in_channels, arch.channels(0), 3, 1, rng);
        let mut downs = Vec::new();
        let mut convs = Vec::new();
        for l in 1..=arch.depth {
            downs.push(Conv3d::new(
                arch.channels(l - 1),
                arch.channels(l),
                3,
                2,
                rng,
            ));
            convs.push(Conv3d::new(arch.channels(l), arch.channels(l), 3, 1, rng));
        }
        let attention = arch.attention.then(|| {
            Cbam::new(
                arch.bottleneck_channels(),
                arch.reduction,
                arch.spatial_kernel,
                rng,
            )
        });
        Self {
            arch: arch.clone(),
            stem,
            downs,
            convs,
            attention,
        }
    }

    pub fn forward(&self, x: &TensorGrid) -> Result<(Encoded, EncoderTrace), NeuralError> {
        self.arch.check_input(x.spatial())?;
        if x.channels() != self.arch.in_channels {
            return Err(NeuralError::Shape(format!(
                "encoder expects {} input channels",
                self.arch.in_channels
            )));
        }
        let (h, stem) = self.stem.forward(x)?;
        let stem_act = relu(h);
        let mut skips = vec![stem_act.clone()];
        let mut levels = Vec::with_capacity(self.arch.depth);
        let mut cur = stem_act.clone();
        for (down, conv) in self.downs.iter().zip(&self.convs) {
            let (h, c1) = down.forward(&cur)?;
            let a1 = relu(h);
            let (h, c2) = conv.forward(&a1)?;
            let a2 = relu(h);
            cur = a2.clone();
            levels.push((c1, a1, c2, a2));
            skips.push(cur.clone());
        }
        skips.pop();
        let (z, attention) = match &self.attention {
            Some(cb) => {
                let (z, c) = cb.forward(&cur)?;
                (z, Some(c))
            }
            None => (cur, None),
        };
        z.ensure_finite("encoder output")?;
        Ok((
            Encoded { z, skips },
            EncoderTrace {
                stem,
                stem_act,
                levels,
                attention,
            },
        ))
    }

    /// Accumulates parameter gradients from bottleneck and skip gradients.
    pub fn backward(
        &mut self,
        trace: &EncoderTrace,
        gz: &TensorGrid,
        gskips: &[TensorGrid],
    ) -> Result<(), NeuralError> {
        if gskips.len() != self.arch.depth {
            return Err(NeuralError::Shape(format!(
                "expected {} skip gradients, got {}",
                self.arch.depth,
                gskips.len()
            )));
        }
        let mut g = match (&mut self.attention, &trace.attention) {
            (Some(cb), Some(c)) => cb.backward(c, gz),
            _ => gz.clone(),
        };
        for l in (0..self.arch.depth).rev() {
            let (c1, a1, c2, a2) = &trace.levels[l];
            g = relu_backward(a2, g);
            g = self.convs[l].backward(c2, &g, true).expect("input grad");
            g = relu_backward(a1, g);
            g = self.downs[l].backward(c1, &g, true).expect("input grad");
            g.add_assign(&gskips[l]);
        }
        g = relu_backward(&trace.stem_act, g);
        self.stem.backward(&trace.stem, &g, false);
        Ok(())
    }
}

impl Parameterized for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (l, (d, c)) in self.downs.iter().zip(&self.convs).enumerate() {
            d.visit(&join(prefix, &format!("down{}", l + 1)), f);
            c.visit(&join(prefix, &format!("conv{}", l + 1)), f);
        }
        if let Some(a) = &self.attention {
            a.visit(&join(prefix, "attention"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (l, (d, c)) in self.downs.iter_mut().zip(&mut self.convs).enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", l + 1)), f);
            c.visit_mut(&join(prefix, &format!("conv{}", l + 1)), f);
        }
        if let Some(a) = &mut self.attention {
            a.visit_mut(&join(prefix, "attention"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub arch: Arch,
    /// Indexed by resolution level (0 = full resolution).
    pub ups: Vec<Conv3d>,
    pub fuses: Vec<Conv3d>,
    pub attention: Vec<Cbam>,
    pub head: Conv3d,
}

struct DecoderLevel {
    up: ConvCache,
    up_act: TensorGrid,
    fuse: ConvCache,
    fuse_act: TensorGrid,
    attention: Option<CbamCache>,
}

pub struct DecoderTrace {
    /// Ordered deepest level first.
    levels: Vec<DecoderLevel>,
    head: ConvCache,
}

impl DecoderTrace {
    pub fn kink_signature(&self, h: &mut impl Hasher) {
        for l in &self.levels {
            hash_active(h, &l.up_act.data);
            hash_active(h, &l.fuse_act.data);
            if let Some(c) = &l.attention {
                c.hash_kinks(h);
            }
        }
    }
}

impl Decoder {
    pub fn new(arch: &Arch, rng: &mut impl Rng) -> Self {
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut attention = Vec::new();
        for l in 0..arch.depth {
            ups.push(Conv3d::new(
                arch.channels(l + 1),
                arch.channels(l),
                3,
                1,
                rng,
            ));
            fuses.push(Conv3d::new(
                2 * arch.channels(l),
                arch.channels(l),
                3,
                1,
                rng,
            ));
            if arch.attention {
                attention.push(Cbam::new(
                    arch.channels(l),
                    arch.reduction,
                    arch.spatial_kernel,
                    rng,
                ));
            }
        }
        let mut head = Conv3d::new(arch.channels(0), 1, 1, 1, rng);
        head.bias.value[0] = 0.5;
        Self {
            arch: arch.clone(),
            ups,
            fuses,
            attention,
            head,
        }
    }

    fn check(&self, enc: &Encoded) -> Result<(), NeuralError> {
        if enc.skips.len() != self.arch.depth {
            return Err(NeuralError::Shape(format!(
                "decoder expects {} skips, got {}",
                self.arch.depth,
                enc.skips.len()
            )));
        }
        if enc.z.channels() != self.arch.bottleneck_channels() {
            return Err(NeuralError::Shape("bottleneck channel mismatch".into()));
        }
        let mut s = enc.z.spatial();
        for l in (0..self.arch.depth).rev() {
            s = s.map(|d| 2 * d);
            let sk = &enc.skips[l];
            if sk.spatial() != s
                || sk.channels() != self.arch.channels(l)
                || sk.batch() != enc.z.batch()
            {
                return Err(NeuralError::Shape(format!(
                    "skip {l} has shape {:?}, expected spatial {:?}",
                    sk.shape, s
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, enc: &Encoded) -> Result<(TensorGrid, DecoderTrace), NeuralError> {
        self.check(enc)?;
        let mut cur = enc.z.clone();
        let mut levels = Vec::with_capacity(self.arch.depth);
        for l in (0..self.arch.depth).rev() {
            let (h, up) = self.ups[l].forward(&upsample2(&cur))?;
            let up_act = relu(h);
            let cat = concat_channels(&up_act, &enc.skips[l])?;
            let (h, fuse) = self.fuses[l].forward(&cat)?;
            let fuse_act = relu(h);
            let (out, attention) = match self.attention.get(l) {
                Some(cb) => {
                    let (o, c) = cb.forward(&fuse_act)?;
                    (o, Some(c))
                }
                None => (fuse_act.clone(), None),
            };
            cur = out;
            levels.push(DecoderLevel {
                up,
                up_act,
                fuse,
                fuse_act,
                attention,
            });
        }
        let (out, head) = self.head.forward(&cur)?;
        out.ensure_finite("decoder output")?;
        Ok((out, DecoderTrace { levels, head }))
    }

    /// Accumulates parameter gradients. Returns `(dZ, dskips)` when `need_input`.
    pub fn backward(
        &mut self,
        trace: &DecoderTrace,
        gout: &TensorGrid,
        need_input: bool,
    ) -> Option<(TensorGrid, Vec<TensorGrid>)> {
        let depth = self.arch.depth;
        let mut g = self
            .head
            .backward(&trace.head, gout, true)
            .expect("input grad");
        let mut gskips: Vec<Option<TensorGrid>> = vec![None; depth];
        // levels are stored deepest first; gradients flow from the head down
        for (k, lv) in trace.levels.iter().enumerate().rev() {
            let l = depth - 1 - k;
            if let (Some(cb), Some(c)) = (self.attention.get_mut(l), &lv.attention) {
                g = cb.backward(c, &g);
            }
            g = relu_backward(&lv.fuse_act, g);
            g = self.fuses[l]
                .backward(&lv.fuse, &g, true)
                .expect("input grad");
            let (g_up, g_skip) = split_channels(&g, self.arch.channels(l));
            gskips[l] = Some(g_skip);
            let g_up = relu_backward(&lv.up_act, g_up);
            let gi = self.ups[l].backward(&lv.up, &g_up, need_input || l + 1 < depth)?;
            g = upsample2_backward(&gi);
        }
        if !need_input {
            return None;
        }
        Some((
            g,
            gskips
                .into_iter()
                .map(|s| s.expect("every level visited"))
                .collect(),
        ))
    }
}

impl Parameterized for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for l in 0..self.arch.depth {
            self.ups[l].visit(&join(prefix, &format!("up{l}")), f);
            self.fuses[l].visit(&join(prefix, &format!("fuse{l}")), f);
            if let Some(a) = self.attention.get(l) {
                a.visit(&join(prefix, &format!("attention{l}")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for l in 0..self.arch.depth {
            self.ups[l].visit_mut(&join(prefix, &format!("up{l}")), f);
            self.fuses[l].visit_mut(&join(prefix, &format!("fuse{l}")), f);
            if let Some(a) = self.attention.get_mut(l) {
                a.visit_mut(&join(prefix, &format!("attention{l}")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Combined kink signature of an encoder/decoder pass.
pub fn chain_signature(enc: &EncoderTrace, dec: &DecoderTrace) -> u64 {
    let mut h = DefaultHasher::new();
    enc.kink_signature(&mut h);
    dec.kink_signature(&mut h);
    h.finish()
}
