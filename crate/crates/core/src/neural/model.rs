//! Dual-transmitter model: source/target encoders, one decoder per
//! transmitter of a pair, and the domain discriminator.

use std::io::{Read, Write};
use std::path::Path;

use super::discriminator::Discriminator;
use super::layers::{join, param_checksum, Param, Parameterized};
use super::tensor::TensorGrid;
use super::unet::{Arch, Decoder, Encoded, Encoder};
use super::NeuralError;
use crate::datasets::{GridSample, NormWindow};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTXM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which encoder feeds the decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRole {
    Source,
    Target,
}

/// Stream index: 0 is the first cell of a pair, 1 the second.
pub type Stream = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct DualTxModel {
    pub arch: Arch,
    pub norm: NormWindow,
    pub source_encoder: Encoder,
    pub target_encoder: Encoder,
    pub decoders: [Decoder; 2],
    pub discriminator: Discriminator,
}

pub const SOURCE_ENCODER: &str = "source_encoder";
pub const TARGET_ENCODER: &str = "target_encoder";
pub const DECODER_NAMES: [&str; 2] = ["decoder_i", "decoder_j"];
pub const DISCRIMINATOR: &str = "discriminator";

/// Two-channel network input (normalized value, mask) from a grid sample.
pub fn sample_tensor(x: &GridSample) -> Result<TensorGrid, NeuralError> {
    let [nx, ny, nz] = x.grid.dims;
    let p = nx * ny * nz;
    if x.values.len() != p || x.mask.len() != p {
        return Err(NeuralError::Shape(format!(
            "grid sample holds {}/{} values for {} voxels",
            x.values.len(),
            x.mask.len(),
            p
        )));
    }
    let mut data = Vec::with_capacity(2 * p);
    data.extend_from_slice(&x.values);
    data.extend_from_slice(&x.mask);
    TensorGrid::from_vec([1, 2, nz, ny, nx], data)
}

impl DualTxModel {
    pub fn new(arch: Arch, norm: NormWindow, seed: u64) -> Self {
        let source_encoder = Encoder::new(&arch, &mut rng::stream(seed, "init.encoder"));
        let decoders = [
            Decoder::new(&arch, &mut rng::stream(seed, "init.decoder_i")),
            Decoder::new(&arch, &mut rng::stream(seed, "init.decoder_j")),
        ];
        let discriminator = Discriminator::new(
            arch.bottleneck_channels(),
            arch.disc_width,
            &mut rng::stream(seed, "init.discriminator"),
        );
        Self {
            target_encoder: source_encoder.clone(),
            arch,
            norm,
            source_encoder,
            decoders,
            discriminator,
        }
    }

    pub fn encoder(&self, role: EncoderRole) -> &Encoder {
        match role {
            EncoderRole::Source => &self.source_encoder,
            EncoderRole::Target => &self.target_encoder,
        }
    }

    /// Copies the source encoder into the target encoder.
    pub fn sync_target(&mut self) {
        self.target_encoder = self.source_encoder.clone();
    }

    pub fn encode(&self, role: EncoderRole, x: &GridSample) -> Result<Encoded, NeuralError> {
        Ok(self.encoder(role).forward(&sample_tensor(x)?)?.0)
    }

    pub fn decode(&self, stream: Stream, enc: &Encoded) -> Result<TensorGrid, NeuralError> {
        Ok(self.decoders[stream].forward(enc)?.0)
    }

    /// Reconstructs both cells of a pair: `x_i` through decoder i, `x_j`
    /// through decoder j, both via the chosen encoder.
    pub fn forward_dual(
        &self,
        role: EncoderRole,
        x_i: &GridSample,
        x_j: &GridSample,
    ) -> Result<(TensorGrid, TensorGrid), NeuralError> {
        if x_i.grid != x_j.grid {
            return Err(NeuralError::Shape("paired inputs must share a grid".into()));
        }
        let a = self.decode(0, &self.encode(role, x_i)?)?;
        let b = self.decode(1, &self.encode(role, x_j)?)?;
        Ok((a, b))
    }

    /// Reconstruction denormalized to dBm, voxel order of the input grid.
    pub fn predict_dbm(
        &self,
        role: EncoderRole,
        stream: Stream,
        x: &GridSample,
    ) -> Result<Vec<f64>, NeuralError> {
        let out = self.decode(stream, &self.encode(role, x)?)?;
        Ok(out.data.iter().map(|&v| self.norm.denormalize(v)).collect())
    }

    /// Parameter checksum; see [`param_checksum`].
    pub fn checksum(&self, prefixes: &[&str]) -> String {
        param_checksum(self, prefixes)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), NeuralError> {
        let desc = self.arch.descriptor();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(desc.as_bytes())?;
        w.write_all(&self.norm.lo.to_le_bytes())?;
        w.write_all(&self.norm.hi.to_le_bytes())?;
        let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
        self.visit("", &mut |name, p| {
            blocks.push((name.to_string(), p.value.clone()))
        });
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, values) in blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, building the model from its stored descriptor.
    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, NeuralError> {
        let header = read_header(r)?;
        let arch = Arch::parse_descriptor(&header.0)?;
        let mut model = DualTxModel::new(arch, header.1, 0);
        model.read_blocks(r)?;
        Ok(model)
    }

    /// Loads parameters into an existing model; the stored architecture
    /// must match this model's descriptor exactly.
    pub fn load_checkpoint(&mut self, r: &mut impl Read) -> Result<(), NeuralError> {
        let (desc, norm) = read_header(r)?;
        if desc != self.arch.descriptor() {
            return Err(NeuralError::Checkpoint(format!(
                "architecture mismatch: file has `{desc}`, model is `{}`",
                self.arch.descriptor()
            )));
        }
        self.norm = norm;
        self.read_blocks(r)
    }

    fn read_blocks(&mut self, r: &mut impl Read) -> Result<(), NeuralError> {
        let n = read_u32(r)? as usize;
        let mut expected: Vec<(String, usize)> = Vec::new();
        self.visit("", &mut |name, p| {
            expected.push((name.to_string(), p.value.len()))
        });
        if n != expected.len() {
            return Err(NeuralError::Checkpoint(format!(
                "{} parameter blocks, expected {}",
                n,
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(n);
        for (want_name, want_len) in &expected {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(NeuralError::Checkpoint(
                    "implausible block name length".into(),
                ));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NeuralError::Checkpoint("non-utf8 block name".into()))?;
            let count = read_u64(r)? as usize;
            if &name != want_name || count != *want_len {
                return Err(NeuralError::Checkpoint(format!(
                    "block `{name}` ({count} values) where `{want_name}` ({want_len} values) was expected"
                )));
            }
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFinite(format!("checkpoint block `{name}`")));
            }
            loaded.push(values);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(NeuralError::Checkpoint(
                "trailing bytes after last block".into(),
            ));
        }
        let mut it = loaded.into_iter();
        self.visit_mut("", &mut |_, p| {
            p.value = it.next().expect("block count checked");
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NeuralError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NeuralError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NeuralError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_header(r: &mut impl Read) -> Result<(String, NormWindow), NeuralError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(NeuralError::Checkpoint(
            "implausible descriptor length".into(),
        ));
    }
    let mut desc = vec![0u8; len];
    r.read_exact(&mut desc)?;
    let desc = String::from_utf8(desc)
        .map_err(|_| NeuralError::Checkpoint("non-utf8 descriptor".into()))?;
    let norm = NormWindow {
        lo: read_f64(r)?,
        hi: read_f64(r)?,
    };
    if !(norm.lo.is_finite() && norm.hi.is_finite() && norm.hi > norm.lo) {
        return Err(NeuralError::Checkpoint(
            "invalid normalization window".into(),
        ));
    }
    Ok((desc, norm))
}

impl Parameterized for DualTxModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.source_encoder.visit(&join(prefix, SOURCE_ENCODER), f);
        self.target_encoder.visit(&join(prefix, TARGET_ENCODER), f);
        for (d, n) in self.decoders.iter().zip(DECODER_NAMES) {
            d.visit(&join(prefix, n), f);
        }
        self.discriminator.visit(&join(prefix, DISCRIMINATOR), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.source_encoder
            .visit_mut(&join(prefix, SOURCE_ENCODER), f);
        self.target_encoder
            .visit_mut(&join(prefix, TARGET_ENCODER), f);
        for (d, n) in self.decoders.iter_mut().zip(DECODER_NAMES) {
            d.visit_mut(&join(prefix, n), f);
        }
        self.discriminator
            .visit_mut(&join(prefix, DISCRIMINATOR), f);
    }
}
