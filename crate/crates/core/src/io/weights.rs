//! `SVXW` weight container.
//!
//! ```text
//! magic      "SVXW"
//! version    u16
//! count      u32
//! directory  count x { name_len u16, name utf-8, dtype u8 (0 = f32),
//!                      ndim u8, shape ndim x u32, offset u64 }
//! payload    u64 byte length, then little-endian f32 data
//! ```
//!
//! Offsets are relative to the start of the payload. Every layer stores
//! `{layer}.weight` with shape `[K.., c_in, c_out]` and `{layer}.bias` with
//! shape `[c_out]`. An optional `{layer}.bn` of shape `[4, c_out]` holds
//! `(gamma, beta, mean, var)` of a following batch norm, folded into the
//! convolution on load.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_bytes, write_bytes};
use crate::backbone::{BackboneWeights, LayerSpec};
use crate::error::{Error, Result};
use crate::head::HeadWeights;
use crate::io::config::Config;
use crate::sparse::ConvLayer;

pub const WEIGHT_MAGIC: [u8; 4] = *b"SVXW";
pub const WEIGHT_VERSION: u16 = 1;
pub const BN_EPS: f32 = 1e-3;

const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parsed container, tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn check_magic(buf: &[u8], magic: [u8; 4]) -> Result<()> {
    if buf.len() < 4 || buf[..4] != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    Ok(())
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Serialises with payloads packed in directory order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        check_magic(buf, WEIGHT_MAGIC)?;
        let mut c = Cursor { buf, pos: 4 };
        let version = c.u16("version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let count = c.u32("tensor count")? as usize;
        let mut dir = Vec::with_capacity(count.min(4096));
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let len = c.u16("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "tensor name")?)
                .map_err(|_| Error::Malformed("tensor name is not utf-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Malformed(format!("tensor `{name}` listed twice")));
            }
            let dtype = c.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Malformed(format!("tensor `{name}` has unsupported dtype {dtype}")));
            }
            let ndim = c.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32("shape")? as usize);
            }
            let offset = c.u64("offset")?;
            dir.push((name, shape, offset));
        }
        let payload_len = c.u64("payload length")?;
        let payload = c.take(payload_len as usize, "payload")?;
        if c.pos != buf.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", buf.len() - c.pos)));
        }

        let mut spans = Vec::with_capacity(dir.len());
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&e| e <= payload.len() && offset % 4 == 0)
                .ok_or_else(|| Error::Truncated(format!("payload of tensor `{name}`")))?;
            spans.push((start, end, name.clone()));
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Malformed(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }
}

fn expect_shape(t: &NamedTensor, shape: &[usize]) -> Result<()> {
    if t.shape != shape {
        return Err(Error::ShapeMismatch(format!(
            "tensor `{}` has shape {:?}, expected {:?}",
            t.name, t.shape, shape
        )));
    }
    Ok(())
}

fn fold_bn(weights: &mut [f32], bias: &mut [f32], bn: &[f32], c_out: usize) {
    let (gamma, rest) = bn.split_at(c_out);
    let (beta, rest) = rest.split_at(c_out);
    let (mean, var) = rest.split_at(c_out);
    for o in 0..c_out {
        let scale = gamma[o] / (var[o] + BN_EPS).sqrt();
        for w in weights.iter_mut().skip(o).step_by(c_out) {
            *w *= scale;
        }
        bias[o] = (bias[o] - mean[o]) * scale + beta[o];
    }
}

fn layer_specs(cfg: &Config) -> Vec<LayerSpec> {
    let mut specs = cfg.backbone.layer_specs();
    specs.extend(cfg.head.layer_specs(cfg.backbone.out_channels()));
    specs
}

/// Builds every configured layer from the container, folding batch norms.
/// Tensors that name no configured layer are rejected.
pub fn layers_from_file(file: &WeightFile, cfg: &Config) -> Result<(BackboneWeights, HeadWeights)> {
    cfg.validate()?;
    let specs = layer_specs(cfg);
    let mut known = BTreeSet::new();
    for s in &specs {
        for suffix in ["weight", "bias", "bn"] {
            known.insert(format!("{}.{suffix}", s.name));
        }
    }
    if let Some(t) = file.tensors.iter().find(|t| !known.contains(&t.name)) {
        return Err(Error::UnknownTensor(t.name.clone()));
    }
    let mut layers = HashMap::with_capacity(specs.len());
    for s in &specs {
        let get = |suffix: &str| {
            let name = format!("{}.{suffix}", s.name);
            file.get(&name).ok_or(Error::MissingTensor(name))
        };
        let w = get("weight")?;
        expect_shape(w, &s.weight_shape())?;
        let b = get("bias")?;
        expect_shape(b, &[s.out_channels])?;
        let (mut weights, mut bias) = (w.data.clone(), b.data.clone());
        if let Ok(bn) = get("bn") {
            expect_shape(bn, &[4, s.out_channels])?;
            fold_bn(&mut weights, &mut bias, &bn.data, s.out_channels);
        }
        layers.insert(s.name.clone(), s.build(weights, bias)?);
    }
    let backbone = BackboneWeights::from_layers(&cfg.backbone, &mut layers)?;
    let head = HeadWeights::from_layers(&cfg.head, cfg.backbone.out_channels(), &mut layers)?;
    Ok((backbone, head))
}

/// Container holding `weight` and `bias` of every layer, in config order.
pub fn layers_to_file(backbone: &BackboneWeights, head: &HeadWeights, cfg: &Config) -> Result<WeightFile> {
    let specs = layer_specs(cfg);
    let mut all: Vec<&ConvLayer> = backbone.layers();
    all.push(&head.cls);
    all.extend(head.reg.iter());
    if all.len() != specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers for {} configured",
            all.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(2 * specs.len());
    for (s, l) in specs.iter().zip(all) {
        if l.weights().len() != s.weight_len() || l.bias().len() != s.out_channels {
            return Err(Error::ShapeMismatch(format!("layer {} does not match the config", s.name)));
        }
        tensors.push(NamedTensor {
            name: format!("{}.weight", s.name),
            shape: s.weight_shape(),
            data: l.weights().to_vec(),
        });
        tensors.push(NamedTensor {
            name: format!("{}.bias", s.name),
            shape: vec![s.out_channels],
            data: l.bias().to_vec(),
        });
    }
    Ok(WeightFile { tensors })
}

pub fn load_weights(path: &Path, cfg: &Config) -> Result<(BackboneWeights, HeadWeights)> {
    layers_from_file(&WeightFile::read(path)?, cfg)
}

pub fn save_weights(path: &Path, backbone: &BackboneWeights, head: &HeadWeights, cfg: &Config) -> Result<()> {
    layers_to_file(backbone, head, cfg)?.write(path)
}

/// Deterministic random weights for `seed`.
pub fn random_weights(cfg: &Config, seed: u64) -> Result<(BackboneWeights, HeadWeights)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = BackboneWeights::random(&cfg.backbone, &mut rng)?;
    let head = HeadWeights::random(&cfg.head, cfg.backbone.out_channels(), &mut rng)?;
    Ok((backbone, head))
}
