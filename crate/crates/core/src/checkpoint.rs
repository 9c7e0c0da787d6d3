//! Versioned binary checkpoints of network parameters and masks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPLBCKPT"
//! version    u32
//! step       u64
//! layers     u32
//! layer table, per weighted layer:
//!     kind u8 (0 dense, 1 conv-valid, 2 conv-same), ndim u8, dims u64 * ndim,
//!     bias length u64 (0 = no bias)
//! layer data, per weighted layer:
//!     weights f64 * size, mask bits packed LSB-first, bias f64 * len
//! velocity   u64 length (0 = absent), f64 * length
//! checksum   u64 FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Padding;
use crate::error::{Error, Result};
use crate::network::{Mask, MaskedNetwork, WeightedKind};

pub const MAGIC: &[u8; 8] = b"SPLBCKPT";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn kind_code(kind: WeightedKind) -> u8 {
    match kind {
        WeightedKind::Dense => 0,
        WeightedKind::Conv2d {
            padding: Padding::Valid,
        } => 1,
        WeightedKind::Conv2d {
            padding: Padding::Same,
        } => 2,
    }
}

/// Serializes `net` and an optional optimizer velocity (canonical order).
pub fn encode(net: &MaskedNetwork, velocity: Option<&[f64]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.step.to_le_bytes());
    out.extend_from_slice(&(net.weighted_count() as u32).to_le_bytes());
    for l in net.weighted() {
        out.push(kind_code(l.kind));
        let shape = l.weights().shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(l.bias().map_or(0, |b| b.len()) as u64).to_le_bytes());
    }
    for l in net.weighted() {
        for w in l.weights().data() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for chunk in l.mask().bits().chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    byte |= 1 << i;
                }
            }
            out.push(byte);
        }
        if let Some(b) = l.bias() {
            for v in b.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let v = velocity.unwrap_or(&[]);
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Restores parameters, masks and step into `net`, whose architecture must
/// match the checkpoint. Returns the stored velocity, if any.
pub fn decode_into(net: &mut MaskedNetwork, bytes: &[u8]) -> Result<Option<Vec<f64>>> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let step = r.u64()?;
    let layers = r.u32()? as usize;
    if layers != net.weighted_count() {
        return Err(Error::Architecture(format!(
            "checkpoint has {layers} weighted layers, network has {}",
            net.weighted_count()
        )));
    }
    let mut table = Vec::with_capacity(layers);
    for (i, l) in net.weighted().enumerate() {
        let kind = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let bias_len = r.u64()? as usize;
        if kind != kind_code(l.kind)
            || shape != l.weights().shape()
            || bias_len != l.bias().map_or(0, |b| b.len())
        {
            return Err(Error::Architecture(format!(
                "layer {i}: checkpoint kind {kind} shape {shape:?} bias {bias_len}"
            )));
        }
        table.push((shape, bias_len));
    }
    let mut decoded = Vec::with_capacity(layers);
    for (shape, bias_len) in table {
        let n: usize = shape.iter().product();
        let weights = r.f64s(n)?;
        let packed = r.take(n.div_ceil(8))?;
        let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let bias = r.f64s(bias_len)?;
        decoded.push((Mask::from_bits(shape, bits)?, weights, bias));
    }
    let vlen = r.u64()? as usize;
    let velocity = r.f64s(vlen)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    for (layer, (mask, weights, bias)) in net.weighted_mut().zip(decoded) {
        layer.set_mask(mask)?;
        layer.set_weights(&weights)?;
        layer.set_bias(&bias)?;
    }
    net.step = step;
    Ok((vlen > 0).then_some(velocity))
}

pub fn save_state(net: &MaskedNetwork, velocity: Option<&[f64]>, path: &Path) -> Result<()> {
    fs::write(path, encode(net, velocity))?;
    Ok(())
}

pub fn load_state(net: &mut MaskedNetwork, path: &Path) -> Result<Option<Vec<f64>>> {
    let bytes = fs::read(path)?;
    decode_into(net, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkSpec};
    use crate::sparsity::{allocate_sparsity, SparsityDistribution};

    fn random_net() -> MaskedNetwork {
        let net = build_network(&NetworkSpec::lenet5()).unwrap();
        let mut net = allocate_sparsity(net, &SparsityDistribution::uniform(0.7), &mut crate::rng::seeded(4)).unwrap();
        let p: Vec<f64> = (0..net.param_count()).map(|i| ((i * 7919) as f64).sin()).collect();
        net.set_params(&p).unwrap();
        net.step = 1234;
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = random_net();
        let vel: Vec<f64> = (0..net.param_count()).map(|i| i as f64 * 1e-3).collect();
        let bytes = encode(&net, Some(&vel));
        let mut other = build_network(&NetworkSpec::lenet5()).unwrap();
        let v = decode_into(&mut other, &bytes).unwrap();
        assert_eq!(other, net);
        assert_eq!(v.unwrap(), vel);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let bytes = encode(&random_net(), None);
        let mut mlp = build_network(&NetworkSpec::mlp(&[784, 10], true)).unwrap();
        assert!(matches!(decode_into(&mut mlp, &bytes), Err(Error::Architecture(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&random_net(), None);
        let mut net = build_network(&NetworkSpec::lenet5()).unwrap();
        bytes[40] ^= 0x10;
        assert!(matches!(decode_into(&mut net, &bytes), Err(Error::Checkpoint(_))));
        let mut bytes = encode(&random_net(), None);
        bytes[0] = b'X';
        assert!(decode_into(&mut net, &bytes).is_err());
        let mut bytes = encode(&random_net(), None);
        bytes[8] = 9;
        let n = bytes.len() - 8;
        let sum = fnv1a(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(decode_into(&mut net, &bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }
}
