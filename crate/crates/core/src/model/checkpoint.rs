//! Binary checkpoint formats.
//!
//! Both formats share one envelope, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic (`FS2T` for a backbone, `FLRA` for an adapter) |
//! | 2     | format version, `u16` (currently 1) |
//! | 4     | `feature_dim`, `u32` |
//! | 4     | `hidden_dim`, `u32` |
//! | 4     | `vocab_size`, `u32` |
//! | 4     | LoRA target mask, `u32` (enc=1, q=2, h=4, o=8) |
//! | 4     | `lora_rank`, `u32` |
//! | 8     | `lora_alpha`, IEEE-754 `f64` bit pattern as `u64` |
//!
//! The body is every tensor as row-major `f32`. Backbone order: `w_enc`,
//! `embedding`, `w_q`, `w_h`, `b_h`, `w_o`, `b_o`. Adapter order: for each
//! target in mask order, `A` then `B`.

use super::config::{LoraTarget, ModelConfig};
use super::params::{LoraAdapter, ParameterSet, Tensors};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"FS2T";
pub const ADAPTER_MAGIC: &[u8; 4] = b"FLRA";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 * 5 + 8;

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], config: &ModelConfig) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        config.feature_dim as u32,
        config.hidden_dim as u32,
        config.vocab_size as u32,
        config.targets_mask(),
        config.lora_rank as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.lora_alpha.to_bits().to_le_bytes());
}

fn write_body<T: Tensors>(out: &mut Vec<u8>, tensors: &T) {
    for t in tensors.tensors() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        self.pos = end;
        Ok(chunk)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header(what: &'static str, magic: &[u8; 4], bytes: &[u8]) -> Result<(ModelConfig, usize)> {
    let mut r = Reader { what, bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(what, format!("unsupported version {version}")));
    }
    let feature_dim = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let mask = r.u32()?;
    let rank = r.u32()? as usize;
    let alpha = f64::from_bits(r.u64()?);
    if mask & !0xf != 0 {
        return Err(Error::format(what, format!("unknown target bits in {mask:#x}")));
    }
    let targets: Vec<LoraTarget> = LoraTarget::ALL
        .into_iter()
        .filter(|t| mask & t.bit() != 0)
        .collect();
    let config = ModelConfig::new(feature_dim, hidden_dim, vocab_size, &targets, rank, alpha)
        .map_err(|e| Error::format(what, e.to_string()))?;
    debug_assert_eq!(r.pos, HEADER_LEN);
    Ok((config, r.pos))
}

fn read_body<T: Tensors>(what: &'static str, bytes: &[u8], into: &mut T) -> Result<()> {
    let expected = into.num_scalars() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            what,
            format!("body has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut chunks = bytes.chunks_exact(4);
    for t in into.tensors_mut() {
        for x in t.iter_mut() {
            let c = chunks.next().expect("length checked");
            *x = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
        }
    }
    Ok(())
}

/// Serializes a backbone checkpoint.
pub fn write_params(config: &ModelConfig, params: &ParameterSet) -> Result<Vec<u8>> {
    params.check(config)?;
    let mut out = Vec::with_capacity(HEADER_LEN + params.num_scalars() * 4);
    write_header(&mut out, PARAMS_MAGIC, config);
    write_body(&mut out, params);
    Ok(out)
}

pub fn read_params(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet)> {
    let (config, pos) = read_header("backbone checkpoint", PARAMS_MAGIC, bytes)?;
    let mut params = ParameterSet::zeros(&config);
    read_body("backbone checkpoint", &bytes[pos..], &mut params)?;
    Ok((config, params))
}

/// Serializes an adapter checkpoint.
pub fn write_adapter(config: &ModelConfig, adapter: &LoraAdapter) -> Result<Vec<u8>> {
    adapter.check(config)?;
    let mut out = Vec::with_capacity(HEADER_LEN + adapter.num_scalars() * 4);
    write_header(&mut out, ADAPTER_MAGIC, config);
    write_body(&mut out, adapter);
    Ok(out)
}

pub fn read_adapter(bytes: &[u8]) -> Result<(ModelConfig, LoraAdapter)> {
    let (config, pos) = read_header("adapter checkpoint", ADAPTER_MAGIC, bytes)?;
    let mut adapter = LoraAdapter::zeros(&config);
    read_body("adapter checkpoint", &bytes[pos..], &mut adapter)?;
    Ok((config, adapter))
}
