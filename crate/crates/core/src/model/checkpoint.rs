//! Single-file binary parameter checkpoint with an embedded config manifest.
//!
//! Layout (little-endian):
//! `b"MARSNET\0"`, `u32` version, `u32` manifest length, manifest (TOML of
//! [`ModelConfig`]), `u32` parameter count, then per parameter: `u16` name
//! length, name, `u8` kind, 4 × `u32` shape, `f64` data; then `u32` running-stat
//! count and per entry: `u16` name length, name, `u32` channels, means, variances.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::net::ModelParams;
use super::params::{ParamEntry, ParamKind, ParamStore, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MARSNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Kernel => 0,
        ParamKind::Bias => 1,
        ParamKind::NormScale => 2,
        ParamKind::NormShift => 3,
    }
}

fn kind_from(code: u8) -> Option<ParamKind> {
    Some(match code {
        0 => ParamKind::Kernel,
        1 => ParamKind::Bias,
        2 => ParamKind::NormScale,
        3 => ParamKind::NormShift,
        _ => return None,
    })
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let manifest = params.config.to_toml();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let put_name = |out: &mut Vec<u8>, name: &str| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    };
    out.extend_from_slice(&(params.store.params.len() as u32).to_le_bytes());
    for p in &params.store.params {
        put_name(&mut out, &p.name);
        out.push(kind_code(p.kind));
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.store.running.len() as u32).to_le_bytes());
    for r in &params.store.running {
        put_name(&mut out, &r.name);
        out.extend_from_slice(&(r.mean.len() as u32).to_le_bytes());
        for v in r.mean.iter().chain(&r.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated checkpoint".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn name(&mut self) -> std::result::Result<String, String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a model checkpoint".into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mlen = c.u32()? as usize;
    let manifest = std::str::from_utf8(c.take(mlen)?).map_err(|e| e.to_string())?;
    let config = ModelConfig::from_toml(manifest).map_err(|e| e.to_string())?;
    let mut store = ParamStore::default();
    for _ in 0..c.u32()? {
        let name = c.name()?;
        let kind = kind_from(c.take(1)?[0]).ok_or("bad parameter kind")?;
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = c.u32()? as usize;
        }
        let data = c.f64s(shape.iter().product())?;
        store.params.push(ParamEntry {
            name,
            kind,
            value: Tensor::from_vec(shape, data),
        });
    }
    for _ in 0..c.u32()? {
        let name = c.name()?;
        let ch = c.u32()? as usize;
        let mean = c.f64s(ch)?;
        let var = c.f64s(ch)?;
        store.running.push(RunningStats { name, mean, var });
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    ModelParams::from_parts(config, store).map_err(|e| e.to_string())
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            stage_widths: vec![8, 16],
            input_spatial: 8,
            seed: 11,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let bytes = encode(&p);
        let q = decode(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.store, p.store);
        assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig {
            stage_widths: vec![8, 16],
            input_spatial: 8,
            ..Default::default()
        };
        let bytes = encode(&ModelParams::init(&cfg).unwrap());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
