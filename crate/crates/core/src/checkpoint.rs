//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"STAG" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f32 × prod(dims) )
//! ```
//!
//! A model file holds every parameter under its own name, plus `norm.mean`,
//! `norm.std` and `meta.config` (the `key=value` config text, one byte per
//! f32).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelConfig, Param};

pub const MAGIC: &[u8; 4] = b"STAG";
pub const VERSION: u32 = 1;

const CONFIG_KEY: &str = "meta.config";
const MEAN_KEY: &str = "norm.mean";
const STD_KEY: &str = "norm.std";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Writes named tensors in the order given.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Param)]) -> Result<()> {
    let io = |e: std::io::Error| format_err(format!("write failed: {e}"));
    let count = u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, p) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("name too long: {name}")))?;
        let rank = u8::try_from(p.shape.len()).map_err(|_| format_err(format!("rank too high: {name}")))?;
        if p.shape.iter().product::<usize>() != p.data.len() {
            return Err(format_err(format!("`{name}`: shape {:?} does not hold {} values", p.shape, p.data.len())));
        }
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| format_err(format!("dim too large: {name}")))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| format_err(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every tensor; trailing bytes are an error.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Param)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected \"STAG\"")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not utf-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(format!("`{name}`: size overflow")))?;
        let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| format_err("size overflow"))?];
        read_exact(&mut r, &mut bytes, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Param { shape, data }));
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(out),
        Ok(_) => Err(format_err("trailing bytes after last tensor")),
        Err(e) => Err(format_err(format!("read failed: {e}"))),
    }
}

fn vector(data: Vec<f32>) -> Param {
    Param {
        shape: vec![data.len()],
        data,
    }
}

/// Serializes a model to bytes.
pub fn model_to_bytes(model: &ForecastModel) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Param)> = model.params.iter().map(|(k, p)| (k.clone(), p.clone())).collect();
    let text = model.config.to_text();
    tensors.push((CONFIG_KEY.into(), vector(text.bytes().map(f32::from).collect())));
    if let Some(s) = &model.stats {
        tensors.push((MEAN_KEY.into(), vector(s.mean.clone())));
        tensors.push((STD_KEY.into(), vector(s.std.clone())));
    }
    let mut buf = Vec::new();
    write_tensors(&mut buf, &tensors)?;
    Ok(buf)
}

/// Rebuilds a model; every parameter the config implies must be present
/// with the expected shape, and nothing else.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ForecastModel> {
    let mut tensors: BTreeMap<String, Param> = BTreeMap::new();
    for (k, p) in read_tensors(bytes)? {
        if tensors.insert(k.clone(), p).is_some() {
            return Err(format_err(format!("duplicate tensor `{k}`")));
        }
    }
    let cfg = tensors
        .remove(CONFIG_KEY)
        .ok_or_else(|| format_err(format!("missing `{CONFIG_KEY}`")))?;
    let text: Vec<u8> = cfg
        .data
        .iter()
        .map(|&v| u8::try_from(v as u32).ok().filter(|_| v.fract() == 0.0))
        .collect::<Option<_>>()
        .ok_or_else(|| format_err("config bytes are not in 0..=255"))?;
    let text = String::from_utf8(text).map_err(|_| format_err("config is not utf-8"))?;
    let mut config = ModelConfig::default();
    config
        .apply_text(&text)
        .map_err(|e| format_err(format!("stored config: {e}")))?;
    let mut model = ForecastModel::new(config).map_err(|e| format_err(format!("stored config: {e}")))?;

    model.stats = match (tensors.remove(MEAN_KEY), tensors.remove(STD_KEY)) {
        (Some(m), Some(s)) if m.data.len() == model.config.nodes && s.data.len() == model.config.nodes => {
            Some(NormStats {
                mean: m.data,
                std: s.data,
            })
        }
        (None, None) => None,
        _ => return Err(format_err("normalization stats are incomplete or mis-sized")),
    };

    for (name, slot) in model.params.iter_mut() {
        let p = tensors
            .remove(name)
            .ok_or_else(|| format_err(format!("missing parameter `{name}`")))?;
        if p.shape != slot.shape {
            return Err(format_err(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                p.shape, slot.shape
            )));
        }
        *slot = p;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format_err(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &ForecastModel) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ForecastModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
