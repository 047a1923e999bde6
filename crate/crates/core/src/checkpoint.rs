//! Model checkpoints.
//!
//! Layout: the magic `KWMCKPT1`, a length-prefixed text block holding the
//! model configuration as flat key-value lines (plus any extra keys the
//! caller appends, e.g. the dataset task), a manifest of (name, dtype, shape)
//! entries, then the raw little-endian f32 payloads in manifest order.
//! Loading rebuilds the model from the embedded configuration and validates
//! every name and shape against it.

use crate::config::{model_from_kv, model_to_kv, parse_kv};
use crate::error::{Error, Result};
use crate::model::KwmModel;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KWMCKPT1";
const DTYPE_F32: u8 = 0;

/// Writes the model's parameters and configuration. `extra` key-value pairs
/// are appended to the config text block and returned verbatim by [`load`].
pub fn save(path: &Path, model: &KwmModel, extra: &[(String, String)]) -> Result<()> {
    let mut config_text = String::new();
    for (k, v) in model_to_kv(&model.cfg) {
        config_text.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in extra {
        config_text.push_str(&format!("{k} = {v}\n"));
    }

    let params = model.parameters();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        let shape = p.shape();
        out.push(shape.len() as u8);
        for &d in &shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in &params {
        for &v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, rebuilding the model from the embedded configuration.
/// Every manifest entry must match a parameter of the constructed model by
/// name and shape, and every model parameter must be covered.
pub fn load(path: &Path) -> Result<(KwmModel, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::Format {
            offset: 12,
            msg: "config block is not UTF-8".into(),
        })?
        .to_string();
    let kv = parse_kv(&config_text)?;
    let cfg = model_from_kv(&kv)?;
    let model = KwmModel::new(&cfg, 0)?;

    let n_params = cur.u32()? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format {
                offset: cur.pos as u64,
                msg: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                offset: cur.pos as u64,
                msg: format!("unsupported dtype {dtype} for `{name}`"),
            });
        }
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        manifest.push((name, shape));
    }

    let params = model.parameters();
    let by_name: BTreeMap<&str, &crate::tensor::Parameter> =
        params.iter().map(|p| (p.name(), p)).collect();
    if manifest.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, model expects {}",
            manifest.len(),
            params.len()
        )));
    }
    for (name, shape) in &manifest {
        let param = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Data(format!("checkpoint parameter `{name}` not in model"))
        })?;
        if &param.shape() != shape {
            return Err(Error::Data(format!(
                "shape mismatch for `{name}`: checkpoint {shape:?}, model {:?}",
                param.shape()
            )));
        }
    }
    for (name, shape) in &manifest {
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        by_name[name.as_str()].set_value(crate::tensor::Tensor::from_vec(shape, data)?);
    }

    let mut extras = BTreeMap::new();
    let model_keys: Vec<String> = model_to_kv(&cfg).into_iter().map(|(k, _)| k).collect();
    for (k, v) in kv {
        if !model_keys.contains(&k) {
            extras.insert(k, v);
        }
    }
    Ok((model, extras))
}
