//! `QNN1` checkpoint container.
//!
//! ```text
//! "QNN1"
//! digest_len u32 | digest (hex, ASCII)
//! config_len u32 | canonical config text
//! count u32
//! per parameter: name_len u32 | name | dtype u8 | ndim u32 | dims u64… | data (little-endian)
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{QnnError, Result};
use crate::qlstm::AcousticModel;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const QNN1_MAGIC: &[u8; 4] = b"QNN1";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
    /// Raw little-endian bytes.
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

pub fn encode<T: Scalar>(model: &AcousticModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    out.extend_from_slice(QNN1_MAGIC);
    put_str(&mut out, &model.config.digest());
    put_str(&mut out, &model.config.canonical());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        out.push(T::PRECISION.tag());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(path: &Path, model: &AcousticModel<T>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(QnnError::format(self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| QnnError::format(at as u64, format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != QNN1_MAGIC {
        return Err(QnnError::format(0, "bad magic, expected QNN1"));
    }
    let digest = r.string("digest")?;
    let config_at = r.pos;
    let text = r.string("config")?;
    let config = ModelConfig::from_text(&text)
        .map_err(|e| QnnError::format(config_at as u64, format!("embedded config: {e}")))?;
    if config.digest() != digest {
        return Err(QnnError::format(config_at as u64, "embedded config does not match its digest"));
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let tag_at = r.pos;
        let tag = r.take(1, "dtype")?[0];
        let dtype = Precision::from_tag(tag)
            .ok_or_else(|| QnnError::format(tag_at as u64, format!("unknown dtype tag {tag}")))?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let at = r.pos;
        let n_bytes = shape
            .iter()
            .try_fold(dtype.byte_width(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| QnnError::format(at as u64, "parameter size overflows"))?;
        let raw = r.take(n_bytes, "parameter data")?.to_vec();
        params.push(ParamRecord { name, dtype, shape, raw });
    }
    if r.pos != bytes.len() {
        return Err(QnnError::format(r.pos as u64, "trailing bytes after last parameter"));
    }
    Ok(Checkpoint { digest, config, params })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Rebuilds the model and copies every parameter bit for bit.
    pub fn into_model<T: Scalar>(self) -> Result<AcousticModel<T>> {
        let mut model = AcousticModel::<T>::new(&self.config)?;
        if self.params.len() != model.store.len() {
            return Err(QnnError::format(
                0,
                format!("checkpoint has {} parameters, config implies {}", self.params.len(), model.store.len()),
            ));
        }
        for rec in self.params {
            let id = model
                .store
                .find(&rec.name)
                .ok_or_else(|| QnnError::format(0, format!("unexpected parameter '{}'", rec.name)))?;
            if rec.dtype != T::PRECISION {
                return Err(QnnError::format(0, format!("parameter '{}' has dtype {}", rec.name, rec.dtype.as_str())));
            }
            if model.store.value(id).shape() != rec.shape.as_slice() {
                return Err(QnnError::dim("checkpoint", model.store.value(id).shape(), &rec.shape));
            }
            let data = rec.raw.chunks_exact(T::PRECISION.byte_width()).map(T::read_le).collect();
            model.store.set_value(id, Tensor::new(rec.shape, data)?)?;
        }
        Ok(model)
    }
}

pub fn load<T: Scalar>(path: &Path) -> Result<AcousticModel<T>> {
    read(path)?.into_model()
}
