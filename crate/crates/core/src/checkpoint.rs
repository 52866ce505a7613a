//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"QRCK"
//! version    u32
//! meta_len   u64, then meta_len bytes of JSON (model spec, data spec, provenance)
//! count      u32, then per tensor:
//!   name_len u32, name (utf-8)
//!   role     u8   (0 weight, 1 bias)
//!   ndim     u32, then ndim x u64 dims
//!   byte_len u64, then byte_len bytes of f64 values
//!   scheme   u8   (0 none, 1 present), then bits u32 and scale f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Param, ParamRole, ParamSet};
use crate::quant::QuantScheme;
use crate::tensor::{self, Tensor};

pub const MAGIC: &[u8; 4] = b"QRCK";
pub const VERSION: u32 = 1;

/// Where a set of parameters came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Hex sha256 of the experiment config, empty if none.
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub data: Option<DataSpec>,
    pub params: ParamSet,
    /// One entry per parameter.
    pub schemes: Vec<Option<QuantScheme>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelSpec,
    data: Option<DataSpec>,
    provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: ModelSpec, params: ParamSet, provenance: Provenance) -> Self {
        let schemes = vec![None; params.len()];
        Checkpoint { model, data: None, params, schemes, provenance }
    }

    pub fn validate(&self) -> Result<()> {
        Model::new(self.model.clone())?.check_params(&self.params)?;
        if self.schemes.len() != self.params.len() {
            return Err(format_err(format!("{} schemes for {} tensors", self.schemes.len(), self.params.len())));
        }
        for s in self.schemes.iter().flatten() {
            s.validate()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&Meta {
            model: self.model.clone(),
            data: self.data.clone(),
            provenance: self.provenance.clone(),
        })
        .map_err(|e| format_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (p, scheme) in self.params.params.iter().zip(&self.schemes) {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.role {
                ParamRole::Weight => 0,
                ParamRole::Bias => 1,
            });
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(8 * p.value.numel() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match scheme {
                None => out.push(0),
                Some(s) => {
                    out.push(1);
                    out.extend_from_slice(&s.bits.to_le_bytes());
                    out.extend_from_slice(&s.scale.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let meta_len = r.len_u64("metadata")?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format_err(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        let mut schemes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| format_err("tensor name is not utf-8".into()))?;
            let role = match r.u8()? {
                0 => ParamRole::Weight,
                1 => ParamRole::Bias,
                b => return Err(format_err(format!("tensor `{name}`: unknown role tag {b}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64("dimension")).collect::<Result<Vec<_>>>()?;
            let byte_len = r.len_u64("tensor")?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if n.and_then(|n| n.checked_mul(8)) != Some(byte_len) {
                return Err(format_err(format!(
                    "tensor `{name}`: {byte_len} bytes for shape {shape:?} ({} elements)",
                    n.map_or("overflowing".to_string(), |n| n.to_string())
                )));
            }
            let data =
                r.take(byte_len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            debug_assert_eq!(tensor::numel(&shape) * 8, byte_len);
            let value = Tensor::new(shape, data)?;
            let scheme = match r.u8()? {
                0 => None,
                1 => {
                    let bits = r.u32()?;
                    let scale = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    Some(QuantScheme::symmetric(bits, scale)?)
                }
                b => return Err(format_err(format!("tensor `{name}`: unknown scheme tag {b}"))),
            };
            params.push(Param { name, role, value });
            schemes.push(scheme);
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Checkpoint {
            model: meta.model,
            data: meta.data,
            params: ParamSet { params },
            schemes,
            provenance: meta.provenance,
        };
        ck.validate()?;
        Ok(ck)
    }
}

fn format_err(detail: String) -> Error {
    Error::Format { kind: "checkpoint", detail }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err(format!("{what} length {v} does not fit in memory")))
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
