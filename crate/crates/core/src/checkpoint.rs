//! FSPM checkpoints.
//!
//! ```text
//! "FSPM" | u16 version (=1) | u32 tensor count
//! per tensor: u16 name length | ASCII name | u8 rank | rank x u32 extents | f32 payload
//! ```
//!
//! Little-endian throughout. Tensor names carry their role: `theta.*` and
//! `phi.*` are model parameters, `registry.<class>` are learned prototypes,
//! and `meta.*` hold run metadata (registry counts and momentum, the
//! embedded run configuration with its digest, the held-out class).

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{ModelParams, PHI_PREFIX, THETA_PREFIX};
use crate::objectives::{PrototypeRegistry, RegistryEntry};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FSPM";
pub const VERSION: u16 = 1;

const REGISTRY_PREFIX: &str = "registry.";
const COUNT_PREFIX: &str = "meta.registry_count.";
const MOMENTUM: &str = "meta.registry_momentum";
const CONFIG: &str = "meta.config";
const DIGEST: &str = "meta.config_digest";
const TEST_CLASS: &str = "meta.test_class";

/// Run metadata stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunMeta {
    /// Canonical JSON of the run configuration.
    pub config_json: String,
    /// SHA-256 of `config_json`, hex encoded.
    pub digest: String,
    pub test_class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub registry: PrototypeRegistry,
    pub meta: Option<RunMeta>,
}

/// Writes a raw tensor table.
pub fn encode_table(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !name.is_ascii() || name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!("tensor name {name:?} is not short ASCII")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::CorruptTable(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Reads a raw tensor table.
pub fn decode_table(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { what: "magic" });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .ok()
            .filter(|s| s.is_ascii() && !s.is_empty())
            .ok_or_else(|| FormatError::CorruptTable("tensor name is not ASCII".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(FormatError::CorruptTable(format!("{name}: rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n > 0)
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| FormatError::CorruptTable(format!("{name}: bad extents {shape:?}")))?;
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::CorruptTable(e.to_string()))?;
        if out.iter().any(|(n, _): &(String, Tensor)| n == &name) {
            return Err(FormatError::CorruptTable(format!("duplicate tensor {name}")));
        }
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::CorruptTable(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(vec![bytes.len().max(1)], if bytes.is_empty() {
        vec![0.0]
    } else {
        bytes.iter().map(|&b| b as f32).collect()
    })
    .expect("rank-1")
}

fn tensor_bytes(name: &str, t: &Tensor) -> Result<Vec<u8>, FormatError> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(FormatError::CorruptTable(format!("{name}: non-byte value {v}")))
            }
        })
        .collect()
}

impl Checkpoint {
    pub fn to_table(&self) -> Vec<(String, Tensor)> {
        let mut table: Vec<(String, Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (k, e) in self.registry.iter() {
            let t = Tensor::new(vec![e.prototype.len()], e.prototype.clone()).expect("rank-1");
            table.push((format!("{REGISTRY_PREFIX}{k}"), t));
        }
        for (k, e) in self.registry.iter() {
            table.push((format!("{COUNT_PREFIX}{k}"), Tensor::scalar(e.count as f32)));
        }
        table.push((MOMENTUM.to_string(), Tensor::scalar(self.registry.momentum())));
        if let Some(meta) = &self.meta {
            table.push((CONFIG.to_string(), bytes_tensor(meta.config_json.as_bytes())));
            table.push((DIGEST.to_string(), bytes_tensor(meta.digest.as_bytes())));
            table.push((TEST_CLASS.to_string(), Tensor::scalar(meta.test_class as f32)));
        }
        table
    }

    pub fn from_table(table: Vec<(String, Tensor)>, input_size: Option<[usize; 2]>) -> Result<Self> {
        let mut params = Vec::new();
        let mut registry = PrototypeRegistry::new(0.9);
        let mut counts = Vec::new();
        let mut protos = Vec::new();
        let mut config = None;
        let mut digest = None;
        let mut test_class = None;
        for (name, t) in table {
            if name.starts_with(THETA_PREFIX) || name.starts_with(PHI_PREFIX) {
                params.push((name, t));
            } else if let Some(k) = name.strip_prefix(REGISTRY_PREFIX) {
                protos.push((parse_class(&name, k)?, t));
            } else if let Some(k) = name.strip_prefix(COUNT_PREFIX) {
                counts.push((parse_class(&name, k)?, t.item() as u64));
            } else if name == MOMENTUM {
                registry = PrototypeRegistry::new(t.item());
            } else if name == CONFIG {
                config = Some(tensor_bytes(&name, &t)?);
            } else if name == DIGEST {
                digest = Some(tensor_bytes(&name, &t)?);
            } else if name == TEST_CLASS {
                test_class = Some(t.item() as u8);
            } else {
                return Err(FormatError::CorruptTable(format!("unexpected tensor {name}")).into());
            }
        }
        for (k, t) in protos {
            let count = counts
                .iter()
                .find(|(c, _)| *c == k)
                .map(|(_, n)| *n)
                .ok_or_else(|| FormatError::CorruptTable(format!("no count for registry class {k}")))?;
            registry.insert(
                k,
                RegistryEntry {
                    prototype: t.into_data(),
                    count,
                },
            );
        }
        let meta = match (config, digest, test_class) {
            (Some(c), Some(d), Some(k)) => {
                let text = |b: Vec<u8>| {
                    String::from_utf8(b).map_err(|_| FormatError::CorruptTable("metadata is not UTF-8".into()))
                };
                Some(RunMeta {
                    config_json: text(c)?,
                    digest: text(d)?,
                    test_class: k,
                })
            }
            (None, None, None) => None,
            _ => return Err(FormatError::CorruptTable("incomplete run metadata".into()).into()),
        };
        let input_size = input_size
            .or_else(|| meta.as_ref().and_then(|m| input_size_from_config(&m.config_json)))
            .unwrap_or([64, 64]);
        let params = ModelParams::from_named(params, input_size)
            .map_err(|e| FormatError::CorruptTable(e.to_string()))?;
        Ok(Self {
            params,
            registry,
            meta,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_table(&self.to_table())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_table(decode_table(bytes)?, None)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn input_size_from_config(json: &str) -> Option<[usize; 2]> {
    let v: serde_json::Value = serde_json::from_str(json).ok()?;
    let size = v.get("model")?.get("input_size")?.as_array()?;
    Some([size.first()?.as_u64()? as usize, size.get(1)?.as_u64()? as usize])
}

fn parse_class(name: &str, s: &str) -> Result<u8, FormatError> {
    s.parse()
        .ok()
        .filter(|&k| k > 0)
        .ok_or_else(|| FormatError::CorruptTable(format!("bad class id in {name}")))
}

pub fn save_checkpoint(params: &ModelParams, registry: &PrototypeRegistry, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        registry: registry.clone(),
        meta: None,
    }
    .write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, PrototypeRegistry)> {
    let c = Checkpoint::read(path)?;
    Ok((c.params, c.registry))
}
