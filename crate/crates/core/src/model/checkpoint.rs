//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "HDC1" | version u16 | arch text length u32 | arch text (UTF-8)
//! | parameter count u32
//! | per parameter: name length u16 | name | rank u8 | dims u32 × rank | values f64 × Π dims
//! ```
//!
//! The arch text is [`ArchSpec::canonical_text`] followed by a `seed = N` line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ArchSpec, Model, ModelError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HDC1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: expected magic bytes \"HDC1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checkpoint truncated while reading {what} at byte {offset}: need {needed} more bytes, {available} left")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checkpoint {what} is not valid UTF-8")]
    BadText { what: &'static str },
    #[error("checkpoint architecture: {0}")]
    Arch(String),
    #[error("checkpoint parameter `{0}` is not part of the architecture")]
    UnknownParam(String),
    #[error("checkpoint parameter `{0}` appears twice")]
    DuplicateParam(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint parameter `{name}` has shape {found:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint parameter `{name}` holds a non-finite value")]
    NonFinite { name: String },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Arch(e.to_string())
    }
}

/// One stored tensor, values kept as raw little-endian bytes for bytewise comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl ParamRecord {
    pub fn values(&self) -> Vec<f64> {
        self.bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, n: usize, what: &'static str) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::BadText { what })
    }
}

fn arch_text(model: &Model) -> String {
    format!("{}seed = {}\n", model.arch().canonical_text(), model.seed())
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = arch_text(self);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let params = self.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, tensor) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &d in tensor.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (arch, seed, records) = parse(bytes)?;
        let mut model = Model::build(&arch, seed)?;
        let names = model.param_names();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut seen = vec![false; names.len()];
        let mut tensors = model.tensors_mut();
        for rec in records {
            let &i = index
                .get(rec.name.as_str())
                .ok_or_else(|| CheckpointError::UnknownParam(rec.name.clone()))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(CheckpointError::DuplicateParam(rec.name));
            }
            if tensors[i].dims() != rec.dims.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    expected: tensors[i].dims().to_vec(),
                    found: rec.dims,
                    name: rec.name,
                });
            }
            let values = rec.values();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite { name: rec.name });
            }
            tensors[i].values_mut().copy_from_slice(&values);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CheckpointError::MissingParam(names[i].clone()));
        }
        Ok(model)
    }
}

fn parse(bytes: &[u8]) -> Result<(ArchSpec, u64, Vec<ParamRecord>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = &bytes[..bytes.len().min(4)];
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    r.pos = 4;
    let version = r.u16("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let text_len = r.u32("architecture length")? as usize;
    let text = r.text(text_len, "architecture text")?;
    let (arch, rest) = ArchSpec::parse_text(&text)?;
    let mut seed = None;
    for (k, v) in rest {
        match k.as_str() {
            "seed" => {
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| CheckpointError::Arch(format!("seed `{v}` is not an integer")))?,
                )
            }
            other => return Err(CheckpointError::Arch(format!("unknown architecture key `{other}`"))),
        }
    }
    let seed = seed.ok_or_else(|| CheckpointError::Arch("missing `seed`".into()))?;

    let count = r.u32("parameter count")? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = r.text(name_len, "parameter name")?;
        let rank = r.u8("parameter rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("parameter dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated {
                what: "parameter values",
                offset: r.pos,
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
        let bytes = r.take(n, "parameter values")?.to_vec();
        records.push(ParamRecord { name, dims, bytes });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok((arch, seed, records))
}

/// Decodes the stored tensors without building a model.
pub fn read_records(bytes: &[u8]) -> Result<Vec<ParamRecord>, CheckpointError> {
    Ok(parse(bytes)?.2)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, model.to_checkpoint_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Model::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn bytes() -> Vec<u8> {
        build_model(&ArchSpec::default(), 21).unwrap().to_checkpoint_bytes()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let m = build_model(&ArchSpec::default(), 21).unwrap();
        let a = tmp.path().join("a.hdc");
        let b = tmp.path().join("b.hdc");
        save_checkpoint(&m, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(&fs::read(&a).unwrap()[..4], b"HDC1");
    }

    #[test]
    fn header_faults_have_distinct_errors() {
        let good = bytes();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Model::from_checkpoint_bytes(&magic), Err(CheckpointError::BadMagic { .. })));
        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            Model::from_checkpoint_bytes(&version),
            Err(CheckpointError::UnsupportedVersion { found: 9, .. })
        ));
        for cut in [2, 5, 9, 40, good.len() - 1] {
            assert!(
                matches!(Model::from_checkpoint_bytes(&good[..cut]), Err(CheckpointError::Truncated { .. }) | Err(CheckpointError::BadMagic { .. })),
                "cut {cut}"
            );
        }
        assert!(matches!(Model::from_checkpoint_bytes(&good[..good.len() - 3]), Err(CheckpointError::Truncated { .. })));
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(Model::from_checkpoint_bytes(&trailing), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn shape_fault_is_reported() {
        let good = bytes();
        let records = read_records(&good).unwrap();
        assert_eq!(records[0].name, "conv.0.kernel");
        // first dim of the first record sits right after its name and rank byte
        let text_len = u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
        let dim0 = 10 + text_len + 4 + 2 + records[0].name.len() + 1;
        // [16, 2, 3] becomes [2, 16, 3]: same length, wrong shape
        let mut bad = good.clone();
        bad[dim0] = 2;
        bad[dim0 + 4] = 16;
        assert!(matches!(
            Model::from_checkpoint_bytes(&bad),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let good = bytes();
        let original = Model::from_checkpoint_bytes(&good).unwrap();
        for offset in [20, good.len() / 2, good.len() - 2] {
            let mut bad = good.clone();
            bad[offset] ^= 0x10;
            match Model::from_checkpoint_bytes(&bad) {
                Err(_) => {}
                Ok(m) => assert_ne!(m, original, "flip at {offset} went unnoticed"),
            }
        }
    }
}
