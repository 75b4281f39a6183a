//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] version:u32 header_digest[32] header_len:u32 header[header_len]
//! count:u32 { name_len:u16 name kind:u8 dims:u32×4 }×count
//! f32 values of every tensor in manifest order
//! sha256 of everything above [32]
//! ```
//!
//! For network checkpoints the header is the canonical config text, so the
//! header digest identifies the architecture.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelError, Network, NetworkConfig};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HBAUNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn encode(magic: &[u8; 8], header: &str, store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(header.as_bytes()));
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.kind {
            ParamKind::Learnable => 0,
            ParamKind::Buffer => 1,
        });
        for d in p.tensor.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a tensor file, returning the header text and the tensors.
pub(crate) fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(String, ParamStore<f32>), ModelError> {
    if bytes.len() < 8 + 4 + 32 + 32 {
        return Err(ModelError::Corrupt("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != magic {
        return Err(ModelError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let digest = r.take(32)?.to_vec();
    let len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(len)?).map_err(|_| ModelError::Corrupt("header is not UTF-8".into()))?;
    if Sha256::digest(header.as_bytes()).as_slice() != digest.as_slice() {
        return Err(ModelError::Corrupt("header digest mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Learnable,
            1 => ParamKind::Buffer,
            k => return Err(ModelError::Corrupt(format!("unknown tensor kind {k} for {name}"))),
        };
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        manifest.push((name.to_string(), kind, Shape(dims)));
    }
    let mut store = ParamStore::new();
    for (name, kind, shape) in manifest {
        if store.find(&name).is_some() {
            return Err(ModelError::Corrupt(format!("duplicate tensor {name}")));
        }
        let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| ModelError::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.add(name, Tensor::from_vec(shape, data).expect("length matches shape"), kind);
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((header.to_string(), store))
}

/// Writes through a temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Contents of a network checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub store: ParamStore<f32>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path)?;
    let (header, store) = decode(&CHECKPOINT_MAGIC, &bytes)?;
    let config = NetworkConfig::from_text(&header)?;
    Ok(Checkpoint { config, store })
}

fn describe_mismatch(expected: &NetworkConfig, found: &NetworkConfig) -> String {
    expected
        .to_pairs()
        .into_iter()
        .zip(found.to_pairs())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((k, a), (_, b))| format!("  {k}: expected {a}, checkpoint has {b}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl<T: Scalar> Network<T> {
    /// Serializes the network (as f32) with its config.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&CHECKPOINT_MAGIC, &self.config().to_text(), &self.store().cast())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn load(path: &Path, expected: &NetworkConfig) -> Result<Self, ModelError> {
        let ck = read_checkpoint(path)?;
        if ck.config != *expected {
            return Err(ModelError::ConfigMismatch { detail: describe_mismatch(expected, &ck.config) });
        }
        Network::from_store(expected, ck.store.cast())
    }

    /// Loads a checkpoint with whatever config it records.
    pub fn load_any(path: &Path) -> Result<Self, ModelError> {
        let ck = read_checkpoint(path)?;
        Network::from_store(&ck.config, ck.store.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(), ParamKind::Learnable);
        s.add("b.running_var", Tensor::full(Shape::new(1, 3, 1, 1), 1.0), ParamKind::Buffer);
        s
    }

    #[test]
    fn encode_decode_round_trip() {
        let bytes = encode(&CHECKPOINT_MAGIC, "k=v\n", &sample_store());
        let (header, store) = decode(&CHECKPOINT_MAGIC, &bytes).unwrap();
        assert_eq!(header, "k=v\n");
        assert_eq!(store, sample_store());
        assert_eq!(encode(&CHECKPOINT_MAGIC, &header, &store), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&CHECKPOINT_MAGIC, "k=v\n", &sample_store());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&CHECKPOINT_MAGIC, &flipped), Err(ModelError::Corrupt(_))));
        assert!(matches!(decode(&CHECKPOINT_MAGIC, &bytes[..bytes.len() - 1]), Err(ModelError::Corrupt(_))));
        assert!(matches!(decode(b"OTHERFMT", &bytes), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&CHECKPOINT_MAGIC, "", &sample_store());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(decode(&CHECKPOINT_MAGIC, &bytes), Err(ModelError::Version { found: 7, .. })));
    }
}
