//! Weight archives: model config plus every named tensor, CRC32-terminated.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MNWT" | u32 version | u32 config_len | config (TOML, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | payload
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Network};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::data::Reader;

pub const MAGIC: &[u8; 4] = b"MNWT";
pub const VERSION: u32 = 1;

/// Serializes a network to bytes.
pub fn to_bytes<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    if !net.all_finite() {
        return Err(Error::NonFinite("network parameters"));
    }
    let config = net.spec.to_toml()?;
    let tensors = net.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        let dims = trim_dims(t.shape());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Drops trailing unit axes so vectors are rank 1 and matrices rank 2.
fn trim_dims(shape: [usize; 4]) -> Vec<usize> {
    let mut rank = 4;
    while rank > 1 && shape[rank - 1] == 1 {
        rank -= 1;
    }
    shape[..rank].to_vec()
}

/// Parses an archive, rebuilding the network from its embedded config.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("archive of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a weight archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader::new(&body[8..]);
    let config_len = r.u32()? as usize;
    let config = std::str::from_utf8(r.take(config_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let spec = ModelSpec::from_toml(config)?;
    let mut net = Network::<T>::build(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;

    let count = r.u32()? as usize;
    let mut slots = net.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::SpecMismatch(format!("archive has {count} tensors, model has {}", slots.len())));
    }
    for (expected, slot) in slots.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != expected.as_str() {
            return Err(Error::SpecMismatch(format!("expected tensor {expected}, found {name}")));
        }
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DType {
                expected: T::DTYPE.name(),
                found: dtype.name(),
            });
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("{name}: rank {rank} out of range")));
        }
        let mut shape = [1usize; 4];
        for d in shape.iter_mut().take(rank) {
            *d = usize::try_from(r.u64()?).map_err(|_| Error::Format(format!("{name}: dimension overflow")))?;
        }
        if shape != slot.shape() {
            return Err(Error::SpecMismatch(format!("{name}: shape {:?}, model expects {:?}", shape, slot.shape())));
        }
        let payload = r.take(slot.len() * dtype.size())?;
        let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        **slot = Tensor::new(shape, data)?;
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes before checksum", r.remaining())));
    }
    drop(slots);
    if !net.all_finite() {
        return Err(Error::NonFinite("archived parameters"));
    }
    Ok(net)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    from_bytes(&fs::read(path)?)
}
