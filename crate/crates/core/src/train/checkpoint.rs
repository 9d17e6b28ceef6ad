//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RBDLCKPT"
//! version    u32
//! config     u64      FNV-1a hash of the canonical experiment config
//! seed       u64      base RNG seed of the run
//! rng_pos    u128     ChaCha word position at capture time
//! adam_t     u64      Adam step counter
//! 4 sections           params, buffers, adam_m, adam_v
//! ```
//!
//! Each section is a `u32` entry count followed by entries of
//! `u16 path-length, path bytes, u8 rank, u64 dims..., f64 values...`.
//! Floats are stored by bit pattern, so a round trip is exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RBDLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to restore a training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub adam_t: u64,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

/// 64-bit FNV-1a over raw bytes; used for config identity hashes and for
/// deriving per-trial seeds from override strings.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_hash.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.rng_word_pos.to_le_bytes())?;
    w.write_all(&ckpt.adam_t.to_le_bytes())?;
    for section in [&ckpt.params, &ckpt.buffers, &ckpt.adam_m, &ckpt.adam_v] {
        write_section(&mut w, section)?;
    }
    w.flush()?;
    Ok(())
}

fn write_section<W: Write>(
    w: &mut W,
    map: &BTreeMap<String, Tensor>,
) -> Result<(), CheckpointError> {
    let count = u32::try_from(map.len())
        .map_err(|_| CheckpointError::Malformed("too many entries for one section".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (path, tensor) in map {
        let name = path.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("path too long: {path}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| CheckpointError::Malformed(format!("rank too large at {path}")))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version > CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let config_hash = read_u64(&mut r)?;
    let seed = read_u64(&mut r)?;
    let rng_word_pos = read_u128(&mut r)?;
    let adam_t = read_u64(&mut r)?;
    let params = read_section(&mut r)?;
    let buffers = read_section(&mut r)?;
    let adam_m = read_section(&mut r)?;
    let adam_v = read_section(&mut r)?;
    Ok(Checkpoint {
        config_hash,
        seed,
        rng_word_pos,
        adam_t,
        params,
        buffers,
        adam_m,
        adam_v,
    })
}

fn read_section<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let count = read_u32(r)?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let path = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("non-UTF-8 parameter path".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut elems: usize = 1;
        for _ in 0..rank[0] {
            let dim = read_u64(r)? as usize;
            elems = elems.checked_mul(dim).ok_or_else(|| {
                CheckpointError::Malformed(format!("shape overflow in {path}"))
            })?;
            shape.push(dim);
        }
        let mut data = Vec::with_capacity(elems);
        for _ in 0..elems {
            data.push(f64::from_bits(read_u64(r)?));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{path}: {e}")))?;
        if map.insert(path.clone(), tensor).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry {path}")));
        }
    }
    Ok(map)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128<R: Read>(r: &mut R) -> Result<u128, CheckpointError> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}
