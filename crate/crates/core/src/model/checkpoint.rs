//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 version, 32-byte config digest, u64 step,
//! u64 total steps, 32-byte RNG seed, u128 RNG stream position, u32 record
//! count; then per record a u32 name length, the UTF-8 name, four u32 dims
//! and the little-endian f32 payload. Save followed by load is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor4D;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"PDLCKPT\0";
pub const CKPT_VERSION: u32 = 1;

/// Everything a run needs to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub digest: [u8; 32],
    pub step: u64,
    pub total_steps: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Section-prefixed named tensors (e.g. `online/enc.stage0.down.w`).
    pub tensors: Vec<(String, Tensor4D)>,
}

pub fn save_checkpoint(data: &CheckpointData, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&data.digest)?;
    f.write_all(&data.step.to_le_bytes())?;
    f.write_all(&data.total_steps.to_le_bytes())?;
    f.write_all(&data.rng_seed)?;
    f.write_all(&data.rng_word_pos.to_le_bytes())?;
    f.write_all(&(data.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &data.tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        let (n, c, h, w) = t.shape();
        for d in [n, c, h, w] {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(Error::format(
                path,
                bytes.len() as u64,
                format!("truncated checkpoint: need {} more bytes", *pos + n - bytes.len()),
            ));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::format(path, 0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {version} unsupported (expected {CKPT_VERSION})"
        )));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(take(&mut pos, 32)?);
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let total_steps = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(take(&mut pos, 32)?);
    let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name_at = pos as u64;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format(path, name_at, "record name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let numel = dims.iter().product::<usize>();
        let payload = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor4D::from_vec(dims[0], dims[1], dims[2], dims[3], data)?));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, pos as u64, "trailing bytes after last record"));
    }
    Ok(CheckpointData {
        digest,
        step,
        total_steps,
        rng_seed,
        rng_word_pos,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(3);
        let data = CheckpointData {
            digest: [7u8; 32],
            step: 1234,
            total_steps: 2000,
            rng_seed: [9u8; 32],
            rng_word_pos: 0x1234_5678_9abc_def0,
            tensors: vec![
                ("online/a.w".into(), Tensor4D::rand_uniform(&mut rng, 2, 3, 3, 3, -1.0, 1.0)),
                ("opt_m/a.w".into(), Tensor4D::rand_uniform(&mut rng, 2, 3, 3, 3, -1.0, 1.0)),
            ],
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&data, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(back, data);
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&p).is_err());
        std::fs::write(&p, &CKPT_MAGIC[..]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
