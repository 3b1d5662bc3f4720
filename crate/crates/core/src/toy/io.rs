//! `TOYC` checkpoint files: magic, version, config block, checkpoint meta,
//! then every parameter tensor as little-endian f32 in
//! [`ToyCheckpoint::tensors`] order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::model::{CheckpointMeta, ToyCheckpoint, ToyConfig};
use crate::error::{Error, Result};
use crate::store::Stage;

pub const TOY_MAGIC: [u8; 4] = *b"TOYC";
pub const TOY_VERSION: u32 = 1;
// magic, version, 6 × u32 config, u64 seed, u32 stage, u64 tokens, u64 step
const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 8 + 4 + 8 + 8;

pub(crate) fn stage_code(stage: Stage) -> u32 {
    match stage {
        Stage::Pretrain => 0,
        Stage::Sft => 1,
        Stage::Rlhf => 2,
        Stage::Toy => 3,
    }
}

pub(crate) fn stage_from_code(code: u32) -> Option<Stage> {
    [Stage::Pretrain, Stage::Sft, Stage::Rlhf, Stage::Toy].get(code as usize).copied()
}

/// Parameter count implied by a config, checked for overflow before
/// anything is allocated.
fn param_count(c: &ToyConfig) -> Option<u64> {
    let (v, d, l, s) = (c.vocab_size as u64, c.hidden_size as u64, c.n_layers as u64, c.max_seq as u64);
    let h = d.checked_mul(c.mlp_ratio as u64)?;
    let block = d
        .checked_mul(d)?
        .checked_mul(4)?
        .checked_add(d.checked_mul(h)?.checked_mul(2)?)?
        .checked_add(4 * d + h)?;
    let n = v
        .checked_mul(d)?
        .checked_mul(2)?
        .checked_add(s.checked_mul(d)?)?
        .checked_add(block.checked_mul(l)?)?
        .checked_add(2 * d)?;
    // the payload size in bytes must fit too
    n.checked_mul(4)?;
    Some(n)
}

pub fn write_checkpoint(ckpt: &ToyCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let c = &ckpt.config;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(&TOY_MAGIC)?;
    out.write_all(&TOY_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.hidden_size, c.n_layers, c.n_heads, c.max_seq, c.mlp_ratio] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;
    out.write_all(&stage_code(ckpt.meta.stage).to_le_bytes())?;
    out.write_all(&ckpt.meta.training_tokens.to_le_bytes())?;
    out.write_all(&ckpt.meta.step.to_le_bytes())?;
    for t in ckpt.tensors() {
        for &v in t {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ToyCheckpoint> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = file.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < 4 || header[..4] != TOY_MAGIC {
        return Err(format_err(path, "bad magic (expected TOYC)"));
    }
    if got < HEADER_LEN {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(header[at..at + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != TOY_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: TOY_VERSION,
        });
    }
    let dims: Vec<usize> = (0..6).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let config = ToyConfig {
        vocab_size: dims[0],
        hidden_size: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq: dims[4],
        mlp_ratio: dims[5],
        seed: u64_at(32),
    };
    config.validate().map_err(|e| format_err(path, e.to_string()))?;
    let stage = stage_from_code(u32_at(40)).ok_or_else(|| format_err(path, format!("unknown stage code {}", u32_at(40))))?;
    let meta = CheckpointMeta {
        stage,
        training_tokens: u64_at(44),
        step: u64_at(52),
    };

    let n_params = param_count(&config).ok_or_else(|| format_err(path, "declared shapes overflow"))?;
    let expected = HEADER_LEN as u64 + 4 * n_params;
    if actual != expected {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    let mut ckpt = ToyCheckpoint::zeros(&config);
    let mut payload = vec![0u8; 4 * n_params as usize];
    file.read_exact(&mut payload)?;
    let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    for t in ckpt.tensors_mut() {
        for (dst, src) in t.iter_mut().zip(&mut values) {
            *dst = src;
        }
    }
    ckpt.meta = meta;
    if !ckpt.is_finite() {
        return Err(format_err(path, "non-finite parameter"));
    }
    Ok(ckpt)
}

/// Rounds every parameter to f32 precision, matching what a write/read
/// cycle yields.
pub fn round_to_f32(ckpt: &mut ToyCheckpoint) {
    for t in ckpt.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ToyCheckpoint {
        let mut c = ToyCheckpoint::init_random(&ToyConfig::new(9, 8, 2, 2, 6, 4)).unwrap();
        c.meta = CheckpointMeta {
            stage: Stage::Sft,
            step: 77,
            training_tokens: 123_456,
        };
        c
    }

    #[test]
    fn param_count_matches_tensors() {
        let c = sample();
        assert_eq!(param_count(&c.config), Some(c.n_params() as u64));
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toyc");
        let mut c = sample();
        write_checkpoint(&c, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        round_to_f32(&mut c);
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toyc");
        write_checkpoint(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Truncation { .. })));
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Truncation { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Version { found: 9, .. })));

        let mut bad = bytes.clone();
        bad[20] = 3; // n_heads = 3 does not divide 8
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));

        let mut bad = bytes;
        let at = bad.len() - 4;
        bad[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
