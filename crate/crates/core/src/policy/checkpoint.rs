//! Binary checkpoint format.
//!
//! ```text
//! "POPI1"                magic + format version
//! u32 vocab_size         little-endian
//! u32 embed_dim, hidden_dim, context_window, max_len
//! u8  role, u8 frozen
//! u64 config_hash
//! u64 param_count
//! f64 * param_count      little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Arch, Policy, Role, Vocab};
use crate::error::{PopiError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"POPI1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub vocab: Vocab,
    pub arch: Arch,
    pub role: Role,
    pub frozen: bool,
    pub config_hash: u64,
}

fn bad(msg: impl Into<String>) -> PopiError {
    PopiError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<T: Scalar>(policy: &Policy<T>, config_hash: u64) -> Vec<u8> {
    let a = policy.arch();
    let mut out = Vec::with_capacity(48 + 8 * policy.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [policy.vocab().size(), a.embed_dim, a.hidden_dim, a.context_window, a.max_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(policy.role().code());
    out.push(policy.is_frozen() as u8);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(policy.num_params() as u64).to_le_bytes());
    for p in policy.params() {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Policy<T>, CheckpointHeader)> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut u32s = [0usize; 5];
    for slot in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags).map_err(|_| bad("truncated header"))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let config_hash = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let count = u64::from_le_bytes(b8) as usize;

    let vocab = Vocab::new(u32s[0]).map_err(|e| bad(e.to_string()))?;
    let arch = Arch { embed_dim: u32s[1], hidden_dim: u32s[2], context_window: u32s[3], max_len: u32s[4] };
    arch.validate().map_err(|e| bad(e.to_string()))?;
    let role = Role::from_code(flags[0]).ok_or_else(|| bad(format!("unknown role code {}", flags[0])))?;
    if count != arch.num_params(vocab) {
        return Err(bad(format!("header declares {count} params, arch implies {}", arch.num_params(vocab))));
    }
    if r.len() != count * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", count * 8, r.len())));
    }
    let params = r.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
    let mut policy = Policy::from_params(vocab, arch, role, params).map_err(|e| bad(e.to_string()))?;
    if flags[1] != 0 {
        policy.freeze();
    }
    Ok((policy, CheckpointHeader { vocab, arch, role, frozen: flags[1] != 0, config_hash }))
}

pub fn save_checkpoint<T: Scalar>(policy: &Policy<T>, config_hash: u64, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(policy, config_hash))?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, vocab and architecture must match it exactly.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<(Vocab, Arch)>) -> Result<(Policy<T>, CheckpointHeader)> {
    let bytes = std::fs::read(path)?;
    let (policy, header) = decode_checkpoint(&bytes)?;
    if let Some((vocab, arch)) = expected {
        if header.vocab != vocab || header.arch != arch {
            return Err(bad(format!(
                "{}: header (vocab {}, {:?}) does not match expected (vocab {}, {:?})",
                path.display(),
                header.vocab.size(),
                header.arch,
                vocab.size(),
                arch
            )));
        }
    }
    Ok((policy, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch { embed_dim: 3, hidden_dim: 4, context_window: 8, max_len: 3 }
    }

    #[test]
    fn round_trip_preserves_params_and_header() {
        let mut p = Policy::<f64>::new(Vocab::new(5).unwrap(), arch(), Role::OffTheShelf, 9).unwrap();
        p.freeze();
        let bytes = encode_checkpoint(&p, 0xDEAD_BEEF);
        assert_eq!(&bytes[..5], b"POPI1");
        let (q, h) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.config_hash, 0xDEAD_BEEF);
        assert!(h.frozen);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Policy::<f64>::new(Vocab::new(5).unwrap(), arch(), Role::Generation, 1).unwrap();
        let mut bytes = encode_checkpoint(&p, 0);
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 8]).is_err());
        bytes[4] = b'2';
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(PopiError::Checkpoint(_))));
    }

    #[test]
    fn rejects_mismatched_arch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = Policy::<f64>::new(Vocab::new(5).unwrap(), arch(), Role::Generation, 1).unwrap();
        save_checkpoint(&p, 7, &path).unwrap();
        let other = Arch { hidden_dim: 5, ..arch() };
        assert!(load_checkpoint::<f64>(&path, Some((Vocab::new(5).unwrap(), other))).is_err());
        assert!(load_checkpoint::<f64>(&path, Some((Vocab::new(6).unwrap(), arch()))).is_err());
        let (q, _) = load_checkpoint::<f64>(&path, Some((Vocab::new(5).unwrap(), arch()))).unwrap();
        assert_eq!(p, q);
    }
}
