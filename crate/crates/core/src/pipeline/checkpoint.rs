//! Binary checkpoint of a meta-trained adaptation policy.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "ADSIMCKP"
//! version      u32
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32      over the payload
//! ```
//!
//! The payload holds the config as length-prefixed JSON, the reward map
//! (u8 kind, f64 constant), the seed (u64), the online and target networks,
//! and the library. A network is a u32 count of sub-networks (trunk, value
//! head, then one per branch); each sub-network is a u32 layer count followed
//! by per-layer `u32 inputs, u32 outputs, u8 relu, weights, bias` with
//! weights row-major `outputs × inputs`. A library entry is
//! `u32 dims, mean, stddev, policy mean, policy stddev, 8 gain entries,
//! u64 budget, u32 reuse count, u8 failed`.

use std::path::Path;

use thiserror::Error;

use super::{DistLibrary, MetaConfig};
use crate::adaptrl::{BdqNet, Dense, Mlp};
use crate::numerics::Matrix;
use crate::pendulum::RewardMap;
use crate::simdist::SimParamDist;
use crate::taskpolicy::TaskPolicy;

pub const MAGIC: &[u8; 8] = b"ADSIMCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MetaConfig,
    pub reward_map: RewardMap,
    pub seed: u64,
    pub online: BdqNet,
    pub target: BdqNet,
    pub library: DistLibrary,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint payload: {0}")]
    Malformed(String),
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut p = Vec::new();
    let json = serde_json::to_vec(&ck.config).expect("config serializes");
    put_u32(&mut p, json.len() as u32);
    p.extend_from_slice(&json);
    let (kind, constant) = match ck.reward_map {
        RewardMap::Relative { sharpness } => (0u8, sharpness),
        RewardMap::Absolute { j_scale } => (1u8, j_scale),
    };
    p.push(kind);
    put_f64(&mut p, constant);
    put_u64(&mut p, ck.seed);
    put_net(&mut p, &ck.online);
    put_net(&mut p, &ck.target);
    put_u64(&mut p, ck.library.len() as u64);
    for e in ck.library.entries() {
        put_u32(&mut p, e.dist.mean().len() as u32);
        put_f64s(&mut p, e.dist.mean());
        put_f64s(&mut p, e.dist.stddev());
        put_f64s(&mut p, e.policy.synthesized_for.mean());
        put_f64s(&mut p, e.policy.synthesized_for.stddev());
        put_f64s(&mut p, e.policy.gain.as_slice());
        put_u64(&mut p, e.policy.budget_used);
        put_u32(&mut p, e.policy.reuse_count);
        p.push(u8::from(e.policy.failed));
    }

    let mut out = Vec::with_capacity(HEADER_LEN + p.len() + 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, p.len() as u64);
    let crc = crc32fast::hash(&p);
    out.extend_from_slice(&p);
    put_u32(&mut out, crc);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = HEADER_LEN.saturating_add(len).saturating_add(4);
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..expected].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if bytes.len() != expected {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }

    let mut r = Reader { buf: payload };
    let json_len = r.u32()? as usize;
    let config: MetaConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let kind = r.u8()?;
    let constant = r.f64()?;
    let reward_map = match kind {
        0 => RewardMap::Relative {
            sharpness: constant,
        },
        1 => RewardMap::Absolute { j_scale: constant },
        k => {
            return Err(CheckpointError::Malformed(format!(
                "unknown reward map kind {k}"
            )))
        }
    };
    let seed = r.u64()?;
    let online = r.net()?;
    let target = r.net()?;
    let count = r.u64()? as usize;
    let mut library = DistLibrary::new();
    for _ in 0..count {
        let dims = r.u32()? as usize;
        if dims != config.space.dims() {
            return Err(CheckpointError::Malformed(format!(
                "library entry with {dims} dimensions"
            )));
        }
        let bad = |e: crate::simdist::SpaceError| CheckpointError::Malformed(e.to_string());
        let dist = SimParamDist::new(&config.space, r.f64s(dims)?, r.f64s(dims)?).map_err(bad)?;
        let synthesized_for =
            SimParamDist::new(&config.space, r.f64s(dims)?, r.f64s(dims)?).map_err(bad)?;
        let gain = Matrix::from_vec(2, 4, r.f64s(8)?);
        let budget_used = r.u64()?;
        let reuse_count = r.u32()?;
        let failed = r.u8()? != 0;
        library.push(
            dist,
            TaskPolicy {
                gain,
                synthesized_for,
                budget_used,
                reuse_count,
                failed,
            },
        );
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{} unread payload bytes",
            r.buf.len()
        )));
    }
    Ok(Checkpoint {
        config,
        reward_map,
        seed,
        online,
        target,
        library,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| put_f64(out, *x));
}

fn put_mlp(out: &mut Vec<u8>, m: &Mlp) {
    put_u32(out, m.layers.len() as u32);
    for l in &m.layers {
        put_u32(out, l.inputs as u32);
        put_u32(out, l.outputs as u32);
        out.push(u8::from(l.relu));
        put_f64s(out, &l.weights);
        put_f64s(out, &l.bias);
    }
}

fn put_net(out: &mut Vec<u8>, n: &BdqNet) {
    put_u32(out, 2 + n.branch_heads.len() as u32);
    put_mlp(out, &n.trunk);
    put_mlp(out, &n.value_head);
    n.branch_heads.iter().for_each(|h| put_mlp(out, h));
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Malformed("payload ended early".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn mlp(&mut self) -> Result<Mlp, CheckpointError> {
        let count = self.u32()? as usize;
        if count == 0 {
            return Err(CheckpointError::Malformed("network without layers".into()));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let inputs = self.u32()? as usize;
            let outputs = self.u32()? as usize;
            let relu = self.u8()? != 0;
            if let Some(prev) = layers.last().map(|l: &Dense| l.outputs) {
                if prev != inputs {
                    return Err(CheckpointError::Malformed(format!(
                        "layer widths {prev} -> {inputs} do not chain"
                    )));
                }
            }
            let weights = self.f64s(inputs * outputs)?;
            let bias = self.f64s(outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
                relu,
            });
        }
        Ok(Mlp { layers })
    }

    fn net(&mut self) -> Result<BdqNet, CheckpointError> {
        let count = self.u32()? as usize;
        if count < 3 {
            return Err(CheckpointError::Malformed(format!("{count} sub-networks")));
        }
        let trunk = self.mlp()?;
        let value_head = self.mlp()?;
        let branch_heads = (0..count - 2)
            .map(|_| self.mlp())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BdqNet {
            trunk,
            value_head,
            branch_heads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::tiny_config;
    use crate::pipeline::{meta_train, MetaOutcome};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained() -> MetaOutcome {
        meta_train(&tiny_config(20), 4)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = trained().checkpoint;
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back, ck);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s: Vec<f64> = (0..crate::adaptrl::STATE_DIM)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let (a, b) = (ck.online.forward(&s), back.online.forward(&s));
            for d in 0..4 {
                for k in 0..3 {
                    assert!((a[d][k] - b[d][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let ck = trained().checkpoint;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/policy.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode(&trained().checkpoint);
        let mid = HEADER_LEN + (bytes.len() - HEADER_LEN) / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode(&trained().checkpoint);
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        match decode(&bytes) {
            Err(CheckpointError::UnsupportedVersion { found, supported }) => {
                assert_eq!(found, FORMAT_VERSION + 1);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode(&trained().checkpoint);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 10]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            decode(&bytes[..10]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            decode(b"not a checkpoint"),
            Err(CheckpointError::BadMagic)
        ));
    }
}
