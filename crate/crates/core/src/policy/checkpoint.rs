//! Binary checkpoint: `RAPOCKPT` magic, version, SHA-256 of the config echo,
//! little-endian body, SHA-256 trailer over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, ModelConfig, PolicyParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RAPOCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full training state. Random streams are keyed by `(seed, step)`, so the
/// pair is the complete RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::CorruptCheckpoint("unexpected end of body".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::CorruptCheckpoint("size overflow".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::CorruptCheckpoint("size overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.0.extend_from_slice(&Sha256::digest(ckpt.config_echo.as_bytes()));
    let c = ckpt.params.config();
    for x in [c.vocab, c.d_model, c.d_ff, c.n_layers, c.max_len] {
        w.u64(x as u64);
    }
    w.u64(ckpt.config_echo.len() as u64);
    w.0.extend_from_slice(ckpt.config_echo.as_bytes());
    w.u64(ckpt.step);
    w.u64(ckpt.seed);
    w.f64s(&ckpt.params.data);
    w.f64s(&ckpt.reference.data);
    w.u64(ckpt.adam.t);
    w.f64s(&ckpt.adam.m);
    w.f64s(&ckpt.adam.v);
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

fn decode(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let header = MAGIC.len() + 4 + DIGEST_LEN;
    if buf.len() < header + DIGEST_LEN {
        return Err(CheckpointError::CorruptCheckpoint("file too short".into()));
    }
    if &buf[..8] != MAGIC {
        return Err(CheckpointError::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (content, trailer) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != trailer {
        return Err(CheckpointError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let config_digest = &content[12..header];
    let mut r = Reader {
        buf: content,
        at: header,
    };
    let config = ModelConfig {
        vocab: r.usize()?,
        d_model: r.usize()?,
        d_ff: r.usize()?,
        n_layers: r.usize()?,
        max_len: r.usize()?,
    };
    let echo_len = r.usize()?;
    let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|_| CheckpointError::CorruptCheckpoint("config echo is not utf-8".into()))?;
    if Sha256::digest(config_echo.as_bytes()).as_slice() != config_digest {
        return Err(CheckpointError::CorruptCheckpoint("config digest mismatch".into()));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let mut params = PolicyParams::zeros(config);
    let mut reference = PolicyParams::zeros(config);
    let n = params.num_params();
    let data = r.f64s()?;
    let ref_data = r.f64s()?;
    let t = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    if [data.len(), ref_data.len(), m.len(), v.len()].iter().any(|&l| l != n) {
        return Err(CheckpointError::CorruptCheckpoint("parameter block size".into()));
    }
    if r.at != content.len() {
        return Err(CheckpointError::CorruptCheckpoint("trailing bytes".into()));
    }
    params.data = data;
    reference.data = ref_data;
    Ok(Checkpoint {
        config_echo,
        params,
        reference,
        adam: AdamState { m, v, t },
        step,
        seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            vocab: 5,
            d_model: 4,
            d_ff: 6,
            n_layers: 1,
            max_len: 8,
        };
        let params = PolicyParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let reference = PolicyParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let n = params.num_params();
        Checkpoint {
            config_echo: "gamma = 0.01\nrho = 0.2\n".into(),
            params,
            reference,
            adam: AdamState {
                m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                v: (0..n).map(|i| (i as f64).sqrt() * 1e-7).collect(),
                t: 17,
            },
            step: 17,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.data.iter().zip(&c.params.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let bytes = encode(&sample());
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(decode(&flipped), Err(CheckpointError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = encode(&sample());
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        ));
    }
}
