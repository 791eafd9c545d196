//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! "ETRCKPT1" | version u32 | count u64 | params f64×count
//!            | first moment f64×count | second moment f64×count
//!            | optimizer step u64 | config digest [u8; 32]
//! ```

use std::path::Path;

use super::{MetricsIoError, Result};
use crate::trainer::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ETRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub digest: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.optimizer.first_moment.len() != n || self.optimizer.second_moment.len() != n {
            return Err(MetricsIoError::Contract(
                "optimizer moments do not match the parameter count".into(),
            ));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(MetricsIoError::Contract(
                "refusing to save non-finite parameters".into(),
            ));
        }
        let mut out = Vec::with_capacity(8 + 4 + 8 + 24 * n + 8 + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for block in [
            &self.params,
            &self.optimizer.first_moment,
            &self.optimizer.second_moment,
        ] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&self.digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(MetricsIoError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(MetricsIoError::Format(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let expected = count
            .checked_mul(24)
            .and_then(|b| b.checked_add(8 + 4 + 8 + 8 + 32))
            .ok_or_else(|| MetricsIoError::Format(format!("parameter count {count} overflows")))?;
        if expected != bytes.len() as u64 {
            return Err(MetricsIoError::Format(format!(
                "expected {expected} bytes for {count} parameters, found {}",
                bytes.len()
            )));
        }
        let n = count as usize;
        let params = r.f64s(n)?;
        let first_moment = r.f64s(n)?;
        let second_moment = r.f64s(n)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        Ok(Self {
            params,
            optimizer: OptimizerState {
                first_moment,
                second_moment,
                step,
            },
            digest,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(MetricsIoError::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    /// Set when an expected digest was given and differs (non-strict mode only).
    pub digest_mismatch: bool,
}

/// Reads a checkpoint. With `expected`, a differing digest is an error when
/// `strict` and a flagged warning otherwise.
pub fn load_checkpoint(path: &Path, expected: Option<&[u8; 32]>, strict: bool) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    let digest_mismatch = expected.is_some_and(|d| *d != checkpoint.digest);
    if digest_mismatch && strict {
        return Err(MetricsIoError::DigestMismatch);
    }
    Ok(LoadedCheckpoint {
        checkpoint,
        digest_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0],
            optimizer: OptimizerState {
                first_moment: vec![1e-300, 2.0, -3.5, 0.1],
                second_moment: vec![0.0, 4.0, 5e-324, 7.0],
                step: 42,
            },
            digest: [7; 32],
        }
    }

    fn same_bits(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path, Some(&[7; 32]), true).unwrap();
        assert!(!back.digest_mismatch);
        let b = back.checkpoint;
        assert!(same_bits(&b.params, &c.params));
        assert!(same_bits(&b.optimizer.first_moment, &c.optimizer.first_moment));
        assert!(same_bits(&b.optimizer.second_moment, &c.optimizer.second_moment));
        assert_eq!(b.optimizer.step, 42);
        assert_eq!(b.digest, c.digest);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 7, 12, 19, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(MetricsIoError::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(MetricsIoError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(MetricsIoError::Format(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn digest_mismatch_modes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&[0; 32]), true),
            Err(MetricsIoError::DigestMismatch)
        ));
        assert!(
            load_checkpoint(&path, Some(&[0; 32]), false)
                .unwrap()
                .digest_mismatch
        );
        assert!(!load_checkpoint(&path, None, true).unwrap().digest_mismatch);
    }

    #[test]
    fn non_finite_save_rejected() {
        let mut c = sample();
        c.params[0] = f64::NAN;
        assert!(c.to_bytes().is_err());
    }
}
