//! Binary parameter files.
//!
//! Layout: the magic `DDS1`, then one record per parameter until end of
//! file. A record is the name length (`u32`), the UTF-8 name, the rank
//! (`u32`), one `u32` per dimension and the values as `f64`. All integers
//! and floats are little-endian.

use std::path::Path;

use super::{NetError, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDS1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated checkpoint: expected at least {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub fn encode_checkpoint(records: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| CheckpointError::Format("dimension overflow".into()))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Format(format!("dimension overflow in {name}")))?;
        let payload = r.take(count)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        records.push((name, t));
    }
    Ok(records)
}

/// Writes the parameters of every network, prefixed by the network name.
pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    nets: &[&Network<S>],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let records: Vec<(String, Tensor<f64>)> = nets
        .iter()
        .flat_map(|net| {
            net.params
                .iter()
                .map(move |p| (format!("{}.{}", net.name, p.name), p.value.cast()))
        })
        .collect();
    std::fs::write(path, encode_checkpoint(&records)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

impl<S: Scalar> Network<S> {
    /// Overwrites every parameter from `records` (names prefixed by the
    /// network name). Fails if any is missing, misshapen, or if the records
    /// carry extra entries under this network's prefix.
    pub fn load_params(&mut self, records: &[(String, Tensor<f64>)]) -> Result<(), NetError> {
        let prefix = format!("{}.", self.name);
        let own: Vec<&(String, Tensor<f64>)> = records
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .collect();
        if let Some((extra, _)) = own
            .iter()
            .find(|(n, _)| self.param(&n[prefix.len()..]).is_none())
        {
            return Err(NetError::Invalid(format!(
                "checkpoint parameter {extra} does not exist in {}",
                self.name
            )));
        }
        let mut loaded = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let full = format!("{prefix}{}", p.name);
            let (_, t) = own
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| NetError::MissingParam(full.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(NetError::ParamShape {
                    name: full,
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            loaded.push(t.cast());
        }
        for (p, v) in self.params.iter_mut().zip(loaded) {
            p.value = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_reconstructor, build_selector, Granularity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Vec<(String, Tensor<f64>)> {
        vec![
            (
                "a.w".into(),
                Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
            ),
            (
                "a.b".into(),
                Tensor::new(vec![2], vec![0.5, f64::MIN_POSITIVE]).unwrap(),
            ),
        ]
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_checkpoint(&sample()[1..]);
        assert_eq!(&bytes[..4], b"DDS1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..11], b"a.b");
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &2u32.to_le_bytes());
        assert_eq!(&bytes[19..27], &0.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 35);
    }

    #[test]
    fn round_trip() {
        let recs = sample();
        let bytes = encode_checkpoint(&recs);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, recs);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&sample());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(
            err,
            CheckpointError::Truncated {
                expected: bytes.len(),
                actual: bytes.len() - 3
            }
        );
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn networks_reload() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sel = build_selector::<f64>(2, &[1, 8, 8], true, Granularity::Pixel, &mut rng).unwrap();
        let rec = build_reconstructor::<f64>(2, 4, &[1, 8, 8], true, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dds1");
        save_checkpoint(&path, &[&sel, &rec]).unwrap();
        let records = load_checkpoint(&path).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut sel2 =
            build_selector::<f64>(2, &[1, 8, 8], true, Granularity::Pixel, &mut rng2).unwrap();
        assert_ne!(sel2, sel);
        sel2.load_params(&records).unwrap();
        assert_eq!(sel2, sel);

        let mut wrong = build_reconstructor::<f64>(2, 5, &[1, 8, 8], true, &mut rng2).unwrap();
        assert!(matches!(
            wrong.load_params(&records),
            Err(NetError::ParamShape { .. })
        ));
    }
}
