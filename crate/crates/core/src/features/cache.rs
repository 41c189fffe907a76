//! On-disk feature cache.
//!
//! Layout (little endian): `b"SVFEAT1"`, 32-byte SHA-256 config digest,
//! `u32` rows, `u32` cols, then `rows * cols` row-major `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::Scalar;

pub const MAGIC: &[u8; 7] = b"SVFEAT1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("not a feature cache (bad magic)")]
    BadMagic,
    #[error("feature cache digest {found} does not match config digest {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("truncated feature cache")]
    Truncated,
    #[error("bad digest string {0:?}")]
    BadDigest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<T: Scalar>(digest_hex: &str, m: &Array2<T>) -> Result<Vec<u8>, CacheError> {
    let digest = hex::decode(digest_hex).map_err(|_| CacheError::BadDigest(digest_hex.into()))?;
    if digest.len() != 32 {
        return Err(CacheError::BadDigest(digest_hex.into()));
    }
    let mut out = Vec::with_capacity(7 + 32 + 8 + m.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Returns the stored digest (hex) and matrix.
pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<(String, Array2<T>), CacheError> {
    let mut magic = [0u8; 7];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let mut digest = [0u8; 32];
    read_exact(&mut bytes, &mut digest)?;
    let mut word = [0u8; 4];
    read_exact(&mut bytes, &mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    read_exact(&mut bytes, &mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    if bytes.len() != rows * cols * 4 {
        return Err(CacheError::Truncated);
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let m = Array2::from_shape_vec((rows, cols), values).map_err(|_| CacheError::Truncated)?;
    Ok((hex::encode(digest), m))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CacheError> {
    r.read_exact(buf).map_err(|_| CacheError::Truncated)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, digest_hex: &str, m: &Array2<T>) -> Result<(), CacheError> {
    let bytes = encode(digest_hex, m)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a cache and checks it was produced under `expected_digest`.
pub fn read<T: Scalar>(path: impl AsRef<Path>, expected_digest: &str) -> Result<Array2<T>, CacheError> {
    let bytes = std::fs::read(path)?;
    let (found, m) = decode(&bytes)?;
    if found != expected_digest {
        return Err(CacheError::DigestMismatch {
            expected: expected_digest.to_string(),
            found,
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..20, cols in 1usize..10, seed in any::<u32>()) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| {
                ((i * 31 + j * 7) as f32 + seed as f32 * 1e-3).sin()
            });
            let digest = FeatureConfig::default().digest();
            let bytes = encode(&digest, &m).unwrap();
            let (d, back) = decode::<f32>(&bytes).unwrap();
            prop_assert_eq!(d, digest);
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode::<f32>(b"NOTFEAT"), Err(CacheError::BadMagic)));
        let digest = FeatureConfig::default().digest();
        let mut bytes = encode(&digest, &Array2::<f32>::zeros((2, 2))).unwrap();
        bytes.pop();
        assert!(matches!(decode::<f32>(&bytes), Err(CacheError::Truncated)));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.svfeat");
        write(&p, &digest, &Array2::<f64>::zeros((2, 2))).unwrap();
        let other = FeatureConfig::mfcc().digest();
        assert!(matches!(
            read::<f64>(&p, &other),
            Err(CacheError::DigestMismatch { .. })
        ));
        assert!(read::<f64>(&p, &digest).is_ok());
    }
}
