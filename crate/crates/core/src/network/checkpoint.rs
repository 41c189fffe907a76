//! Binary LSTM checkpoints.
//!
//! Layout, little endian:
//!
//! ```text
//! b"SVLSTM1"  u32 version
//! u32 input_dim  u32 hidden_dim  u32 num_layers
//! [u8; 32] feature config digest
//! u32 len, len bytes of JSON metadata (training settings)
//! u8 input-norm flag; if 1: f64 momentum, f64 eps, then gamma, beta,
//!     running mean, running var (input_dim f64 each)
//! per layer: w_ih, w_hh, bias as row-major f64
//! u8 head flag; if 1: u32 speakers, weights (speakers x hidden), bias
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::{BatchNorm, LstmConfig, LstmModel, NetworkError, SoftmaxHead};
use crate::Scalar;

pub const MAGIC: &[u8; 7] = b"SVLSTM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an LSTM checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("trailing bytes after checkpoint")]
    Trailing,
    #[error("bad feature digest {0:?}")]
    BadDigest(String),
    #[error("metadata is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: LstmModel<T>,
    /// Hex SHA-256 of the feature config the model was trained on.
    pub feature_digest: String,
    pub metadata: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn values<'a, T: Scalar>(&mut self, it: impl IntoIterator<Item = &'a T>) {
        for v in it {
            self.f64(v.to_f64_lossy());
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn vec<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, CheckpointError> {
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }
    fn array1<T: Scalar>(&mut self, n: usize) -> Result<Array1<T>, CheckpointError> {
        Ok(Array1::from(self.vec(n)?))
    }
    fn array2<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>, CheckpointError> {
        Ok(Array2::from_shape_vec((rows, cols), self.vec(rows * cols)?).expect("sized"))
    }
}

pub fn encode<T: Scalar>(
    model: &LstmModel<T>,
    feature_digest: &str,
    metadata: &serde_json::Value,
) -> Result<Vec<u8>, CheckpointError> {
    let digest = hex::decode(feature_digest).map_err(|_| CheckpointError::BadDigest(feature_digest.into()))?;
    if digest.len() != 32 {
        return Err(CheckpointError::BadDigest(feature_digest.into()));
    }
    let cfg = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(cfg.input_dim as u32);
    w.u32(cfg.hidden_dim as u32);
    w.u32(cfg.num_layers as u32);
    w.0.extend_from_slice(&digest);
    let meta = serde_json::to_vec(metadata)?;
    w.u32(meta.len() as u32);
    w.0.extend_from_slice(&meta);
    match model.input_norm() {
        Some(bn) => {
            w.0.push(1);
            w.f64(bn.momentum);
            w.f64(bn.eps);
            w.values(bn.gamma.iter());
            w.values(bn.beta.iter());
            w.values(bn.running_mean.iter());
            w.values(bn.running_var.iter());
        }
        None => w.0.push(0),
    }
    for layer in model.layers() {
        w.values(layer.w_ih.iter());
        w.values(layer.w_hh.iter());
        w.values(layer.bias.iter());
    }
    match model.head() {
        Some(h) => {
            w.0.push(1);
            w.u32(h.num_speakers() as u32);
            w.values(h.weights.iter());
            w.values(h.bias.iter());
        }
        None => w.0.push(0),
    }
    Ok(w.0)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader(bytes);
    if r.take(7)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = LstmConfig {
        input_dim: r.u32()? as usize,
        hidden_dim: r.u32()? as usize,
        num_layers: r.u32()? as usize,
    };
    let feature_digest = hex::encode(r.take(32)?);
    let meta_len = r.u32()? as usize;
    let metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = LstmModel::<T>::zeros(config)?;
    if r.u8()? == 1 {
        let dim = config.input_dim;
        let mut bn = BatchNorm::new(dim);
        bn.momentum = r.f64()?;
        bn.eps = r.f64()?;
        bn.gamma = r.array1(dim)?;
        bn.beta = r.array1(dim)?;
        bn.running_mean = r.array1(dim)?;
        bn.running_var = r.array1(dim)?;
        model.set_input_norm(Some(bn))?;
    }
    let h = config.hidden_dim;
    for layer in model.layers_mut() {
        let input = layer.input_dim();
        layer.w_ih = r.array2(4 * h, input)?;
        layer.w_hh = r.array2(4 * h, h)?;
        layer.bias = r.array1(4 * h)?;
    }
    if r.u8()? == 1 {
        let n = r.u32()? as usize;
        let head = SoftmaxHead {
            weights: r.array2(n, h)?,
            bias: r.array1(n)?,
        };
        model.set_head(Some(head))?;
    }
    if !r.0.is_empty() {
        return Err(CheckpointError::Trailing);
    }
    Ok(Checkpoint {
        model,
        feature_digest,
        metadata,
    })
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    model: &LstmModel<T>,
    feature_digest: &str,
    metadata: &serde_json::Value,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model, feature_digest, metadata)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_and_without_extras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LstmConfig {
            input_dim: 3,
            hidden_dim: 4,
            num_layers: 2,
        };
        let digest = FeatureConfig::default().digest();
        let meta = serde_json::json!({"margin": 1.0});

        let plain = LstmModel::<f64>::new(cfg, &mut rng).unwrap();
        let back = decode::<f64>(&encode(&plain, &digest, &meta).unwrap()).unwrap();
        assert_eq!(back.model.params(), plain.params());
        assert!(back.model.head().is_none() && back.model.input_norm().is_none());
        assert_eq!(back.feature_digest, digest);
        assert_eq!(back.metadata, meta);

        let mut full = plain.clone();
        let mut bn = BatchNorm::new(3);
        bn.running_mean[1] = 0.25;
        full.set_input_norm(Some(bn)).unwrap();
        full.init_head(5, &mut rng);
        let bytes = encode(&full, &digest, &meta).unwrap();
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(back.model.params(), full.params());
        assert_eq!(back.model.input_norm(), full.input_norm());
        assert_eq!(encode(&back.model, &digest, &meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = LstmModel::<f64>::zeros(LstmConfig {
            input_dim: 2,
            hidden_dim: 2,
            num_layers: 1,
        })
        .unwrap();
        let digest = FeatureConfig::default().digest();
        let bytes = encode(&model, &digest, &serde_json::Value::Null).unwrap();
        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode::<f64>(&extra), Err(CheckpointError::Trailing)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode::<f64>(&magic), Err(CheckpointError::BadMagic)));
    }
}
