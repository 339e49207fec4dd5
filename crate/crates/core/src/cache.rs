//! Binary persistence for feature matrices and probe models.
//!
//! Feature file, little-endian:
//!
//! ```text
//! "DFFT" | version u32 | modality u8 | t u32 | b u32 | n u64 | d u64 | n*d f32, row-major
//! ```
//!
//! Model file, same framing with its own magic and an `f64` payload so a
//! round trip is exact:
//!
//! ```text
//! "DFFM" | version u32 | loss u8 | k u64 | d u64 | k*d f64 weights, row-major | k f64 bias
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Modality};
use crate::probe::{LossKind, ProbeModel};

pub const FEATURE_MAGIC: &[u8; 4] = b"DFFT";
pub const MODEL_MAGIC: &[u8; 4] = b"DFFM";
pub const FORMAT_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 4 + 4 + 1 + 4 + 4 + 8 + 8;
const MODEL_HEADER: usize = 4 + 4 + 1 + 8 + 8;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        path: Default::default(),
        reason: reason.into(),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let got = r.take(4).ok_or_else(|| bad("truncated header"))?;
    if got != magic {
        return Err(bad(format!("bad magic {got:?}, expected {magic:?}")));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit the cache header")))
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let (n, d) = m.data.dim();
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * n * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(m.modality.code());
    out.extend_from_slice(&to_u32(m.t, "timestep")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.b, "block")?.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in m.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, FEATURE_MAGIC)?;
    let short = || bad("truncated header");
    let code = r.u8().ok_or_else(short)?;
    let modality = Modality::from_code(code).ok_or_else(|| bad(format!("unknown modality code {code}")))?;
    let t = r.u32().ok_or_else(short)? as usize;
    let b = r.u32().ok_or_else(short)? as usize;
    let n = r.u64().ok_or_else(short)? as usize;
    let d = r.u64().ok_or_else(short)? as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad("payload size overflows"))?;
    let payload = &bytes[r.pos..];
    if payload.len() != expected {
        return Err(bad(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((n, d), values).map_err(|e| bad(e.to_string()))?;
    FeatureMatrix::new(data, modality, t, b)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_features(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| with_path(e, path))
}

fn loss_code(kind: LossKind) -> u8 {
    match kind {
        LossKind::BceMultilabel => 0,
        LossKind::CeSinglelabel => 1,
    }
}

pub fn encode_model(m: &ProbeModel) -> Vec<u8> {
    let (k, d) = m.weights.dim();
    let mut out = Vec::with_capacity(MODEL_HEADER + 8 * (k * d + k));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(loss_code(m.loss_kind));
    out.extend_from_slice(&(k as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in m.weights.iter().chain(m.bias.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ProbeModel> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, MODEL_MAGIC)?;
    let short = || bad("truncated header");
    let loss_kind = match r.u8().ok_or_else(short)? {
        0 => LossKind::BceMultilabel,
        1 => LossKind::CeSinglelabel,
        c => return Err(bad(format!("unknown loss code {c}"))),
    };
    let k = r.u64().ok_or_else(short)? as usize;
    let d = r.u64().ok_or_else(short)? as usize;
    let count = k.checked_mul(d).and_then(|c| c.checked_add(k)).ok_or_else(|| bad("payload size overflows"))?;
    let payload = &bytes[r.pos..];
    if Some(payload.len()) != count.checked_mul(8) {
        return Err(bad(format!("payload is {} bytes, header implies {} values", payload.len(), count)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model parameters"));
    }
    Ok(ProbeModel {
        weights: Array2::from_shape_vec((k, d), values[..k * d].to_vec()).map_err(|e| bad(e.to_string()))?,
        bias: Array1::from(values[k * d..].to_vec()),
        loss_kind,
    })
}

pub fn write_model(path: &Path, m: &ProbeModel) -> Result<()> {
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ProbeModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| with_path(e, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::new(array![[1.0f32, -2.5, 3.25], [0.0, 1e-7, -0.0]], Modality::Text, 30, 7).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_features(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"DFFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], Modality::Text.code());
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 30);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), FEATURE_HEADER + 6 * 4);
        assert_eq!(f32::from_le_bytes(bytes[33..37].try_into().unwrap()), 1.0);
    }

    #[test]
    fn features_round_trip_bytes() {
        let m = sample();
        let bytes = encode_features(&m).unwrap();
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.data, m.data);
        assert_eq!((back.modality, back.t, back.b), (m.modality, m.t, m.b));
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_features(&sample()).unwrap();
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_features(&bytes[..10]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_features(&wrong).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(decode_features(&wrong).is_err());
        let mut wrong = bytes;
        wrong[8] = 77;
        assert!(decode_features(&wrong).is_err());
        assert!(decode_model(&encode_features(&sample()).unwrap()).is_err());
    }

    #[test]
    fn model_round_trip() {
        let m = ProbeModel {
            weights: array![[0.1, -0.2], [1.0 / 3.0, 4.0]],
            bias: array![0.5, -1e-300],
            loss_kind: LossKind::CeSinglelabel,
        };
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back, m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_model(&path, &m).unwrap();
        assert_eq!(read_model(&path).unwrap(), m);
        let bad_path = dir.path().join("missing.bin");
        assert!(matches!(read_model(&bad_path), Err(Error::Io { .. })));
    }
}
