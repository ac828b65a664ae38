//! STF1 tensor files and feature-bundle manifests.
//!
//! Layout of an STF1 file (all integers little-endian):
//!
//! ```text
//! offset  size       field
//! 0       4          magic "STF1"
//! 4       1          dtype code (0 = f32, 1 = i64, 2 = u8)
//! 5       1          ndim
//! 6       2          zero padding
//! 8       8 * ndim   dimensions, u64 each
//! ...                row-major payload
//! ```

mod bundle;

pub use bundle::{load_bundle, write_bundle, FeatureBundle, Manifest};

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"STF1";
const HEADER_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"STF1\"")]
    BadMagic([u8; 4]),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: u64, found: u64 },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("shape {0:?} overflows the addressable element count")]
    ShapeOverflow(Vec<u64>),
    #[error("invalid shape {0:?}: must be non-empty with every dimension >= 1")]
    InvalidShape(Vec<usize>),
    #[error("{0} trailing bytes after payload")]
    TrailingData(u64),
    #[error("payload holds {found} elements but shape {shape:?} needs {expected}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("expected dtype {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("expected rank {expected}, found shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I64),
            2 => Ok(DType::U8),
            other => Err(TensorError::UnknownDtype(other)),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major tensor with an explicit shape.
///
/// Equality is bitwise on the payload for `f32`, so `NaN` payloads compare by
/// representation rather than by IEEE semantics.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::ShapeOverflow(shape.iter().map(|&d| d as u64).collect()))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected = checked_len(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = checked_len(&shape)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::I64 => TensorData::I64(vec![0; n]),
            DType::U8 => TensorData::U8(vec![0; n]),
        };
        Ok(Self { shape, data })
    }

    /// Rounds any generic float array to an `f32` tensor.
    pub fn from_array<T: Scalar, D: ndarray::Dimension>(array: &ndarray::Array<T, D>) -> Result<Self, TensorError> {
        let shape = array.shape().to_vec();
        let data = array.iter().map(|v| v.to_f32_lossy()).collect();
        Self::from_f32(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DtypeMismatch {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64], TensorError> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(TensorError::DtypeMismatch {
                expected: DType::I64,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], TensorError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(TensorError::DtypeMismatch {
                expected: DType::U8,
                found: other.dtype(),
            }),
        }
    }

    pub fn expect_rank(&self, rank: usize) -> Result<(), TensorError> {
        if self.shape.len() == rank {
            Ok(())
        } else {
            Err(TensorError::RankMismatch {
                expected: rank,
                shape: self.shape.clone(),
            })
        }
    }

    /// Converts an `f32` tensor into a dynamic-rank array of `T`.
    pub fn to_array<T: Scalar>(&self) -> Result<ArrayD<T>, TensorError> {
        let values = self.as_f32()?.iter().map(|&v| T::of_f32(v)).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&self.shape), values)
            .expect("tensor invariant guarantees shape matches payload"))
    }

    /// Integer label view: `i64` as-is, `u8` widened.
    pub fn to_labels(&self) -> Result<Vec<i64>, TensorError> {
        match &self.data {
            TensorData::I64(v) => Ok(v.clone()),
            TensorData::U8(v) => Ok(v.iter().map(|&x| x as i64).collect()),
            TensorData::F32(_) => Err(TensorError::DtypeMismatch {
                expected: DType::I64,
                found: DType::F32,
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.shape.len() + dtype.size_of() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = |needed: usize| TensorError::TruncatedFile {
            needed: needed as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end));
        }
        let raw_dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let overflow = || TensorError::ShapeOverflow(raw_dims.clone());
        let count = raw_dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(overflow)?;
        let payload_len = count
            .checked_mul(dtype.size_of() as u64)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(overflow)?;
        let shape: Vec<usize> = raw_dims
            .iter()
            .map(|&d| usize::try_from(d).map_err(|_| overflow()))
            .collect::<Result<_, _>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let end = dims_end.checked_add(payload_len).ok_or_else(overflow)?;
        if bytes.len() < end {
            return Err(truncated(end));
        }
        if bytes.len() > end {
            return Err(TensorError::TrailingData((bytes.len() - end) as u64));
        }
        let payload = &bytes[dims_end..end];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Self::new(shape, data)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    let io = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&tensor.encode()).map_err(io)?;
    file.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_hand_built_header() {
        let mut bytes = b"STF1".to_vec();
        bytes.extend_from_slice(&[0, 2, 0, 0]);
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = Tensor::decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Tensor::zeros(DType::F32, vec![2]).unwrap().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::decode(&bytes), Err(TensorError::BadMagic(_))));
    }

    #[test]
    fn rejects_unknown_dtype_and_truncation() {
        let mut bytes = Tensor::zeros(DType::F32, vec![3]).unwrap().encode();
        bytes[4] = 9;
        assert!(matches!(Tensor::decode(&bytes), Err(TensorError::UnknownDtype(9))));

        let bytes = Tensor::zeros(DType::F32, vec![3]).unwrap().encode();
        assert!(matches!(
            Tensor::decode(&bytes[..bytes.len() - 1]),
            Err(TensorError::TruncatedFile { .. })
        ));
        assert!(matches!(
            Tensor::decode(&bytes[..10]),
            Err(TensorError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn rejects_overflowing_shape() {
        let mut bytes = b"STF1".to_vec();
        bytes.extend_from_slice(&[0, 2, 0, 0]);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        assert!(matches!(Tensor::decode(&bytes), Err(TensorError::ShapeOverflow(_))));
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 0], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::from_f32(vec![], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn zero_filled_3x3_is_60_bytes() {
        // magic 4 + dtype 1 + ndim 1 + pad 2 + two u64 dims 16 + nine f32 36
        let t = Tensor::zeros(DType::F32, vec![3, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.stf");
        write_tensor(&path, &t).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 4 + 1 + 1 + 2 + 16 + 36);
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn label_and_scalar_like_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = Tensor::from_i64(vec![2], vec![255, 0]).unwrap();
        let path = dir.path().join("l.stf");
        write_tensor(&path, &labels).unwrap();
        assert_eq!(read_tensor(&path).unwrap().as_i64().unwrap(), &[255, 0]);

        let scalar = Tensor::from_f32(vec![1], vec![-0.5]).unwrap();
        write_tensor(&path, &scalar).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), scalar);
    }

    #[test]
    fn payload_is_little_endian() {
        let t = Tensor::from_i64(vec![1], vec![0x0102_0304]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[16..24], &[4, 3, 2, 1, 0, 0, 0, 0]);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map({
                    let s = shape.clone();
                    move |d| Tensor::from_f32(s.clone(), d).unwrap()
                }),
                prop::collection::vec(any::<i64>(), n).prop_map({
                    let s = shape.clone();
                    move |d| Tensor::from_i64(s.clone(), d).unwrap()
                }),
                prop::collection::vec(any::<u8>(), n).prop_map(move |d| Tensor::from_u8(shape.clone(), d).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(t in arb_tensor()) {
            let back = Tensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
